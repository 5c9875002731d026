"""``denseground`` command line: generate, train, eval."""

import argparse
import dataclasses
import datetime
import json
import logging
import os
import sys

from .errors import DenseGroundError, InvalidConfig
from .evaluation import evaluate
from .featurizers import ModelConfig, init_params, load_checkpoint
from .formats import canonical_json
from .losses import REGULARIZERS
from .synth import Corpus, GeneratorConfig, generate_corpus
from .training import TrainConfig, train

log = logging.getLogger("denseground")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
EVAL_DEFAULTS = {"n_retrieval": 100, "export_heatmaps": False}


def _reject_unknown(d, known, where):
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise InvalidConfig(f"unknown key {unknown[0]!r} in {where}")


@dataclasses.dataclass
class RunConfig:
    command: str = ""
    corpus: str = ""
    checkpoint: str = ""
    out: str = ""
    seed: int = 0
    workers: int = 1
    disable: tuple = ()
    generator: GeneratorConfig = dataclasses.field(default_factory=GeneratorConfig)
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    eval: dict = dataclasses.field(default_factory=lambda: dict(EVAL_DEFAULTS))

    def __post_init__(self):
        self.disable = tuple(sorted(set(self.disable)))
        bad = [d for d in self.disable if d not in REGULARIZERS]
        if bad:
            raise InvalidConfig(f"unknown regularizer {bad[0]!r}; choose from {','.join(REGULARIZERS)}")
        _reject_unknown(self.eval, EVAL_DEFAULTS, "eval")
        self.eval = {**EVAL_DEFAULTS, **self.eval}
        if self.workers < 1:
            raise InvalidConfig("workers must be at least 1")

    def train_config(self):
        """Training settings with the run seed and disable flags folded in."""
        disabled = sorted(set(self.train.disabled) | set(self.disable))
        return dataclasses.replace(self.train, seed=self.seed, disabled=tuple(disabled))

    def to_dict(self):
        return {
            "command": self.command,
            "corpus": self.corpus,
            "checkpoint": self.checkpoint,
            "out": self.out,
            "seed": int(self.seed),
            "workers": int(self.workers),
            "disable": list(self.disable),
            "generator": self.generator.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "eval": dict(self.eval),
        }

    def to_json(self):
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise InvalidConfig("run config must be a JSON object")
        _reject_unknown(d, [f.name for f in dataclasses.fields(cls)], "run config")
        kw = dict(d)
        for key, typ in (("generator", GeneratorConfig), ("model", ModelConfig), ("train", TrainConfig)):
            if key in kw:
                kw[key] = typ.from_dict(kw[key])
        if "disable" in kw:
            kw["disable"] = tuple(kw["disable"])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from None

    @classmethod
    def from_json(cls, text):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(data)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="denseground", description="Dense multi-head audio-visual grounding on synthetic data.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config; flags override it")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="master seed for data, init, batches and sampling")
        p.add_argument("--workers", type=int, help="worker processes (results do not depend on it)")
        return p

    common(sub.add_parser("generate", help="write a synthetic corpus"))
    t = common(sub.add_parser("train", help="two-phase training on a corpus"))
    t.add_argument("--corpus", required=True)
    t.add_argument("--disable-reg", default="", help="comma separated subset of " + ",".join(REGULARIZERS))
    t.add_argument("--warmup-steps", type=int)
    t.add_argument("--steps", type=int, help="total steps, warm-up included")
    t.add_argument("--resume", help="checkpoint to continue from")
    e = common(sub.add_parser("eval", help="score a checkpoint on the eval split"))
    e.add_argument("--corpus", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--export-heatmaps", action="store_true")
    return parser


def resolve_config(args):
    """Merge the optional JSON config with command line flags."""
    cfg = RunConfig()
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = RunConfig.from_json(fh.read())
        except OSError as exc:
            raise InvalidConfig(f"cannot read config {args.config}: {exc.strerror}") from None
    updates = {"command": args.command}
    for name in ("out", "seed", "workers", "corpus", "checkpoint"):
        value = getattr(args, name, None)
        if value is not None:
            updates[name] = value
    if getattr(args, "disable_reg", ""):
        updates["disable"] = tuple(x.strip() for x in args.disable_reg.split(",") if x.strip())
    train_updates = {}
    if getattr(args, "warmup_steps", None) is not None:
        train_updates["warmup_steps"] = args.warmup_steps
    if getattr(args, "steps", None) is not None:
        train_updates["total_steps"] = args.steps
    if train_updates:
        try:
            updates["train"] = dataclasses.replace(cfg.train, **train_updates)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from None
    if getattr(args, "export_heatmaps", False):
        updates["eval"] = {**cfg.eval, "export_heatmaps": True}
    cfg = dataclasses.replace(cfg, **updates)
    if not cfg.out:
        raise InvalidConfig("--out is required")
    return cfg


def _check_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise FileNotFoundError(f"parent directory {parent} does not exist")


def cmd_generate(cfg):
    _check_parent(cfg.out)
    os.makedirs(cfg.out, exist_ok=True)
    manifest = generate_corpus(cfg.generator, cfg.seed, cfg.out, cfg.workers)
    counts = {}
    for rec in manifest.samples:
        key = f"{rec['split']}/{rec['regime']}"
        counts[key] = counts.get(key, 0) + 1
    print(os.path.join(cfg.out, "manifest.json"))
    for key in sorted(counts):
        print(f"{key}\t{counts[key]}")


def _ensure(out, name):
    os.makedirs(out, exist_ok=True)
    return os.path.join(out, name)


def cmd_train(cfg):
    _check_parent(cfg.out)
    corpus = Corpus.load(cfg.corpus, "train")
    tc = cfg.train_config()
    params = init_params(cfg.model, cfg.seed)
    with open(_ensure(cfg.out, "run_config.json"), "w") as fh:
        fh.write(cfg.to_json())
    train(params, corpus, tc, cfg.out, resume=cfg.checkpoint or None)
    print(os.path.join(cfg.out, "final.dgck"))
    print(os.path.join(cfg.out, "train_log.jsonl"))


def cmd_eval(cfg):
    _check_parent(cfg.out)
    params, _, _ = load_checkpoint(cfg.checkpoint)
    corpus = Corpus.load(cfg.corpus, "eval")
    heat_dir = os.path.join(cfg.out, "heatmaps") if cfg.eval["export_heatmaps"] else None
    stamp = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    report = evaluate(params, corpus, cfg.eval["n_retrieval"], os.path.basename(cfg.checkpoint),
                      heat_dir, meta={"timestamp": stamp})
    report.write(cfg.out)
    print(os.path.join(cfg.out, "report.json"))
    for group, name, value in report.metrics():
        if not group.endswith("_ap"):
            print(f"{group}\t{name}\t{float(value):.4f}")


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval}


def main(argv=None):
    level = os.environ.get("DG_LOG", "error").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "train" and args.resume:
            cfg = dataclasses.replace(cfg, checkpoint=args.resume)
        COMMANDS[args.command](cfg)
    except (InvalidConfig, KeyError) as exc:
        print(f"denseground: config error: {exc}", file=sys.stderr)
        return 1
    except (DenseGroundError, OSError) as exc:
        print(f"denseground: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
