"""Two-phase training: aligner warm-up, then every parameter.

Randomness is keyed by ``(seed, stream, step)`` so any step can be replayed
from a checkpoint: batch selection, flips, splices and the non-negativity
coordinate sample never depend on earlier steps.
"""

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .errors import InsufficientSamples, InvalidConfig, NonFiniteLoss, NonFiniteScores, ShapeMismatch
from .featurizers import encode_audio, encode_images, load_checkpoint, save_checkpoint
from .losses import REGULARIZERS, total_loss
from .similarity import pairwise_volumes
from .synth import splice_negative

log = logging.getLogger(__name__)

_BATCH, _AUGMENT, _OMEGA = 21, 22, 23


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    warmup_steps: int = 300
    total_steps: int = 5000
    lr_warmup: float = 1e-3
    lr_full: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    lambdas: dict = field(default_factory=dict)
    disabled: tuple = ()
    seed: int = 0
    mode: str = "mixed"
    flip_prob: float = 0.5
    splice_prob: float = 0.5
    splice_frac: tuple = (0.10, 0.25)
    ramp_len: int = 4
    checkpoint_every: int = 1000
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "disabled", tuple(sorted(set(self.disabled))))
        object.__setattr__(self, "splice_frac", tuple(self.splice_frac))
        object.__setattr__(self, "lambdas", dict(self.lambdas))
        if self.batch_size < 2:
            raise InvalidConfig("batch_size must be at least 2")
        if self.warmup_steps < 0 or self.total_steps < 0:
            raise InvalidConfig("step counts must be non-negative")
        if self.lr_warmup <= 0 or self.lr_full <= 0:
            raise InvalidConfig("learning rates must be positive")
        if self.mode not in ("mixed", "language", "sound"):
            raise InvalidConfig(f"unknown mode {self.mode!r}")
        if self.mode == "mixed" and self.batch_size % 2:
            raise InvalidConfig("mixed batches need an even batch_size")
        bad = [d for d in self.disabled if d not in REGULARIZERS]
        bad += [k for k in self.lambdas if k not in REGULARIZERS]
        if bad:
            raise InvalidConfig(f"unknown regularizer {bad[0]!r}")
        if self.dtype not in ("float32", "float64"):
            raise InvalidConfig("dtype must be float32 or float64")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["disabled"] = list(self.disabled)
        d["splice_frac"] = list(self.splice_frac)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InvalidConfig(f"unknown train config key {unknown[0]!r}")
        return cls(**d)


# ----------------------------------------------------------------- batching


@dataclass
class Batch:
    images: np.ndarray
    clips: np.ndarray
    frame_masks: np.ndarray
    indices: np.ndarray
    ids: list
    regimes: list
    flipped: np.ndarray
    spliced: np.ndarray


def frame_mask(raw_mask, reduction):
    """Average a raw-sample mask over each feature frame's span."""
    raw_mask = np.asarray(raw_mask)
    length = raw_mask.shape[-1]
    frames = -(-length // reduction)
    padded = np.zeros(raw_mask.shape[:-1] + (frames * reduction,))
    padded[..., :length] = raw_mask
    return padded.reshape(raw_mask.shape[:-1] + (frames, reduction)).mean(axis=-1)


def _epoch_indices(corpus, config, step):
    b = config.batch_size
    if config.mode == "mixed":
        pools = [corpus.indices("language"), corpus.indices("sound")]
        per = b // 2
    else:
        pools = [corpus.indices(config.mode)]
        per = b
    smallest = min(len(p) for p in pools)
    per_epoch = smallest // per
    if per_epoch == 0:
        raise InsufficientSamples(f"need at least {per} samples per regime, have {smallest}")
    epoch, pos = divmod(step, per_epoch)
    chosen = []
    for r, pool in enumerate(pools):
        perm = np.random.default_rng([config.seed, _BATCH, epoch, r]).permutation(len(pool))
        chosen.append(pool[perm[pos * per:(pos + 1) * per]])
    return np.concatenate(chosen)


def make_batch(corpus, config, step, reduction=8):
    """Even-split batch for ``step`` with flips and negative splices applied."""
    idx = _epoch_indices(corpus, config, step)
    b = len(idx)
    rng = np.random.default_rng([config.seed, _AUGMENT, step])
    images = corpus.images[idx].copy()
    clips = corpus.clips[idx].copy()
    masks = corpus.splice_masks[idx].copy()
    originals = corpus.clips[idx]
    length = clips.shape[-1]
    flipped = rng.random(b) < config.flip_prob
    spliced = rng.random(b) < config.splice_prob
    for i in range(b):
        if flipped[i]:
            images[i] = images[i][..., ::-1]
        if not spliced[i]:
            continue
        donor = originals[(i + 1) % b]
        donor_valid = int(corpus.valid_lens[idx[(i + 1) % b]])
        frac = rng.uniform(*config.splice_frac)
        total = max(2 * config.ramp_len + 1, int(round(frac * length)))
        src = int(rng.integers(0, max(donor_valid - total, 0) + 1))
        pos = int(rng.integers(0, length - total + 1))
        new_clip, m = splice_negative(clips[i], donor[:, src:src + total], pos, config.ramp_len)
        clips[i] = new_clip
        masks[i] = np.maximum(masks[i], m)
    return Batch(
        images, clips, frame_mask(masks, reduction), idx,
        [corpus.ids[j] for j in idx], [str(corpus.regimes[j]) for j in idx], flipped, spliced,
    )


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam on the parameters named in ``grads``.

    ``params`` maps names to arrays; returns a new mapping (untouched names
    are passed through) and advances ``state`` in place.
    """
    out = dict(params)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {p.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        t = state.t.get(name, 0) + 1
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        out[name] = (p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
        state.m[name], state.v[name], state.t[name] = m.astype(p.dtype), v.astype(p.dtype), t
    state.step += 1
    return out, state


def clip_by_global_norm(grads, max_norm):
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if norm <= max_norm or norm == 0.0:
        return grads, norm, False
    scale = max_norm / norm
    return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}, norm, True


# -------------------------------------------------------------------- steps


def forward_loss(params, batch, config, step, trainable=()):
    """Build the graph for one batch; returns ``(breakdown, weight tensors)``."""
    mc = params.config
    dtype = np.dtype(config.dtype)
    w = params.as_tensors(trainable)
    audio = encode_audio(w, tn.Tensor(batch.clips.astype(dtype)), mc)
    visual = encode_images(w, tn.Tensor(batch.images.astype(dtype)), mc)
    volumes = pairwise_volumes(audio, visual)
    rng = np.random.default_rng([config.seed, _OMEGA, step])
    breakdown = total_loss(
        volumes, w["log_gamma"], batch.frame_masks.astype(dtype), rng,
        config.lambdas, config.disabled, mc.head_pool,
    )
    return breakdown, w


def train_step(params, state, corpus, config, step, phase):
    trainable = params.aligner_names() if phase == "warmup" else params.names()
    lr = config.lr_warmup if phase == "warmup" else config.lr_full
    batch = make_batch(corpus, config, step, params.config.reduction)
    try:
        breakdown, w = forward_loss(params, batch, config, step, trainable)
    except NonFiniteScores as exc:
        raise NonFiniteLoss(f"step {step}: {exc}", batch.ids) from exc
    total = float(breakdown.total.data)
    if not np.isfinite(total):
        raise NonFiniteLoss(f"non-finite loss at step {step}", batch.ids)
    tn.backward(breakdown.total)
    grads = {n: tn.grad_or_zeros(w[n]) for n in trainable}
    grads, norm, clipped = clip_by_global_norm(grads, config.clip_norm)
    if clipped:
        log.debug("step %d: clipped gradient norm %.3f", step, norm)
    arrays, state = adam_step(params.arrays, grads, state, lr, config.beta1, config.beta2, config.adam_eps)
    params = dataclasses.replace(params, arrays=arrays)
    return params, state, breakdown.record(step, params.gamma)


def _state_extras(state):
    extras = {}
    for name in state.m:
        extras[f"adam.m.{name}"] = state.m[name]
        extras[f"adam.v.{name}"] = state.v[name]
    return extras


def _state_from(extras, meta):
    state = AdamState(step=int(meta.get("step", 0)))
    counts = meta.get("adam_t", {})
    for key, arr in extras.items():
        _, kind, name = key.split(".", 2)
        getattr(state, kind)[name] = arr
    state.t = {k: int(v) for k, v in counts.items()}
    return state


def write_checkpoint(path, params, state, config, step):
    meta = {"step": int(step), "adam_t": state.t, "train_config": config.to_dict()}
    save_checkpoint(path, params, _state_extras(state), meta)


def read_checkpoint(path):
    """Return ``(params, adam_state, last_step)``."""
    params, extras, meta = load_checkpoint(path)
    return params, _state_from(extras, meta), int(meta.get("step", 0))


def run(params, corpus, config, start=1, stop=None, state=None, out_dir=None, log_fh=None):
    """Run steps ``start..stop`` (inclusive, 1-based); phase by step number."""
    stop = config.total_steps if stop is None else stop
    state = state or AdamState()
    params = params.astype(np.dtype(config.dtype))
    records = []
    for step in range(start, stop + 1):
        phase = "warmup" if step <= config.warmup_steps else "full"
        try:
            params, state, record = train_step(params, state, corpus, config, step, phase)
        except NonFiniteLoss as exc:
            if out_dir is not None:
                with open(os.path.join(out_dir, "nonfinite.json"), "w") as fh:
                    json.dump({"step": step, "batch_ids": exc.batch_ids}, fh)
            raise
        records.append(record)
        if log_fh is not None:
            log_fh.write(json.dumps(record, sort_keys=True) + "\n")
        if out_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
            write_checkpoint(os.path.join(out_dir, f"step_{step:06d}.dgck"), params, state, config, step)
        if step % 100 == 0:
            log.info("step %d %s total=%.4f gamma=%.3f", step, phase, record["total"], record["gamma"])
    return params, state, records


def train_warmup(params, corpus, config, state=None):
    """Warm-up phase only: aligners and temperature move, backbones stay fixed."""
    warm = dataclasses.replace(config, total_steps=config.warmup_steps)
    return run(params, corpus, warm, 1, config.warmup_steps, state)


def train_full(params, corpus, config, state=None, start=None):
    """Full phase only (every parameter), from just after warm-up to the end."""
    start = config.warmup_steps + 1 if start is None else start
    return run(params, corpus, config, start, config.total_steps, state)


def train(params, corpus, config, out_dir=None, resume=None):
    """Both phases with checkpoints and a JSON-lines log under ``out_dir``.

    ``resume`` is a checkpoint path; training continues after its step.
    """
    state, start = None, 1
    if resume is not None:
        params, state, last = read_checkpoint(resume)
        start = last + 1
    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "train_log.jsonl"), "a" if resume else "w")
    try:
        params, state, records = run(params, corpus, config, start, config.total_steps, state, out_dir, log_fh)
    finally:
        if log_fh is not None:
            log_fh.close()
    if out_dir is not None:
        write_checkpoint(os.path.join(out_dir, "final.dgck"), params, state, config, config.total_steps)
    return params, state, records
