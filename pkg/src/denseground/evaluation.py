"""Prompted segmentation, cross-modal retrieval and disentanglement metrics."""

import csv
import io
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .errors import MissingRegime, NoPositives, ShapeMismatch
from .featurizers import encode_audio, encode_images, frames_for
from .formats import canonical_json
from .similarity import (
    batch_score_matrix,
    export_pgm,
    pairwise_volumes,
    per_head_scores,
    prompt_heatmap,
    upsample_bilinear,
)
from .synth import REGIMES, render_prompt

N_THRESHOLDS = 20
RETRIEVAL_KS = (1, 5, 10)


# -------------------------------------------------------------------- scoring


def average_precision(scores, labels):
    """Binary AP with tied scores treated as one group.

    Items are ranked by descending score; each group of equal scores adds
    ``(recall gained) * (precision at the group's end)``.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ShapeMismatch("scores and labels differ in length")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise NoPositives("average precision needs at least one positive label")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    ends = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    tp = np.cumsum(y)[ends]
    seen = ends + 1
    gained = np.diff(np.concatenate([[0], tp]))
    return float(np.sum(gained / n_pos * tp / seen))


def iou(pred, gt):
    """``|pred & gt| / |pred | gt|``; 1 when both are empty."""
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


@dataclass
class SweepResult:
    miou: float
    threshold: float
    index: int
    degenerate: bool = False


def threshold_grid(lo, hi, n=N_THRESHOLDS):
    """``n`` uniformly spaced thresholds strictly between ``lo`` and ``hi``."""
    return np.linspace(lo, hi, n + 2)[1:-1]


def miou_sweep(heatmaps, masks, class_ids, n_thresholds=N_THRESHOLDS):
    """Best mean-over-classes IoU across a uniform interior threshold grid.

    ``heatmaps`` and ``masks`` are parallel lists of equal-shape arrays and
    ``class_ids`` names the class of each pair. Pixels strictly above a
    threshold are predicted positive. When every activation is identical
    the all-ones prediction is scored and the result is flagged degenerate.
    """
    if not len(heatmaps):
        raise ValueError("miou_sweep needs at least one heatmap")
    heat = np.stack([np.asarray(h, dtype=np.float64) for h in heatmaps])
    gt = np.stack([np.asarray(m, dtype=bool) for m in masks])
    class_ids = np.asarray(class_ids)
    classes = np.unique(class_ids)
    lo, hi = float(heat.min()), float(heat.max())

    def score(pred):
        per_pair = np.array([iou(p, g) for p, g in zip(pred, gt)])
        return float(np.mean([per_pair[class_ids == c].mean() for c in classes]))

    if lo == hi:
        return SweepResult(score(np.ones_like(gt)), lo, -1, True)
    best = None
    for i, thr in enumerate(threshold_grid(lo, hi, n_thresholds)):
        value = score(heat > thr)
        if best is None or value > best.miou:
            best = SweepResult(value, float(thr), i)
    return best


def retrieval_accuracy(scores, ks=RETRIEVAL_KS):
    """Accuracy@k for audio->image (rows) and image->audio (columns).

    The true match of row ``i`` is column ``i``. Rank counts strictly better
    candidates plus equal-scored candidates with a lower index.
    """
    m = np.asarray(scores, dtype=np.float64)
    n = m.shape[0]
    if m.shape != (n, n):
        raise ShapeMismatch(f"score matrix must be square, got {m.shape}")
    idx = np.arange(n)

    def ranks(mat):
        true = mat[idx, idx][:, None]
        better = (mat > true).sum(axis=1)
        tied_before = ((mat == true) & (idx[None, :] < idx[:, None])).sum(axis=1)
        return better + tied_before

    r_ai, r_ia = ranks(m), ranks(m.T)
    return (
        {int(k): float(np.mean(r_ai < k)) for k in ks},
        {int(k): float(np.mean(r_ia < k)) for k in ks},
    )


def minmax_scale(scores):
    """Scale each column (head) to [0, 1]; constant columns map to 0.5."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim == 1:
        s = s[:, None]
    if s.shape[0] == 0:
        raise ValueError("minmax_scale needs at least one score per head")
    lo, hi = s.min(axis=0), s.max(axis=0)
    span = hi - lo
    out = np.full_like(s, 0.5)
    ok = span > 0
    out[:, ok] = (s[:, ok] - lo[ok]) / span[ok]
    return out


def _regime_indicators(regimes):
    regimes = np.asarray(regimes)
    ind = [regimes == r for r in REGIMES]
    missing = [r for r, i in zip(REGIMES, ind) if not i.any()]
    if missing:
        raise MissingRegime(f"no samples from regime {missing[0]!r}")
    return ind


def _assignment_max(delta):
    return 0.5 * max(delta[0][0] + delta[1][1], delta[1][0] + delta[0][1])


def pred_dis(scaled, regimes):
    """Best head-to-regime assignment of AP(head score, regime indicator)."""
    scaled = np.asarray(scaled, dtype=np.float64)
    if scaled.shape[1] != 2:
        raise ShapeMismatch("PredDis is defined for two heads")
    ind = _regime_indicators(regimes)
    delta = [[average_precision(scaled[:, k], ind[r]) for r in range(2)] for k in range(2)]
    return _assignment_max(delta)


def act_dis(scaled, regimes):
    """Best head-to-regime assignment of head inactivity ``1 - mean score``."""
    scaled = np.asarray(scaled, dtype=np.float64)
    if scaled.shape[1] != 2:
        raise ShapeMismatch("ActDis is defined for two heads")
    ind = _regime_indicators(regimes)
    delta = [[1.0 - scaled[ind[r], k].mean() for r in range(2)] for k in range(2)]
    return _assignment_max(delta)


# ------------------------------------------------------------ model plumbing


def featurize(params, images=None, clips=None, chunk=64):
    """Batched no-grad featurization; returns numpy arrays."""
    w = params.as_tensors()
    dtype = next(iter(params.arrays.values())).dtype
    out = []
    with tn.no_grad():
        for arr, fn in ((images, encode_images), (clips, encode_audio)):
            if arr is None:
                out.append(None)
                continue
            parts = [fn(w, tn.Tensor(arr[i:i + chunk].astype(dtype)), params.config).data
                     for i in range(0, len(arr), chunk)]
            out.append(np.concatenate(parts))
    return out


def _frame_window(window, config):
    start, end = window
    return start // config.reduction, frames_for(end, config)


def prompted_heatmaps(params, corpus, regime, prompt_seed=None):
    """Upsampled heatmaps for every eval image and every class it contains.

    Returns a list of ``(class_id, image_index, heatmap, mask)``.
    """
    gen = corpus.config
    mc = params.config
    vocab = corpus.vocab
    seed = corpus.seed if prompt_seed is None else prompt_seed
    visual, = featurize(params, images=corpus.images)[:1]
    out = []
    for class_id in range(gen.vocab_size(regime)):
        holders = [(i, o) for i, s in enumerate(corpus.samples) if s.regime == regime
                   for o in s.objects if o.class_id == class_id]
        if not holders:
            continue
        clip, window = render_prompt(gen, vocab, regime, class_id, seed)
        _, audio = featurize(params, clips=clip[None])
        t_window = None if regime == "sound" else _frame_window(window, mc)
        with tn.no_grad():
            vols = pairwise_volumes(audio, visual[[i for i, _ in holders]]).data[0]
        for (i, obj), vol in zip(holders, vols):
            heat = upsample_bilinear(prompt_heatmap(vol, t_window), obj.mask.shape)
            out.append((class_id, i, heat, obj.mask))
    return out


def prompted_segmentation_eval(params, corpus, regime, heatmaps=None):
    """Per-class AP over all pixels of the images holding the class, plus mIoU."""
    heatmaps = heatmaps if heatmaps is not None else prompted_heatmaps(params, corpus, regime)
    per_class, prevalence = {}, {}
    classes = sorted({c for c, *_ in heatmaps})
    for c in classes:
        pairs = [(h, m) for cc, _, h, m in heatmaps if cc == c]
        scores = np.concatenate([h.ravel() for h, _ in pairs])
        labels = np.concatenate([m.ravel() for _, m in pairs])
        per_class[int(c)] = average_precision(scores, labels)
        prevalence[int(c)] = float(labels.mean())
    sweep = miou_sweep([h for *_, h, _ in heatmaps], [m for *_, m in heatmaps], [c for c, *_ in heatmaps])
    return {
        "per_class_ap": per_class,
        "mAP": float(np.mean(list(per_class.values()))),
        "mIoU": sweep.miou,
        "mIoU_threshold": sweep.threshold,
        "mIoU_threshold_index": sweep.index,
        "degenerate": sweep.degenerate,
        "prevalence": float(np.mean(list(prevalence.values()))),
    }


def retrieval_eval(params, corpus, n=100, ks=RETRIEVAL_KS):
    if n < 10:
        raise ValueError("retrieval needs N >= 10")
    n = min(n, len(corpus))
    visual, audio = featurize(params, corpus.images[:n], corpus.clips[:n])
    scores = batch_score_matrix(audio, visual, params.config.head_pool, chunk=50)
    a2i, i2a = retrieval_accuracy(scores, ks)
    return {"n": n, "a2i": a2i, "i2a": i2a}


def head_scores(params, corpus, chunk=50):
    """Per-head aggregated score of every positive (paired) sample: ``(N, K)``."""
    visual, audio = featurize(params, corpus.images, corpus.clips)
    out = []
    with tn.no_grad():
        for i in range(0, len(corpus), chunk):
            a, v = audio[i:i + chunk], visual[i:i + chunk]
            idx = np.arange(len(a))
            vols = pairwise_volumes(a, v).data[idx, idx]
            out.append(per_head_scores(vols).data)
    return np.concatenate(out)


def disentanglement_eval(params, corpus):
    raw = head_scores(params, corpus)
    scaled = minmax_scale(raw)
    return {"PredDis": pred_dis(scaled, corpus.regimes), "ActDis": act_dis(scaled, corpus.regimes)}


# --------------------------------------------------------------------- report


@dataclass
class EvalReport:
    speech: dict
    sound: dict
    mAP: float
    retrieval: dict
    PredDis: float
    ActDis: float
    config: dict = field(default_factory=dict)
    checkpoint: str = ""
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def metrics(self):
        """Flat (group, name, value) rows; everything except ``meta``."""
        rows = []
        for group in ("speech", "sound"):
            part = getattr(self, group)
            for key in ("mAP", "mIoU", "mIoU_threshold", "mIoU_threshold_index", "prevalence"):
                rows.append((group, key, part[key]))
            rows.append((group, "degenerate", int(part["degenerate"])))
            for c, ap in sorted(part["per_class_ap"].items(), key=lambda kv: int(kv[0])):
                rows.append((f"{group}_ap", f"class_{int(c)}", ap))
        rows.append(("segmentation", "mAP", self.mAP))
        for direction in ("a2i", "i2a"):
            for k, v in sorted(self.retrieval[direction].items(), key=lambda kv: int(kv[0])):
                rows.append((f"retrieval_{direction}", f"acc@{int(k)}", v))
        rows.append(("disentanglement", "PredDis", self.PredDis))
        rows.append(("disentanglement", "ActDis", self.ActDis))
        return rows

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["metric", "name", "value"])
        for row in self.metrics():
            writer.writerow([row[0], row[1], repr(float(row[2]))])
        return buf.getvalue()

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            fh.write(canonical_json(self.to_dict()))
        with open(os.path.join(out_dir, "report.csv"), "w") as fh:
            fh.write(self.to_csv())


def evaluate(params, corpus, n_retrieval=100, checkpoint="", heatmap_dir=None, meta=None):
    """Run every metric on an eval split and assemble an :class:`EvalReport`."""
    parts = {}
    for regime, key in (("language", "speech"), ("sound", "sound")):
        maps = prompted_heatmaps(params, corpus, regime)
        parts[key] = prompted_segmentation_eval(params, corpus, regime, maps)
        if heatmap_dir is not None:
            os.makedirs(heatmap_dir, exist_ok=True)
            for class_id, i, heat, _ in maps:
                export_pgm(os.path.join(heatmap_dir, f"{key}_{corpus.ids[i]}_class{class_id:02d}.pgm"), heat)
    all_ap = list(parts["speech"]["per_class_ap"].values()) + list(parts["sound"]["per_class_ap"].values())
    if params.config.heads == 2:
        dis = disentanglement_eval(params, corpus)
    else:
        dis = {"PredDis": float("nan"), "ActDis": float("nan")}
    return EvalReport(
        speech=parts["speech"],
        sound=parts["sound"],
        mAP=float(np.mean(all_ap)),
        retrieval=retrieval_eval(params, corpus, n_retrieval),
        PredDis=float(dis["PredDis"]),
        ActDis=float(dis["ActDis"]),
        config={"model": params.config.to_dict(), "generator": corpus.config.to_dict(), "seed": int(corpus.seed)},
        checkpoint=checkpoint,
        meta=meta or {},
    )
