"""Symmetric InfoNCE plus the disentanglement and stability regularizers."""

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import tensor as tn
from .errors import NonFiniteScores, NonPositiveGamma
from .similarity import aggregate

LAMBDAS = {"dis": 0.05, "splice": 0.01, "cal": 0.1, "nonneg": 0.01, "tv": 0.01}
REGULARIZERS = tuple(LAMBDAS)
NONNEG_SAMPLES = 250


def _zero(dtype=np.float64):
    return tn.Tensor(np.zeros((), dtype=dtype))


def info_nce(scores, gamma):
    """Return ``(l_av, l_va)`` as negative log-likelihoods.

    ``scores[i, j]`` compares audio ``i`` with image ``j``. ``l_av`` ranks
    images for each audio row, ``l_va`` ranks audio for each image column;
    each carries the ``1/(2B)`` factor so their sum is the mean NLL.
    """
    scores = tn.as_tensor(scores)
    if not np.all(np.isfinite(scores.data)):
        raise NonFiniteScores("score matrix contains non-finite values")
    b = scores.shape[0]
    logits = scores * gamma
    diag = tn.getitem(logits, (np.arange(b), np.arange(b)))
    scale = 1.0 / (2 * b)
    l_av = (tn.logsumexp(logits, 1) - diag).sum() * scale
    l_va = (tn.logsumexp(logits, 0) - diag).sum() * scale
    return l_av, l_va


def l_dis(s_pos):
    """Mean ``|s[k1] * s[k2]|`` averaged over all unordered head pairs.

    ``s_pos`` holds positive-pair volumes, trailing axes ``(K, F, T, H, W)``.
    """
    s_pos = tn.as_tensor(s_pos)
    k = s_pos.shape[-5]
    if k < 2:
        return _zero(s_pos.dtype)
    lead = (slice(None),) * (s_pos.ndim - 5)
    terms = [
        tn.abs(s_pos[lead + (i,)] * s_pos[lead + (j,)]).mean()
        for i, j in combinations(range(k), 2)
    ]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def _broadcast_mask(mask, s):
    """Mask ``(..., T)`` -> broadcastable against ``(..., K, F, T, H, W)``."""
    m = np.asarray(mask, dtype=s.dtype)
    return m.reshape(m.shape[:-1] + (1, 1, m.shape[-1], 1, 1))


def l_splice(s_pos, mask):
    """Mask-weighted mean of ``s**2``; zero when the mask is all zero."""
    s_pos = tn.as_tensor(s_pos)
    m = np.broadcast_to(_broadcast_mask(mask, s_pos), s_pos.shape)
    weight = float(m.sum())
    if weight == 0.0:
        return _zero(s_pos.dtype)
    return (tn.square(s_pos) * m).sum() * (1.0 / weight)


def l_cal(gamma):
    """``max(-log gamma, 0)**2``: penalizes an inverse temperature below 1."""
    gamma = tn.as_tensor(gamma)
    if not np.all(gamma.data > 0):
        raise NonPositiveGamma(f"gamma must be positive, got {gamma.data}")
    return tn.square(tn.min_with_zero(tn.log(gamma)))


def nonneg_coordinates(shape, rng, n_samples=NONNEG_SAMPLES):
    """Flat indices drawn uniformly with replacement from a volume of ``shape``."""
    return rng.integers(0, int(np.prod(shape)), size=n_samples)


def l_nonneg(volumes, rng, n_samples=NONNEG_SAMPLES):
    """Mean of ``min(s, 0)**2`` over randomly sampled coordinates of all pairs."""
    volumes = tn.as_tensor(volumes)
    idx = nonneg_coordinates(volumes.shape, rng, n_samples)
    picked = tn.getitem(tn.reshape(volumes, (-1,)), idx)
    return tn.square(tn.min_with_zero(picked)).mean()


def l_tv(s_pos):
    """Mean squared difference between adjacent time slices."""
    s_pos = tn.as_tensor(s_pos)
    t = s_pos.shape[-3]
    if t < 2:
        return _zero(s_pos.dtype)
    lead = (Ellipsis,)
    later = s_pos[lead + (slice(1, None), slice(None), slice(None))]
    earlier = s_pos[lead + (slice(None, -1), slice(None), slice(None))]
    return tn.square(later - earlier).mean()


@dataclass
class LossBreakdown:
    l_av: tn.Tensor
    l_va: tn.Tensor
    l_dis: tn.Tensor
    l_splice: tn.Tensor
    l_cal: tn.Tensor
    l_nonneg: tn.Tensor
    l_tv: tn.Tensor
    total: tn.Tensor
    lambdas: dict = field(default_factory=dict)

    def values(self):
        return {
            name: float(getattr(self, name).data)
            for name in ("l_av", "l_va", "l_dis", "l_splice", "l_cal", "l_nonneg", "l_tv", "total")
        }

    def record(self, step, gamma):
        return {"step": int(step), **self.values(), "gamma": float(gamma)}


def resolve_lambdas(overrides=None, disabled=()):
    lambdas = dict(LAMBDAS)
    for key, value in (overrides or {}).items():
        if key not in lambdas:
            raise KeyError(f"unknown regularizer {key!r}")
        lambdas[key] = float(value)
    for key in disabled:
        if key not in lambdas:
            raise KeyError(f"unknown regularizer {key!r}")
    return lambdas


def combine(l_av, l_va, terms, lambdas, disabled=()):
    """Weighted sum in a fixed order; disabled terms add an exact zero."""
    total = l_av + l_va
    for name in REGULARIZERS:
        if name in disabled:
            total = total + 0.0
        else:
            total = total + terms[name] * lambdas[name]
    return total


def total_loss(volumes, log_gamma, splice_mask, rng, lambdas=None, disabled=(), head_pool="max"):
    """Full objective from the ``(B, B, K, F, T, H, W)`` all-pairs volume.

    ``splice_mask`` is ``(B, T)`` in feature frames. ``rng`` drives the
    non-negativity coordinate sample. Disabled terms are not computed.
    """
    volumes = tn.as_tensor(volumes)
    lambdas = resolve_lambdas(lambdas, disabled)
    disabled = set(disabled)
    b = volumes.shape[0]
    gamma = tn.exp(log_gamma)
    scores = aggregate(volumes, head_pool)
    l_av, l_va = info_nce(scores, gamma)
    diag = np.arange(b)
    s_pos = tn.getitem(volumes, (diag, diag))
    zero = _zero(volumes.dtype)
    terms = {
        "dis": zero if "dis" in disabled else l_dis(s_pos),
        "splice": zero if "splice" in disabled else l_splice(s_pos, splice_mask),
        "cal": zero if "cal" in disabled else l_cal(gamma),
        "nonneg": zero if "nonneg" in disabled else l_nonneg(volumes, rng),
        "tv": zero if "tv" in disabled else l_tv(s_pos),
    }
    total = combine(l_av, l_va, terms, lambdas, disabled)
    return LossBreakdown(
        l_av, l_va, terms["dis"], terms["splice"], terms["cal"], terms["nonneg"], terms["tv"],
        total, lambdas,
    )
