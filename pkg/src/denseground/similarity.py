"""Dense audio-visual similarity volumes and their aggregation.

A volume ``s`` has trailing axes ``(K, F, T, H, W)``: one un-normalized
inner product per head between every audio position ``(f, t)`` and every
image position ``(h, w)``. Aggregation takes the max over ``(k, h, w)`` and
the mean over ``(f, t)``. Any leading axes are treated as batch axes.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import EmptyWindow, ShapeMismatch
from .featurizers import AudioFeatures, VisualFeatures

K_AXIS, F_AXIS, T_AXIS, H_AXIS, W_AXIS = -5, -4, -3, -2, -1


@dataclass
class SimilarityVolume:
    tensor: tn.Tensor
    audio_id: object = None
    visual_id: object = None

    @property
    def shape(self):
        return self.tensor.shape


def _unwrap(x):
    if isinstance(x, (AudioFeatures, VisualFeatures, SimilarityVolume)):
        return tn.as_tensor(x.tensor)
    return tn.as_tensor(x)


def pairwise_volumes(audio, visual):
    """All-pairs volumes for batches.

    ``audio`` is ``(B, C, K, F, T)``, ``visual`` is ``(B', C, K, H, W)``;
    the result is ``(B, B', K, F, T, H, W)`` computed as one batched matmul
    per head.
    """
    a, v = _unwrap(audio), _unwrap(visual)
    if a.ndim != 5 or v.ndim != 5:
        raise ShapeMismatch(f"expected batched features, got {a.shape} and {v.shape}")
    b, c, k, f, t = a.shape
    bv, cv, kv, h, w = v.shape
    if (c, k) != (cv, kv):
        raise ShapeMismatch(f"channel/head mismatch: audio {(c, k)}, visual {(cv, kv)}")
    am = tn.reshape(tn.transpose(a, (2, 0, 3, 4, 1)), (k, b * f * t, c))
    vm = tn.reshape(tn.transpose(v, (2, 1, 0, 3, 4)), (k, c, bv * h * w))
    s = tn.reshape(tn.matmul(am, vm), (k, b, f, t, bv, h, w))
    return tn.transpose(s, (1, 4, 0, 2, 3, 5, 6))


def similarity_volume(a, v):
    """Volume ``(K, F, T, H, W)`` for one audio ``(C, K, F, T)`` and image ``(C, K, H, W)``."""
    at, vt = _unwrap(a), _unwrap(v)
    if at.ndim != 4 or vt.ndim != 4:
        raise ShapeMismatch(f"expected unbatched features, got {at.shape} and {vt.shape}")
    s = pairwise_volumes(tn.reshape(at, (1,) + at.shape), tn.reshape(vt, (1,) + vt.shape))
    s = tn.reshape(s, s.shape[2:])
    return SimilarityVolume(s, getattr(a, "clip_id", None), getattr(v, "image_id", None))


def aggregate(s, head_pool="max"):
    """Max over ``(k, h, w)`` then mean over ``(f, t)``.

    With ``head_pool="mean"`` the heads are averaged instead of max-pooled
    (max over ``(h, w)`` only, then mean over ``(k, f, t)``).
    """
    s = _unwrap(s)
    nd = s.ndim
    if head_pool == "max":
        m, _ = tn.reduce("max", s, (nd - 5, nd - 2, nd - 1))
        return tn.reduce("mean", m, (-2, -1))[0]
    if head_pool == "mean":
        m, _ = tn.reduce("max", s, (nd - 2, nd - 1))
        return tn.reduce("mean", m, (-3, -2, -1))[0]
    raise ValueError(f"unknown head_pool {head_pool!r}")


def per_head_scores(s):
    """Aggregate each head separately: shape ``(..., K)``."""
    s = _unwrap(s)
    nd = s.ndim
    m, _ = tn.reduce("max", s, (nd - 2, nd - 1))
    return tn.reduce("mean", m, (-2, -1))[0]


def batch_score_matrix(audio, visual, head_pool="max", chunk=None):
    """``M[i, j] = aggregate(s(a_i, v_j))``; rows index audio, columns images.

    With ``chunk`` set, pairs are evaluated block by block without recording
    a graph (evaluation path); the result is then a plain array.
    """
    if chunk is None:
        return aggregate(pairwise_volumes(audio, visual), head_pool)
    a, v = _unwrap(audio).data, _unwrap(visual).data
    out = np.empty((a.shape[0], v.shape[0]), dtype=np.result_type(a, v))
    with tn.no_grad():
        for i in range(0, a.shape[0], chunk):
            for j in range(0, v.shape[0], chunk):
                vol = pairwise_volumes(a[i:i + chunk], v[j:j + chunk])
                out[i:i + chunk, j:j + chunk] = aggregate(vol, head_pool).data
    return out


def prompt_heatmap(s, t_window=None):
    """Head-max-pooled activation averaged over ``f`` and a time window.

    ``t_window`` is ``(t_start, t_end)`` in feature frames, half-open; None
    means the whole clip. Returns an ``(H, W)`` array.
    """
    vol = np.asarray(_unwrap(s).data)
    if vol.ndim != 5:
        raise ShapeMismatch(f"expected a (K, F, T, H, W) volume, got {vol.shape}")
    t = vol.shape[2]
    start, end = (0, t) if t_window is None else (int(t_window[0]), int(t_window[1]))
    if not 0 <= start < end <= t:
        raise EmptyWindow(f"window [{start}, {end}) is empty or outside [0, {t})")
    return vol[:, :, start:end].max(axis=0).mean(axis=(0, 1))


def upsample_bilinear(heat, target):
    """Bilinear resize with aligned corners (corner pixels map to corner pixels)."""
    heat = np.asarray(heat, dtype=np.float64)
    h, w = heat.shape
    th, tw = target

    def weights(n_in, n_out):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        lo = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = weights(h, th)
    c0, c1, fc = weights(w, tw)
    rows = heat[r0] * (1 - fr)[:, None] + heat[r1] * fr[:, None]
    return rows[:, c0] * (1 - fc)[None, :] + rows[:, c1] * fc[None, :]


def export_pgm(path, heat):
    """Write an 8-bit binary PGM (min-max normalized) plus a ``.json`` sidecar."""
    heat = np.asarray(heat, dtype=np.float64)
    lo, hi = float(heat.min()), float(heat.max())
    scaled = np.zeros_like(heat) if hi == lo else (heat - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    h, w = heat.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
    sidecar = str(path) + ".json"
    with open(sidecar, "w") as fh:
        json.dump({"min": lo, "max": hi, "height": h, "width": w}, fh, sort_keys=True)
    return sidecar


def read_pgm(path):
    """Parse a P5 file written by :func:`export_pgm` into a uint8 array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path} is not an 8-bit P5 image")
    w, h = (int(x) for x in dims.split())
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)
