"""Toy trainable backbones plus the channel-LayerNorm aligners.

Visual path: three stride-2 3x3 conv+relu blocks, channel LayerNorm, 1x1
conv to ``C*K`` channels, reshape to ``(C, K, H, W)``.

Audio path: three stride-2 temporal conv+relu blocks, channel LayerNorm,
two same-padded width-3 temporal convs with a relu between them, reshape to
``(C, K, 1, T)``. The frequency axis is always 1.

Output channel ``c*K + k`` of an aligner is channel ``c`` of head ``k``.
"""

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .errors import InvalidConfig, ShapeMismatch
from .formats import read_header, read_tensor, write_header, write_tensor

CHECKPOINT_MAGIC = b"DGCK"
CHECKPOINT_VERSION = 1
BACKBONE_STRIDE = 2
BACKBONE_DEPTH = 3


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 8
    heads: int = 2
    image_channels: int = 3
    image_size: int = 64
    audio_channels: int = 16
    clip_len: int = 256
    visual_widths: tuple = (16, 32, 32)
    audio_widths: tuple = (32, 32, 32)
    visual_kernel: int = 3
    audio_kernel: int = 5
    aligner_hidden: int = 64
    head_pool: str = "max"

    def __post_init__(self):
        object.__setattr__(self, "visual_widths", tuple(self.visual_widths))
        object.__setattr__(self, "audio_widths", tuple(self.audio_widths))
        dims = [self.channels, self.heads, self.image_channels, self.image_size,
                self.audio_channels, self.clip_len, self.visual_kernel,
                self.audio_kernel, self.aligner_hidden, *self.visual_widths, *self.audio_widths]
        if any(int(d) <= 0 for d in dims):
            raise InvalidConfig("all model dimensions must be positive")
        if len(self.visual_widths) != BACKBONE_DEPTH or len(self.audio_widths) != BACKBONE_DEPTH:
            raise InvalidConfig(f"backbones have exactly {BACKBONE_DEPTH} blocks")
        if self.visual_kernel % 2 == 0 or self.audio_kernel % 2 == 0:
            raise InvalidConfig("backbone kernels must be odd")
        if self.head_pool not in ("max", "mean"):
            raise InvalidConfig(f"head_pool must be 'max' or 'mean', got {self.head_pool!r}")

    @property
    def reduction(self):
        return BACKBONE_STRIDE ** BACKBONE_DEPTH

    @property
    def feature_size(self):
        return -(-self.image_size // self.reduction)

    @property
    def frames(self):
        return -(-self.clip_len // self.reduction)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["visual_widths"] = list(self.visual_widths)
        d["audio_widths"] = list(self.audio_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InvalidConfig(f"unknown model config key {unknown[0]!r}")
        return cls(**d)


def _layer_specs(cfg):
    """(name, shape, fan_in) for every parameter, in checkpoint order."""
    specs = []
    c_in = cfg.image_channels
    for i, width in enumerate(cfg.visual_widths):
        k = cfg.visual_kernel
        specs.append((f"visual.backbone.{i}.weight", (width, c_in, k, k), c_in * k * k))
        specs.append((f"visual.backbone.{i}.bias", (width,), None))
        c_in = width
    specs += [
        ("visual.aligner.ln.gain", (c_in,), None),
        ("visual.aligner.ln.bias", (c_in,), None),
        ("visual.aligner.proj.weight", (cfg.channels * cfg.heads, c_in, 1, 1), c_in),
        ("visual.aligner.proj.bias", (cfg.channels * cfg.heads,), None),
    ]
    c_in = cfg.audio_channels
    for i, width in enumerate(cfg.audio_widths):
        k = cfg.audio_kernel
        specs.append((f"audio.backbone.{i}.weight", (width, c_in, k), c_in * k))
        specs.append((f"audio.backbone.{i}.bias", (width,), None))
        c_in = width
    hidden = cfg.aligner_hidden
    specs += [
        ("audio.aligner.ln.gain", (c_in,), None),
        ("audio.aligner.ln.bias", (c_in,), None),
        ("audio.aligner.conv1.weight", (hidden, c_in, 3), c_in * 3),
        ("audio.aligner.conv1.bias", (hidden,), None),
        ("audio.aligner.conv2.weight", (cfg.channels * cfg.heads, hidden, 3), hidden * 3),
        ("audio.aligner.conv2.bias", (cfg.channels * cfg.heads,), None),
        ("log_gamma", (), None),
    ]
    return specs


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict = field(default_factory=dict)

    def names(self):
        return list(self.arrays)

    def aligner_names(self):
        """Parameters trained during warm-up: aligners and the temperature."""
        return [n for n in self.arrays if ".aligner." in n or n == "log_gamma"]

    def backbone_names(self):
        return [n for n in self.arrays if ".backbone." in n]

    @property
    def gamma(self):
        return float(np.exp(self.arrays["log_gamma"]))

    def copy(self):
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype):
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def as_tensors(self, trainable=()):
        trainable = set(trainable)
        return {k: tn.Tensor(v, requires_grad=k in trainable) for k, v in self.arrays.items()}


def init_params(config, seed, dtype=np.float64):
    """Fan-in scaled normal weights, zero biases, unit LayerNorm gain, gamma = 1."""
    rng = np.random.default_rng([int(seed), 1])
    arrays = {}
    for name, shape, fan_in in _layer_specs(config):
        if fan_in is not None:
            arr = rng.standard_normal(shape) / math.sqrt(fan_in)
        elif name.endswith("ln.gain"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        arrays[name] = np.asarray(arr, dtype=dtype)
    return ModelParams(config, arrays)


def _bias(x, b, spatial_rank):
    return x + tn.reshape(b, (b.shape[0],) + (1,) * spatial_rank)


def encode_images(w, images, config):
    """``images``: Tensor ``(N, C_in, S, S)`` -> ``(N, C, K, H, W)``."""
    images = tn.as_tensor(images)
    expected = (config.image_channels, config.image_size, config.image_size)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ShapeMismatch(f"images must be (N, {expected}), got {images.shape}")
    x = images
    for i in range(BACKBONE_DEPTH):
        x = tn.conv(x, w[f"visual.backbone.{i}.weight"], 2, "same", BACKBONE_STRIDE)
        x = tn.relu(_bias(x, w[f"visual.backbone.{i}.bias"], 2))
    x = tn.layer_norm_channel(x, w["visual.aligner.ln.gain"], w["visual.aligner.ln.bias"], axis=1)
    x = tn.conv(x, w["visual.aligner.proj.weight"], 2, "same")
    x = _bias(x, w["visual.aligner.proj.bias"], 2)
    n, _, h, wd = x.shape
    return tn.reshape(x, (n, config.channels, config.heads, h, wd))


def encode_audio(w, clips, config):
    """``clips``: Tensor ``(N, C_in, L)`` -> ``(N, C, K, 1, T)``."""
    clips = tn.as_tensor(clips)
    expected = (config.audio_channels, config.clip_len)
    if clips.ndim != 3 or clips.shape[1:] != expected:
        raise ShapeMismatch(f"clips must be (N, {expected}), got {clips.shape}")
    x = clips
    for i in range(BACKBONE_DEPTH):
        x = tn.conv(x, w[f"audio.backbone.{i}.weight"], 1, "same", BACKBONE_STRIDE)
        x = tn.relu(_bias(x, w[f"audio.backbone.{i}.bias"], 1))
    x = tn.layer_norm_channel(x, w["audio.aligner.ln.gain"], w["audio.aligner.ln.bias"], axis=1)
    x = tn.conv(x, w["audio.aligner.conv1.weight"], 1, "same")
    x = tn.relu(_bias(x, w["audio.aligner.conv1.bias"], 1))
    x = tn.conv(x, w["audio.aligner.conv2.weight"], 1, "same")
    x = _bias(x, w["audio.aligner.conv2.bias"], 1)
    n, _, t = x.shape
    return tn.reshape(x, (n, config.channels, config.heads, 1, t))


def split_heads(x, heads):
    """``(C*K, *rest)`` -> ``(C, K, *rest)``; a pure reshape."""
    return np.reshape(x, (x.shape[0] // heads, heads) + x.shape[1:])


def merge_heads(x):
    """Inverse of :func:`split_heads`."""
    return np.reshape(x, (x.shape[0] * x.shape[1],) + x.shape[2:])


def frames_for(valid_len, config):
    return -(-int(valid_len) // config.reduction)


@dataclass
class VisualFeatures:
    tensor: tn.Tensor
    image_id: object = None


@dataclass
class AudioFeatures:
    tensor: tn.Tensor
    clip_id: object = None
    t_valid: int = 0


def _weights(params):
    return params.as_tensors() if isinstance(params, ModelParams) else params


def visual_forward(params, image, image_id=None):
    """Featurize one image ``(C_in, S, S)`` into ``(C, K, H, W)``."""
    cfg = params.config
    image = tn.as_tensor(image)
    if image.ndim != 3:
        raise ShapeMismatch(f"expected a single image (C_in, S, S), got {image.shape}")
    out = encode_images(_weights(params), tn.reshape(image, (1,) + image.shape), cfg)
    return VisualFeatures(tn.reshape(out, out.shape[1:]), image_id)


def audio_forward(params, clip, valid_len=None, clip_id=None):
    """Featurize one clip ``(C_in, L)`` into ``(C, K, 1, T)``."""
    cfg = params.config
    clip = tn.as_tensor(clip)
    if clip.ndim != 2:
        raise ShapeMismatch(f"expected a single clip (C_in, L), got {clip.shape}")
    out = encode_audio(_weights(params), tn.reshape(clip, (1,) + clip.shape), cfg)
    valid = cfg.clip_len if valid_len is None else valid_len
    return AudioFeatures(tn.reshape(out, out.shape[1:]), clip_id, frames_for(valid, cfg))


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, params, extras=None, meta=None):
    """Write a ``DGCK`` file: header JSON, then parameters, then extras.

    Tensor order is the order of ``header["params"]`` followed by
    ``header["extras"]``; parameter order is fixed by the model layout.
    """
    extras = extras or {}
    header = {
        "config": params.config.to_dict(),
        "params": params.names(),
        "extras": list(extras),
        "meta": meta or {},
    }
    with open(path, "wb") as fh:
        write_header(fh, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, header)
        for name in params.names():
            write_tensor(fh, params.arrays[name])
        for name in extras:
            write_tensor(fh, extras[name])


def load_checkpoint(path):
    """Return ``(params, extras, meta)``."""
    with open(path, "rb") as fh:
        _, header = read_header(fh, CHECKPOINT_MAGIC)
        config = ModelConfig.from_dict(header["config"])
        arrays = {name: read_tensor(fh) for name in header["params"]}
        extras = {name: read_tensor(fh) for name in header["extras"]}
    return ModelParams(config, arrays), extras, header.get("meta", {})
