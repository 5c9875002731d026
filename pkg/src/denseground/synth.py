"""Synthetic paired image/audio corpus with planted couplings.

Each sample is an image holding 1..n textured objects on a coarse grid and
a multichannel "audio" clip holding one event per object. Two regimes share
the visual vocabulary but use disjoint audio vocabularies:

* ``language``: short word-like events, one per object, in sequence. Word
  signatures live in the lower half of the audio channels.
* ``sound``: long, possibly overlapping events living in the upper half.

Two knobs give each regime a family resemblance, as real speech and real
environmental audio each have one. ``regime_share`` mixes a common
per-regime direction into every class signature of that regime, and
``domain_shift`` adds a per-regime colour offset to the objects of its
images (the two source corpora come from different photo collections).
Neither carries class information.

Everything is a deterministic function of ``(config, seed)``; every sample
draws from its own stream keyed by ``(seed, split, index)``.
"""

import dataclasses
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptFile, InvalidConfig, InvariantViolation, OutOfBounds, PlacementFailure
from .formats import canonical_json, read_header, read_tensor, write_header, write_tensor

SAMPLE_MAGIC = b"DGSP"
SAMPLE_VERSION = 1
MANIFEST_VERSION = 1
REGIMES = ("language", "sound")
SPLITS = ("train", "eval")

# rng stream ids
_VOCAB, _REGIME, _SAMPLE, _PROMPT = 11, 12, 13, 14


@dataclass(frozen=True)
class GeneratorConfig:
    n_train: int = 2000
    n_eval: int = 400
    image_size: int = 64
    image_channels: int = 3
    grid: int = 4
    audio_channels: int = 16
    clip_len: int = 256
    vocab_lang: int = 12
    vocab_sound: int = 12
    min_objects: int = 1
    max_objects: int = 3
    lang_ratio: float = 0.5
    image_noise: float = 0.05
    audio_noise: float = 0.05
    min_valid_frac: float = 0.6
    word_len: tuple = (24, 40)
    sound_len: tuple = (64, 128)
    placement_retries: int = 100
    regime_share: float = 0.5
    domain_shift: float = 1.5
    ambient: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "word_len", tuple(self.word_len))
        object.__setattr__(self, "sound_len", tuple(self.sound_len))
        if self.n_train < 0 or self.n_eval < 0:
            raise InvalidConfig("sample counts must be non-negative")
        positive = [self.image_size, self.image_channels, self.grid, self.audio_channels,
                    self.clip_len, self.vocab_lang, self.vocab_sound, self.min_objects]
        if any(v <= 0 for v in positive):
            raise InvalidConfig("sizes, vocabularies and min_objects must be positive")
        if self.image_size % self.grid:
            raise InvalidConfig("image_size must be a multiple of grid")
        if self.audio_channels % 2:
            raise InvalidConfig("audio_channels must be even (two regime bands)")
        if self.max_objects < self.min_objects:
            raise InvalidConfig("max_objects < min_objects")
        if self.max_objects > min(self.vocab_lang, self.vocab_sound):
            raise InvalidConfig("max_objects exceeds a regime vocabulary")
        if not 0.0 <= self.lang_ratio <= 1.0:
            raise InvalidConfig("lang_ratio must lie in [0, 1]")
        if not 0.0 < self.min_valid_frac <= 1.0:
            raise InvalidConfig("min_valid_frac must lie in (0, 1]")
        min_valid = int(np.ceil(self.min_valid_frac * self.clip_len))
        if self.max_objects * self.word_len[1] > min_valid or self.sound_len[1] > min_valid:
            raise InvalidConfig("events do not fit inside the shortest clip")
        if min(self.word_len + self.sound_len) <= 0:
            raise InvalidConfig("event lengths must be positive")

    @property
    def cell(self):
        return self.image_size // self.grid

    @property
    def n_visual(self):
        return max(self.vocab_lang, self.vocab_sound)

    def vocab_size(self, regime):
        return self.vocab_lang if regime == "language" else self.vocab_sound

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["word_len"] = list(self.word_len)
        d["sound_len"] = list(self.sound_len)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InvalidConfig(f"unknown generator config key {unknown[0]!r}")
        return cls(**d)


# ------------------------------------------------------------------ vocabulary


@dataclass
class Vocabulary:
    colors: np.ndarray          # (V, image_channels)
    stripes: np.ndarray         # (V, 3): fy, fx, phase
    profiles: dict              # regime -> (V_r, audio_channels)
    periods: dict               # regime -> (V_r,)
    tints: dict = field(default_factory=dict)  # regime -> (image_channels,) colour offset on objects

    def texture(self, class_id, cell):
        fy, fx, phase = self.stripes[class_id]
        yy, xx = np.mgrid[0:cell, 0:cell]
        wave = np.sin(2 * np.pi * (fy * yy + fx * xx) / cell + phase)
        return self.colors[class_id][:, None, None] + 0.5 * wave[None]

    def event(self, regime, class_id, length):
        t = np.arange(length)
        carrier = 0.6 + 0.4 * np.sin(2 * np.pi * t / self.periods[regime][class_id])
        return self.profiles[regime][class_id][:, None] * carrier[None, :]

    def to_dict(self):
        return {
            "colors": self.colors.tolist(),
            "stripes": self.stripes.tolist(),
            "profiles": {r: p.tolist() for r, p in self.profiles.items()},
            "periods": {r: p.tolist() for r, p in self.periods.items()},
            "tints": {r: b.tolist() for r, b in self.tints.items()},
        }


def build_vocabulary(config, seed):
    rng = np.random.default_rng([int(seed), _VOCAB])
    v = config.n_visual
    colors = rng.uniform(-1, 1, size=(v, config.image_channels))
    stripes = np.column_stack([
        2 * rng.integers(0, 3, size=v), 2 * rng.integers(1, 3, size=v), rng.uniform(0, 2 * np.pi, size=v)
    ]).astype(float)
    half = config.audio_channels // 2
    profiles, periods = {}, {}
    for r, regime in enumerate(REGIMES):
        n = config.vocab_size(regime)
        p = np.zeros((n, config.audio_channels))
        band = rng.standard_normal((n, half))
        band /= np.linalg.norm(band, axis=1, keepdims=True)
        common = rng.standard_normal(half)
        common /= np.linalg.norm(common)
        band = config.regime_share * common + (1 - config.regime_share) * band
        p[:, r * half:(r + 1) * half] = band / np.linalg.norm(band, axis=1, keepdims=True)
        profiles[regime] = p
        lo, hi = (3.0, 8.0) if regime == "language" else (8.0, 24.0)
        periods[regime] = rng.uniform(lo, hi, size=n)
    tints = {}
    for regime in REGIMES:
        tint = rng.standard_normal(config.image_channels)
        tints[regime] = config.domain_shift * tint / np.linalg.norm(tint)
    return Vocabulary(colors, stripes, profiles, periods, tints)


# --------------------------------------------------------------------- samples


@dataclass
class ObjectInfo:
    class_id: int
    mask: np.ndarray            # (S, S) bool
    event: tuple                # [t_start, t_end) in raw samples
    cell: tuple = (0, 0)


@dataclass
class SamplePair:
    image: np.ndarray           # (C_in, S, S)
    clip: np.ndarray            # (A, L)
    regime: str
    objects: list
    splice_mask: np.ndarray     # (L,) in [0, 1]
    valid_len: int
    sample_id: str = ""

    @property
    def class_ids(self):
        return [o.class_id for o in self.objects]


def pad_or_trim(clip, target):
    """Trim the tail or pad with silence to ``target`` samples.

    Returns ``(clip', valid_len, silence_mask)`` with the mask equal to 1 on
    padding.
    """
    clip = np.asarray(clip)
    n = clip.shape[-1]
    valid = min(n, target)
    out = np.zeros(clip.shape[:-1] + (target,), dtype=clip.dtype)
    out[..., :valid] = clip[..., :valid]
    silence = np.zeros(target)
    silence[valid:] = 1.0
    return out, valid, silence


def splice_negative(clip, donor, position, ramp_len):
    """Crossfade the donor segment into ``clip`` starting at ``position``.

    The donor's first and last ``ramp_len`` samples are linear ramps (mask
    strictly between 0 and 1); the rest replaces the clip outright.
    Returns ``(clip', splice_mask)``.
    """
    clip = np.asarray(clip, dtype=float)
    donor = np.asarray(donor, dtype=float)
    total = donor.shape[-1]
    length = clip.shape[-1]
    mask = np.zeros(length)
    if total == 0:
        return clip.copy(), mask
    if ramp_len < 0 or 2 * ramp_len > total:
        raise OutOfBounds(f"ramps of {ramp_len} do not fit a {total}-sample segment")
    if position < 0 or position + total > length:
        raise OutOfBounds(f"segment [{position}, {position + total}) outside clip of {length}")
    weights = np.ones(total)
    if ramp_len:
        ramp = np.arange(1, ramp_len + 1) / (ramp_len + 1)
        weights[:ramp_len] = ramp
        weights[total - ramp_len:] = ramp[::-1]
    mask[position:position + total] = weights
    out = clip.copy()
    seg = slice(position, position + total)
    out[..., seg] = (1 - weights) * clip[..., seg] + weights * donor
    return out, mask


def _place_objects(config, n, rng):
    cells = []
    for _ in range(n):
        for _attempt in range(config.placement_retries):
            cell = (int(rng.integers(config.grid)), int(rng.integers(config.grid)))
            if cell not in cells:
                cells.append(cell)
                break
        else:
            raise PlacementFailure(f"could not place {n} objects on a {config.grid}x{config.grid} grid")
    return cells


def _word_windows(config, n, valid_len, rng):
    lengths = rng.integers(config.word_len[0], config.word_len[1] + 1, size=n)
    free = valid_len - int(lengths.sum())
    cuts = np.sort(rng.integers(0, free + 1, size=n))
    gaps = np.diff(np.concatenate([[0], cuts]))
    windows, pos = [], 0
    for gap, length in zip(gaps, lengths):
        pos += int(gap)
        windows.append((pos, pos + int(length)))
        pos += int(length)
    return windows


def _sound_windows(config, n, valid_len, rng):
    windows = []
    for _ in range(n):
        length = int(rng.integers(config.sound_len[0], config.sound_len[1] + 1))
        start = int(rng.integers(0, valid_len - length + 1))
        windows.append((start, start + length))
    return windows


def regime_band(config, regime):
    half = config.audio_channels // 2
    r = REGIMES.index(regime)
    return slice(r * half, (r + 1) * half)


def ambient_noise(config, regime, length, rng):
    """Class-independent background living in the regime's channel band."""
    out = np.zeros((config.audio_channels, length))
    band = regime_band(config, regime)
    out[band] = config.ambient * rng.standard_normal((band.stop - band.start, length))
    return out


def render_sample(config, vocab, regime, rng, sample_id=""):
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    classes = rng.choice(config.vocab_size(regime), size=n, replace=False)
    cells = _place_objects(config, n, rng)
    s, cell = config.image_size, config.cell
    image = config.image_noise * rng.standard_normal((config.image_channels, s, s))

    min_valid = int(np.ceil(config.min_valid_frac * config.clip_len))
    valid_len = int(rng.integers(min_valid, config.clip_len + 1))
    raw = config.audio_noise * rng.standard_normal((config.audio_channels, valid_len))
    raw += ambient_noise(config, regime, valid_len, rng)
    if regime == "language":
        order = rng.permutation(n)
        windows = [None] * n
        for slot, (start, end) in zip(order, _word_windows(config, n, valid_len, rng)):
            windows[slot] = (start, end)
    else:
        windows = _sound_windows(config, n, valid_len, rng)

    objects = []
    for class_id, (gy, gx), (start, end) in zip(classes, cells, windows):
        ys, xs = slice(gy * cell, (gy + 1) * cell), slice(gx * cell, (gx + 1) * cell)
        image[:, ys, xs] = vocab.texture(int(class_id), cell) + vocab.tints[regime][:, None, None]
        mask = np.zeros((s, s), dtype=bool)
        mask[ys, xs] = True
        raw[:, start:end] += vocab.event(regime, int(class_id), end - start)
        objects.append(ObjectInfo(int(class_id), mask, (int(start), int(end)), (gy, gx)))

    clip, valid_len, silence = pad_or_trim(raw, config.clip_len)
    return SamplePair(
        image.astype(np.float32), clip.astype(np.float32), regime, objects,
        silence, valid_len, sample_id,
    )


def render_prompt(config, vocab, regime, class_id, seed):
    """An isolated prompt clip for one class.

    Language prompts hold a single word in the middle of the clip and the
    returned window covers it; sound prompts fill the clip and the window is
    the whole clip. Windows are in raw samples.
    """
    rng = np.random.default_rng([int(seed), _PROMPT, REGIMES.index(regime), int(class_id)])
    length = config.clip_len
    clip = config.audio_noise * rng.standard_normal((config.audio_channels, length))
    if regime == "language":
        word = (config.word_len[0] + config.word_len[1]) // 2
        start = (length - word) // 2
        window = (start, start + word)
    else:
        window = (0, length)
    clip[:, window[0]:window[1]] += vocab.event(regime, int(class_id), window[1] - window[0])
    return clip.astype(np.float32), window


def _regime_plan(config, seed, split):
    n = config.n_train if split == "train" else config.n_eval
    n_lang = int(round(n * config.lang_ratio))
    plan = np.array(["language"] * n_lang + ["sound"] * (n - n_lang))
    rng = np.random.default_rng([int(seed), _REGIME, SPLITS.index(split)])
    return plan[rng.permutation(n)] if n else plan


def generate_sample(config, seed, split, index, regime, vocab=None):
    vocab = vocab or build_vocabulary(config, seed)
    rng = np.random.default_rng([int(seed), _SAMPLE, SPLITS.index(split), int(index)])
    return render_sample(config, vocab, regime, rng, f"{split}_{index:05d}")


# ----------------------------------------------------------------- file format


def save_sample(path, sample):
    header = {
        "id": sample.sample_id,
        "regime": sample.regime,
        "classes": sample.class_ids,
        "events": [list(o.event) for o in sample.objects],
        "cells": [list(o.cell) for o in sample.objects],
        "valid_len": int(sample.valid_len),
        "image_shape": list(sample.image.shape),
        "clip_shape": list(sample.clip.shape),
    }
    masks = np.stack([o.mask for o in sample.objects]).astype(np.float32)
    with open(path, "wb") as fh:
        write_header(fh, SAMPLE_MAGIC, SAMPLE_VERSION, header)
        write_tensor(fh, sample.image)
        write_tensor(fh, sample.clip)
        write_tensor(fh, np.asarray(sample.splice_mask, dtype=np.float32))
        write_tensor(fh, masks)


def validate_sample(sample):
    length = sample.clip.shape[-1]
    if sample.regime not in REGIMES:
        raise InvariantViolation(f"unknown regime {sample.regime!r}")
    if not 0 < sample.valid_len <= length:
        raise InvariantViolation(f"valid_len {sample.valid_len} outside (0, {length}]")
    for o in sample.objects:
        if not o.mask.any():
            raise InvariantViolation(f"object {o.class_id} has an empty mask")
        start, end = o.event
        if not 0 <= start < end <= sample.valid_len:
            raise InvariantViolation(f"event {o.event} outside [0, {sample.valid_len})")
    m = np.asarray(sample.splice_mask)
    if m.shape != (length,) or m.min() < 0 or m.max() > 1:
        raise InvariantViolation("splice mask must be a length-L array in [0, 1]")
    if np.any(m[sample.valid_len:] != 1):
        raise InvariantViolation("splice mask must be 1 over padded silence")
    return sample


def load_sample(path):
    """Parse and validate one ``DGSP`` sample file."""
    try:
        with open(path, "rb") as fh:
            _, header = read_header(fh, SAMPLE_MAGIC)
            image = read_tensor(fh)
            clip = read_tensor(fh)
            splice_mask = read_tensor(fh).astype(np.float64)
            masks = read_tensor(fh) > 0.5
    except (KeyError, ValueError, TypeError) as exc:
        raise CorruptFile(f"{path}: {exc}") from None
    if list(image.shape) != header["image_shape"] or list(clip.shape) != header["clip_shape"]:
        raise CorruptFile(f"{path}: tensor shapes disagree with header")
    if len(masks) != len(header["classes"]):
        raise CorruptFile(f"{path}: {len(masks)} masks for {len(header['classes'])} objects")
    objects = [
        ObjectInfo(int(c), m, tuple(e), tuple(cell))
        for c, m, e, cell in zip(header["classes"], masks, header["events"], header["cells"])
    ]
    sample = SamplePair(image, clip, header["regime"], objects, splice_mask,
                        int(header["valid_len"]), header["id"])
    return validate_sample(sample)


# ---------------------------------------------------------------------- corpus


@dataclass
class CorpusManifest:
    config: GeneratorConfig
    seed: int
    samples: list = field(default_factory=list)
    vocabulary: dict = field(default_factory=dict)
    version: int = MANIFEST_VERSION

    def to_dict(self):
        return {
            "version": self.version,
            "seed": int(self.seed),
            "config": self.config.to_dict(),
            "samples": self.samples,
            "vocabulary": self.vocabulary,
        }

    def split(self, name):
        return [s for s in self.samples if s["split"] == name]

    @classmethod
    def from_dict(cls, d):
        return cls(GeneratorConfig.from_dict(d["config"]), int(d["seed"]),
                   d["samples"], d["vocabulary"], int(d["version"]))


def _record(sample, split, path):
    return {
        "id": sample.sample_id,
        "path": path,
        "split": split,
        "regime": sample.regime,
        "classes": sample.class_ids,
        "events": [list(o.event) for o in sample.objects],
    }


def _generate_and_write(args):
    config, seed, split, index, regime, out_dir = args
    sample = generate_sample(config, seed, split, index, regime)
    rel = os.path.join("samples", f"{sample.sample_id}.dgsp")
    if out_dir is not None:
        save_sample(os.path.join(out_dir, rel), sample)
    return _record(sample, split, rel)


def generate_corpus(config, seed, out_dir=None, workers=1):
    """Generate every sample; write files and ``manifest.json`` when ``out_dir`` is given."""
    vocab = build_vocabulary(config, seed)
    jobs = []
    for split in SPLITS:
        for index, regime in enumerate(_regime_plan(config, seed, split)):
            jobs.append((config, seed, split, index, str(regime), out_dir))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        if jobs:
            os.makedirs(os.path.join(out_dir, "samples"), exist_ok=True)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            records = list(pool.map(_generate_and_write, jobs, chunksize=32))
    else:
        records = [_generate_and_write(job) for job in jobs]
    manifest = CorpusManifest(config, seed, records, vocab.to_dict())
    if out_dir is not None:
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            fh.write(canonical_json(manifest.to_dict()))
    return manifest


def load_manifest(corpus_dir):
    path = os.path.join(corpus_dir, "manifest.json")
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CorruptFile(f"{path}: {exc}") from None
    return CorpusManifest.from_dict(data)


class Corpus:
    """One split held in memory as stacked arrays."""

    def __init__(self, samples, config, seed):
        self.samples = list(samples)
        self.config = config
        self.seed = seed
        self.vocab = build_vocabulary(config, seed)
        if self.samples:
            self.images = np.stack([s.image for s in self.samples]).astype(np.float32)
            self.clips = np.stack([s.clip for s in self.samples]).astype(np.float32)
            self.splice_masks = np.stack([s.splice_mask for s in self.samples])
        self.regimes = np.array([s.regime for s in self.samples])
        self.valid_lens = np.array([s.valid_len for s in self.samples])
        self.ids = [s.sample_id for s in self.samples]

    def __len__(self):
        return len(self.samples)

    def indices(self, regime):
        return np.flatnonzero(self.regimes == regime)

    @classmethod
    def load(cls, corpus_dir, split):
        manifest = load_manifest(corpus_dir)
        samples = [load_sample(os.path.join(corpus_dir, r["path"])) for r in manifest.split(split)]
        return cls(samples, manifest.config, manifest.seed)

    @classmethod
    def generate(cls, config, seed, split):
        """Build a split in memory without touching disk."""
        vocab = build_vocabulary(config, seed)
        plan = _regime_plan(config, seed, split)
        samples = [generate_sample(config, seed, split, i, str(r), vocab) for i, r in enumerate(plan)]
        return cls(samples, config, seed)
