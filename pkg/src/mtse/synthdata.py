"""Synthetic multi-temporal crop scenes and the binary dataset container.

Every scene is a tile of rectangular field parcels. Each parcel carries one
crop class whose per-band reflectance follows a double-logistic seasonal
curve. Observations are taken on irregular days, perturbed by Gaussian pixel
noise and occluded by bright clouds. Day-of-year and year are appended as two
constant channels scaled to ``[0, 1]``.

Class phenology is drawn from ``profile_seed`` and shared by every scene with
that seed, so scenes generated with different ``seed`` values pose the same
learning problem.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .encoder import IGNORE, SequenceSample

BAND_NAMES = ("B1", "B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A", "B9", "B10", "B11", "B12")
RGB_BANDS = (3, 2, 1)  # B4, B3, B2

CLOUD_LEVEL = 0.9
CLOUD_SIGMA = 0.05
CLOUD_RANGE = (0.7, 1.0)

SPLITS = ("train", "val", "test")
MAGIC = b"MTSE"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIII")


class DatasetFormatError(ValueError):
    """Malformed, truncated or inconsistent dataset file."""


@dataclass(frozen=True)
class SceneSpec:
    tile: int = 24
    n_bands: int = 13
    n_classes: int = 8
    T: int = 30
    seasons: int = 1
    cloud_prob: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0
    min_field: int = 4
    profile_seed: int = 0
    zipf_exponent: float = 1.0

    def __post_init__(self):
        if self.tile not in (24, 48):
            raise ValueError(f"tile must be 24 or 48 pixels, got {self.tile}")
        if self.n_bands < 1:
            raise ValueError("n_bands must be positive")
        if not 1 <= self.n_classes <= 17:
            raise ValueError(f"n_classes must be in 1..17, got {self.n_classes}")
        if self.T < 1:
            raise ValueError("T must be positive")
        if self.T > 365:
            raise ValueError("at most one observation per day")
        if self.seasons not in (1, 2):
            raise ValueError("seasons must be 1 or 2")
        if not 0.0 <= self.cloud_prob < 1.0:
            raise ValueError("cloud_prob must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.min_field < 1:
            raise ValueError("min_field must be positive")
        if self.tile < self.min_field:
            raise ValueError(f"tile {self.tile} is smaller than min_field {self.min_field}")

    @property
    def depth(self) -> int:
        return self.n_bands + 2

    @property
    def n_obs(self) -> int:
        return self.T * self.seasons


@dataclass(frozen=True)
class PhenologyProfile:
    """Per-band double-logistic curve parameters (arrays of length ``n_bands``)."""

    rho_min: np.ndarray
    rho_max: np.ndarray
    t_green: np.ndarray
    t_senesce: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if np.any(self.rho_min >= self.rho_max):
            raise ValueError("rho_min must be below rho_max")
        if np.any(self.t_green >= self.t_senesce):
            raise ValueError("green-up must precede senescence")


def _logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def reflectance(profile: PhenologyProfile, day_of_year) -> np.ndarray:
    """``rho_min + (rho_max - rho_min) * (s(a(t - t_g)) - s(b(t - t_s)))``.

    Scalar ``day_of_year`` gives ``[n_bands]``; an array of days gives ``[n_days, n_bands]``.
    """
    t = np.asarray(day_of_year, dtype=np.float64)[..., None]
    rise = _logistic(profile.a * (t - profile.t_green))
    fall = _logistic(profile.b * (t - profile.t_senesce))
    return profile.rho_min + (profile.rho_max - profile.rho_min) * (rise - fall)


def _draw_profile(rng: np.random.Generator, n_bands: int) -> PhenologyProfile:
    t_g = rng.uniform(70, 170)
    t_s = min(t_g + rng.uniform(50, 150), 330.0)
    a, b = rng.uniform(0.05, 0.15, size=2)
    rho_min = rng.uniform(0.02, 0.3, size=n_bands)
    rho_max = np.minimum(rho_min + rng.uniform(0.05, 0.5, size=n_bands), 0.85)
    ones = np.ones(n_bands)
    return PhenologyProfile(rho_min, rho_max, t_g * ones, t_s * ones, a * ones, b * ones)


def _min_separation(p: PhenologyProfile, q: PhenologyProfile, days: np.ndarray) -> float:
    return float(np.abs(reflectance(p, days) - reflectance(q, days)).max(axis=1).min())


@lru_cache(maxsize=32)
def class_profiles(n_classes: int, n_bands: int, profile_seed: int = 0) -> tuple[PhenologyProfile, ...]:
    """Phenology per class, redrawn until every pair differs by >= 0.1 on every day."""
    rng = np.random.default_rng([profile_seed, 0x5EED])
    days = np.arange(1, 366, 4)
    profiles: list[PhenologyProfile] = []
    while len(profiles) < n_classes:
        for _ in range(10_000):
            cand = _draw_profile(rng, n_bands)
            if all(_min_separation(cand, p, days) >= 0.1 for p in profiles):
                break
        else:
            raise RuntimeError("could not draw separable class profiles")
        profiles.append(cand)
    return tuple(profiles)


def class_distribution(n_classes: int, exponent: float = 1.0) -> np.ndarray:
    """Zipf-like class frequencies ``p_c ~ 1 / (c + 1)^exponent``."""
    w = 1.0 / np.arange(1, n_classes + 1) ** exponent
    return w / w.sum()


def partition_fields(spec: SceneSpec, rng: np.random.Generator, class_probs=None) -> np.ndarray:
    """Recursive axis-aligned splitting of the tile into labeled parcels.

    A rectangle is split along its longer side while that side is at least
    ``2 * min_field``; each final parcel draws its class from ``class_probs``
    (default Zipf-like).
    """
    size, m = spec.tile, spec.min_field
    if size < m:
        raise ValueError(f"tile {size} is smaller than min_field {m}")
    probs = class_distribution(spec.n_classes, spec.zipf_exponent) if class_probs is None else np.asarray(class_probs)
    labels = np.empty((size, size), np.int64)
    stack = [(0, size, 0, size)]
    parcels = []
    while stack:
        y0, y1, x0, x1 = stack.pop()
        hgt, wid = y1 - y0, x1 - x0
        vertical = hgt >= wid
        side = hgt if vertical else wid
        if side < 2 * m or (hgt * wid <= 4 * m * m and rng.random() < 0.5):
            parcels.append((y0, y1, x0, x1))
            continue
        cut = int(rng.integers(m, side - m + 1))
        if vertical:
            stack += [(y0, y0 + cut, x0, x1), (y0 + cut, y1, x0, x1)]
        else:
            stack += [(y0, y1, x0, x0 + cut), (y0, y1, x0 + cut, x1)]
    for (y0, y1, x0, x1) in parcels:
        labels[y0:y1, x0:x1] = rng.choice(len(probs), p=probs)
    return labels


@dataclass(frozen=True)
class CloudEvent:
    y0: int
    y1: int
    x0: int
    x1: int


def cloud_events(size: int, cloud_prob: float, rng: np.random.Generator) -> list[CloudEvent]:
    """Occlusions for one frame: whole-frame with probability ``cloud_prob / 2``,
    otherwise a random rectangle with probability ``cloud_prob / 2``."""
    u = rng.random()
    if u < cloud_prob / 2:
        return [CloudEvent(0, size, 0, size)]
    if u < cloud_prob:
        hgt, wid = rng.integers(size // 4, size + 1, size=2)
        y0 = int(rng.integers(0, size - hgt + 1))
        x0 = int(rng.integers(0, size - wid + 1))
        return [CloudEvent(y0, y0 + int(hgt), x0, x0 + int(wid))]
    return []


def apply_clouds(frame: np.ndarray, events: list[CloudEvent], rng: np.random.Generator):
    """Return ``(occluded_frame, cloud_mask)``; cloudy pixels become bright in every band.

    ``frame`` is ``[h, w, n_bands]`` (reflectance channels only). The mask is
    for diagnostics and is never part of the model input.
    """
    out = frame.copy()
    mask = np.zeros(frame.shape[:2], bool)
    for e in events:
        mask[e.y0:e.y1, e.x0:e.x1] = True
    n = int(mask.sum())
    if n:
        values = rng.normal(CLOUD_LEVEL, CLOUD_SIGMA, size=(n, frame.shape[2]))
        out[mask] = np.clip(values, *CLOUD_RANGE)
    return out, mask


@dataclass
class Scene:
    sample: SequenceSample
    days: np.ndarray
    years: np.ndarray
    cloud_mask: np.ndarray
    spec: SceneSpec


def observation_days(spec: SceneSpec, rng: np.random.Generator):
    days, years = [], []
    for season in range(spec.seasons):
        d = np.sort(rng.choice(np.arange(1, 366), size=spec.T, replace=False))
        days.append(d)
        years.append(np.full(spec.T, season))
    return np.concatenate(days), np.concatenate(years)


def generate_scene(spec: SceneSpec, detail: bool = False):
    """Build one labeled observation sequence ``x[T*seasons, tile, tile, n_bands + 2]``.

    Returns a :class:`SequenceSample`, or a :class:`Scene` with observation
    days and cloud masks when ``detail`` is set.
    """
    rng = np.random.default_rng([spec.seed, 0xC0FFEE])
    labels = partition_fields(spec, rng)
    profiles = class_profiles(spec.n_classes, spec.n_bands, spec.profile_seed)
    days, years = observation_days(spec, rng)
    n, size = spec.n_obs, spec.tile

    bands = np.empty((n, size, size, spec.n_bands))
    # per-scene, per-class jitter: a class drifts between scenes but stays uniform within one
    for c in range(spec.n_classes):
        shift = rng.uniform(-4, 4)
        scale = rng.uniform(0.97, 1.03)
        where = labels == c
        if not where.any():
            continue
        p = profiles[c]
        jittered = replace(p, t_green=p.t_green + shift, t_senesce=p.t_senesce + shift,
                           rho_max=p.rho_min + scale * (p.rho_max - p.rho_min))
        bands[:, where, :] = reflectance(jittered, days)[:, None, :]
    if spec.noise_sigma > 0:
        bands += rng.normal(0.0, spec.noise_sigma, size=bands.shape)

    cloud_mask = np.zeros((n, size, size), bool)
    if spec.cloud_prob > 0:
        for t in range(n):
            events = cloud_events(size, spec.cloud_prob, rng)
            if events:
                bands[t], cloud_mask[t] = apply_clouds(bands[t], events, rng)

    x = np.empty((n, size, size, spec.depth))
    x[..., :spec.n_bands] = bands
    x[..., spec.n_bands] = (days / 365.0)[:, None, None]
    x[..., spec.n_bands + 1] = (years / max(spec.seasons - 1, 1))[:, None, None]
    sample = SequenceSample(x, np.ones(n, bool), labels)
    if detail:
        return Scene(sample, days, years, cloud_mask, spec)
    return sample


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed from integers: first 8 bytes of SHA-256 over ``"a:b:c"``."""
    digest = hashlib.sha256(":".join(str(int(p)) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def generate_dataset(spec: SceneSpec, n_samples: int, ratio=(4, 1, 1)):
    """``n_samples`` scenes with per-sample seeds ``derive_seed(spec.seed, i)`` and split tags."""
    samples = [generate_scene(replace(spec, seed=derive_seed(spec.seed, i))) for i in range(n_samples)]
    return samples, assign_splits(n_samples, ratio, spec.seed)


def assign_splits(n: int, ratio=(4, 1, 1), seed: int = 0) -> np.ndarray:
    """Shuffled split tags (0 train, 1 val, 2 test) in proportion ``ratio``; remainder goes to train."""
    total = sum(ratio)
    n_val = n * ratio[1] // total
    n_test = n * ratio[2] // total
    tags = np.zeros(n, np.uint8)
    tags[n - n_val - n_test:n - n_test] = 1
    tags[n - n_test:] = 2
    rng = np.random.default_rng([seed, 0x5B17])
    return tags[rng.permutation(n)]


# -- container ---------------------------------------------------------------------

@dataclass
class Dataset:
    samples: list[SequenceSample]
    splits: np.ndarray
    n_classes: int
    metadata: dict = field(default_factory=dict)

    def split(self, name: str) -> list[SequenceSample]:
        tag = SPLITS.index(name)
        return [s for s, t in zip(self.samples, self.splits) if t == tag]

    def indices(self, name: str) -> np.ndarray:
        return np.flatnonzero(self.splits == SPLITS.index(name))

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.samples[0].x.shape


def write_dataset(samples, path, splits=None, n_classes: int | None = None, metadata: dict | None = None):
    """Write samples to the little-endian ``MTSE`` v1 container."""
    if not samples:
        raise ValueError("cannot write an empty dataset")
    dims = samples[0].x.shape
    for i, s in enumerate(samples):
        if s.x.shape != dims:
            raise DatasetFormatError(f"sample {i} has dims {s.x.shape}, expected {dims}")
    n = len(samples)
    splits = np.zeros(n, np.uint8) if splits is None else np.asarray(splits, np.uint8)
    if splits.shape != (n,):
        raise ValueError("one split tag per sample required")
    if n_classes is None:
        n_classes = int(max(s.y.max() for s in samples)) + 1
    T, h, w, d = dims
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, VERSION, T, h, w, d, n_classes, n))
    for s, tag in zip(samples, splits):
        if s.y.max() >= n_classes or s.y.min() < IGNORE:
            raise DatasetFormatError("label out of range for n_classes")
        buf.write(struct.pack("<B", int(tag)))
        buf.write(np.asarray(s.mask, np.uint8).tobytes())
        buf.write(np.ascontiguousarray(s.x, dtype="<f4").tobytes())
        buf.write(np.ascontiguousarray(s.y, dtype="<i2").tobytes())
    buf.write(json.dumps(metadata or {}, sort_keys=True).encode("utf-8"))
    Path(path).write_bytes(buf.getvalue())


def read_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError("file shorter than header")
    magic, version, T, h, w, d, n_classes, n = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}")
    if min(T, h, w, d) == 0:
        raise DatasetFormatError("zero extent in header")
    per = 1 + T + 4 * T * h * w * d + 2 * h * w
    end = _HEADER.size + n * per
    if len(raw) < end:
        raise DatasetFormatError(f"truncated: need {end} bytes for {n} samples, have {len(raw)}")
    samples, splits = [], np.empty(n, np.uint8)
    off = _HEADER.size
    for i in range(n):
        splits[i] = raw[off]
        off += 1
        mask = np.frombuffer(raw, np.uint8, T, off).astype(bool)
        off += T
        x = np.frombuffer(raw, "<f4", T * h * w * d, off).reshape(T, h, w, d).astype(np.float32)
        off += 4 * T * h * w * d
        y = np.frombuffer(raw, "<i2", h * w, off).reshape(h, w).astype(np.int64)
        off += 2 * h * w
        if np.any(y >= n_classes) or np.any(y < IGNORE):
            raise DatasetFormatError(f"sample {i}: label out of range")
        samples.append(SequenceSample(x, mask, y))
    if np.any(splits > 2):
        raise DatasetFormatError("unknown split tag")
    try:
        metadata = json.loads(raw[end:].decode("utf-8")) if end < len(raw) else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"bad metadata block: {exc}") from None
    return Dataset(samples, splits, n_classes, metadata)


def spec_metadata(spec: SceneSpec, **extra) -> dict:
    meta = {"spec": asdict(spec), "bands": list(BAND_NAMES[:spec.n_bands]) + ["day_of_year", "year"]}
    meta.update(extra)
    return meta
