"""Spatio-temporal content features F1-F17 from raw planar YUV video.

Only the luma plane is used.  The features are:

* F1-F5: GLCM contrast, correlation, homogeneity, energy and entropy,
  averaged over frames.
* F6-F10: statistics of the temporal-coherence (TC) distribution.
* F11-F15: statistics of the inter-frame NCC distribution.
* F16-F17: rescaling MSE of the first frame at 1080p and 720p.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse, stats

from .core import LadderkitError, Resolution, ValidationError

logger = logging.getLogger(__name__)

FEATURE_NAMES = (
    "F1.meanGLCM_con", "F2.meanGLCM_cor", "F3.meanGLCM_hom", "F4.meanGLCM_enr", "F5.meanGLCM_ent",
    "F6.meanTC_mean", "F7.meanTC_std", "F8.meanTC_skw", "F9.meanTC_kur", "F10.meanTC_entr",
    "F11.meanNCC_mean", "F12.meanNCC_std", "F13.meanNCC_skw", "F14.meanNCC_kur", "F15.meanNCC_entr",
    "F16.RsMSE_1080p", "F17.RsMSE_720p",
)
# 0-based indices of F1-2, F4-5, F7, F9-10, F12, F15-17.
KNEE_FEATURE_SUBSET = (0, 1, 3, 4, 6, 8, 9, 11, 14, 15, 16)

GLCM_LEVELS = 32
GLCM_OFFSETS = ((1, 0), (0, 1), (1, 1), (1, -1))
TC_BLOCK = 32
NCC_RADIUS = 8
NCC_SIZE = (960, 540)
HIST_BINS = 64
NATIVE_SIZE = (Resolution.R2160P.width, Resolution.R2160P.height)

_CHROMA_FACTOR = {"400": 0.0, "420": 0.5, "422": 1.0, "444": 2.0}


class StreamError(LadderkitError, IOError):
    """A YUV stream is unreadable or shorter than declared."""


@dataclass(frozen=True)
class FrameLuma:
    """One luma plane.  ``samples`` has shape ``(height, width)``."""

    samples: np.ndarray
    bit_depth: int = 8

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim != 2 or s.size == 0:
            raise ValidationError(f"luma plane must be a non-empty 2-D array, got shape {s.shape}")
        if self.bit_depth not in (8, 10):
            raise ValidationError(f"bit depth must be 8 or 10, got {self.bit_depth}")
        if s.min() < 0 or s.max() > self.max_value:
            raise ValidationError(f"samples outside [0, {self.max_value}]")
        object.__setattr__(self, "samples", s)

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def max_value(self) -> int:
        return (1 << self.bit_depth) - 1


# ---------------------------------------------------------------- YUV input

@dataclass(frozen=True)
class StreamInfo:
    width: int
    height: int
    bit_depth: int = 8
    frames: Optional[int] = None
    chroma: str = "420"

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"bad dimensions {self.width}x{self.height}")
        if self.bit_depth not in (8, 10):
            raise ValidationError(f"bit depth must be 8 or 10, got {self.bit_depth}")
        if self.chroma not in _CHROMA_FACTOR:
            raise ValidationError(f"unsupported chroma format {self.chroma!r}")
        if self.frames is not None and self.frames < 1:
            raise ValidationError(f"frame count must be positive, got {self.frames}")

    @property
    def bytes_per_sample(self) -> int:
        return 1 if self.bit_depth == 8 else 2

    @property
    def luma_samples(self) -> int:
        return self.width * self.height

    @property
    def chroma_samples(self) -> int:
        cw, ch = -(-self.width // 2), -(-self.height // 2)
        return {"400": 0, "420": 2 * cw * ch, "422": 2 * cw * self.height,
                "444": 2 * self.luma_samples}[self.chroma]

    @property
    def frame_bytes(self) -> int:
        return (self.luma_samples + self.chroma_samples) * self.bytes_per_sample

    @classmethod
    def from_sidecar(cls, path) -> "StreamInfo":
        """Read ``width``/``height``/``bit_depth``/``frames`` from a JSON sidecar."""
        path = Path(path)
        try:
            d = json.loads(path.read_text())
            return cls(int(d["width"]), int(d["height"]), int(d.get("bit_depth", 8)),
                       None if d.get("frames") is None else int(d["frames"]), str(d.get("chroma", "420")))
        except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"{path}: bad sidecar: {exc}") from exc


def sidecar_path(yuv_path) -> Path:
    p = Path(yuv_path)
    return p.with_name(p.name + ".json")


def read_luma(path, info: StreamInfo) -> Iterator[FrameLuma]:
    """Yield the luma plane of each frame of a planar YUV file.

    The frame count is taken from ``info.frames`` when given, else from the
    file size.

    Raises:
        StreamError: the file ends inside a frame, or holds fewer frames
            than declared.  The message names the frame index.
    """
    path = Path(path)
    try:
        size = path.stat().st_size
    except OSError as exc:
        raise StreamError(f"{path}: {exc}") from exc
    n = info.frames if info.frames is not None else -(-size // info.frame_bytes)
    dtype = np.uint8 if info.bit_depth == 8 else np.dtype("<u2")
    luma_bytes = info.luma_samples * info.bytes_per_sample
    with path.open("rb") as fh:
        for i in range(n):
            fh.seek(i * info.frame_bytes)
            buf = fh.read(luma_bytes)
            if len(buf) < luma_bytes or (i + 1) * info.frame_bytes > size:
                raise StreamError(f"{path}: truncated at frame {i} "
                                  f"({size} bytes, frame size {info.frame_bytes})")
            plane = np.frombuffer(buf, dtype=dtype).reshape(info.height, info.width)
            try:
                yield FrameLuma(plane.astype(np.int32), info.bit_depth)
            except ValidationError as exc:
                raise StreamError(f"{path}: frame {i}: {exc}") from exc


def write_yuv(frames: Iterable[FrameLuma], path, chroma: str = "420") -> Path:
    """Write luma planes as planar YUV with mid-grey chroma."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        for f in frames:
            info = StreamInfo(f.width, f.height, f.bit_depth, chroma=chroma)
            dtype = np.uint8 if f.bit_depth == 8 else np.dtype("<u2")
            fh.write(f.samples.astype(dtype).tobytes())
            fh.write(np.full(info.chroma_samples, 1 << (f.bit_depth - 1), dtype=dtype).tobytes())
    return path


# --------------------------------------------------------------------- GLCM

@dataclass(frozen=True)
class GLCMDescriptors:
    contrast: float
    correlation: float
    homogeneity: float
    energy: float
    entropy: float
    degenerate: bool = False

    def as_tuple(self) -> Tuple[float, float, float, float, float]:
        return self.contrast, self.correlation, self.homogeneity, self.energy, self.entropy


def quantize(frame: FrameLuma, levels: int) -> np.ndarray:
    """Uniform binning of the full code range into ``levels`` bins."""
    q = (frame.samples.astype(np.int64) * levels) >> frame.bit_depth
    return np.clip(q, 0, levels - 1)


def glcm_matrix(frame: FrameLuma, levels: int = GLCM_LEVELS,
                offsets: Sequence[Tuple[int, int]] = GLCM_OFFSETS) -> np.ndarray:
    """Symmetric, normalised co-occurrence matrix summed over ``offsets``.

    An offset ``(dx, dy)`` pairs pixel ``(y, x)`` with ``(y + dy, x + dx)``.

    Raises:
        ValidationError: ``levels < 2`` or the frame is no larger than an offset.
    """
    if levels < 2:
        raise ValidationError(f"levels must be >= 2, got {levels}")
    if not offsets:
        raise ValidationError("at least one offset is required")
    q = quantize(frame, levels)
    h, w = q.shape
    counts = np.zeros(levels * levels, dtype=np.int64)
    for dx, dy in offsets:
        if abs(dx) >= w or abs(dy) >= h:
            raise ValidationError(f"offset ({dx}, {dy}) does not fit a {w}x{h} frame")
        a = q[max(0, -dy):h - max(0, dy), max(0, -dx):w - max(0, dx)]
        b = q[max(0, dy):h + min(0, dy), max(0, dx):w + min(0, dx)]
        counts += np.bincount((a * levels + b).ravel(), minlength=levels * levels)
    c = counts.reshape(levels, levels)
    c = c + c.T
    return c / c.sum()


def glcm_descriptors(frame: FrameLuma, levels: int = GLCM_LEVELS,
                     offsets: Sequence[Tuple[int, int]] = GLCM_OFFSETS) -> GLCMDescriptors:
    """Haralick contrast, correlation, homogeneity, energy and entropy (bits).

    A frame with a single grey level has no defined correlation; it is
    reported as 0 with ``degenerate`` set.
    """
    p = glcm_matrix(frame, levels, offsets)
    i, j = np.indices(p.shape)
    contrast = float(np.sum((i - j) ** 2 * p))
    homogeneity = float(np.sum(p / (1.0 + np.abs(i - j))))
    energy = float(np.sum(p * p))
    nz = p[p > 0]
    entropy = float(-np.sum(nz * np.log2(nz))) + 0.0
    mu_i, mu_j = np.sum(i * p), np.sum(j * p)
    sd_i = math.sqrt(np.sum((i - mu_i) ** 2 * p))
    sd_j = math.sqrt(np.sum((j - mu_j) ** 2 * p))
    if sd_i == 0 or sd_j == 0:
        return GLCMDescriptors(contrast, 0.0, homogeneity, energy, entropy, degenerate=True)
    corr = float(np.sum((i - mu_i) * (j - mu_j) * p) / (sd_i * sd_j))
    return GLCMDescriptors(contrast, min(1.0, max(-1.0, corr)), homogeneity, energy, entropy)


# ------------------------------------------------------- distribution stats

@dataclass(frozen=True)
class DistStats:
    """Mean, std, skewness, excess kurtosis and histogram entropy (bits)."""

    mean: float
    std: float
    skewness: float
    kurtosis: float
    entropy: float
    degenerate: bool = False

    def as_tuple(self) -> Tuple[float, float, float, float, float]:
        return self.mean, self.std, self.skewness, self.kurtosis, self.entropy


def hist_entropy(values: np.ndarray, bins: int = HIST_BINS, support: Tuple[float, float] = (-1.0, 1.0)) -> float:
    counts, _ = np.histogram(np.clip(values, *support), bins=bins, range=support)
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log2(p))) + 0.0


def distribution_stats(values, bins: int = HIST_BINS) -> DistStats:
    """Five statistics of a sample on [-1, 1].

    Skewness and kurtosis are undefined for a constant sample and are
    reported as 0 with ``degenerate`` set.
    """
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValidationError("empty distribution")
    mean = float(np.mean(v))
    std = float(np.std(v))
    ent = hist_entropy(v, bins)
    if std <= 1e-12 * max(1.0, abs(mean)):
        return DistStats(mean, 0.0, 0.0, 0.0, ent, degenerate=True)
    return DistStats(mean, std, float(stats.skew(v)), float(stats.kurtosis(v, fisher=True)), ent)


def _mean_stats(per_pair: Sequence[DistStats]) -> DistStats:
    # fsum gives an exactly rounded, order-independent mean.
    cols = list(zip(*(s.as_tuple() for s in per_pair)))
    n = len(per_pair)
    return DistStats(*(math.fsum(c) / n for c in cols), degenerate=any(s.degenerate for s in per_pair))


# ----------------------------------------------------------------------- TC

def block_correlations(f1: FrameLuma, f2: FrameLuma, block: int = TC_BLOCK) -> Tuple[np.ndarray, int]:
    """Zero-lag normalised correlation of co-located blocks.

    Partial blocks at the right and bottom edges are ignored.  A block pair
    where either side is constant gets 1 when both are the same constant,
    else 0.

    Returns:
        ``(values, n_degenerate)`` with values in block raster order.
    """
    if block < 4:
        raise ValidationError(f"block must be >= 4, got {block}")
    if f1.samples.shape != f2.samples.shape:
        raise ValidationError("frames differ in size")
    h, w = f1.samples.shape
    by, bx = h // block, w // block
    if by == 0 or bx == 0:
        raise ValidationError(f"{w}x{h} frame is smaller than one {block}x{block} block")

    def blocks(f):
        x = f.samples[:by * block, :bx * block].astype(float)
        return x.reshape(by, block, bx, block).transpose(0, 2, 1, 3).reshape(by * bx, block * block)

    a, b = blocks(f1), blocks(f2)
    da = a - a.mean(axis=1, keepdims=True)
    db = b - b.mean(axis=1, keepdims=True)
    saa, sbb = np.sum(da * da, axis=1), np.sum(db * db, axis=1)
    flat = (saa == 0) | (sbb == 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.sum(da * db, axis=1) / np.sqrt(saa * sbb)
    same = np.all(a == b, axis=1)
    r = np.where(flat, np.where(same & (saa == 0) & (sbb == 0), 1.0, 0.0), r)
    return np.clip(r, -1.0, 1.0), int(np.count_nonzero(flat))


def tc_pair_stats(f1: FrameLuma, f2: FrameLuma, block: int = TC_BLOCK, bins: int = HIST_BINS) -> DistStats:
    r, n_flat = block_correlations(f1, f2, block)
    s = distribution_stats(r, bins)
    if n_flat:
        s = DistStats(*s.as_tuple(), degenerate=True)
    return s


def tc_stats(frames: Sequence[FrameLuma], block: int = TC_BLOCK, bins: int = HIST_BINS) -> DistStats:
    """TC statistics averaged over consecutive frame pairs.

    Raises:
        ValidationError: fewer than 2 frames or ``block < 4``.
    """
    if len(frames) < 2:
        raise ValidationError("TC needs at least 2 frames")
    return _mean_stats([tc_pair_stats(a, b, block, bins) for a, b in zip(frames, frames[1:])])


# ---------------------------------------------------------------------- NCC

def _ncc(a: np.ndarray, b: np.ndarray) -> Tuple[float, bool]:
    da, db = a - a.mean(), b - b.mean()
    saa, sbb = float(np.sum(da * da)), float(np.sum(db * db))
    if saa == 0 or sbb == 0:
        same = saa == 0 and sbb == 0 and np.array_equal(a, b)
        return (1.0 if same else 0.0), True
    return min(1.0, max(-1.0, float(np.sum(da * db)) / math.sqrt(saa * sbb))), False


def ncc_map(f1: FrameLuma, f2: FrameLuma, radius: int = NCC_RADIUS) -> Tuple[np.ndarray, int]:
    """NCC of the overlapping region at every displacement in ``[-r, r]^2``.

    Entry ``[dy + r, dx + r]`` correlates ``f1[y, x]`` with
    ``f2[y + dy, x + dx]``; a second frame shifted right by 3 peaks at
    ``dx = 3``.

    Returns:
        ``(map, n_degenerate)``.
    """
    if radius < 1:
        raise ValidationError(f"radius must be >= 1, got {radius}")
    if f1.samples.shape != f2.samples.shape:
        raise ValidationError("frames differ in size")
    h, w = f1.samples.shape
    if radius >= h or radius >= w:
        raise ValidationError(f"radius {radius} does not fit a {w}x{h} frame")
    x1, x2 = f1.samples.astype(float), f2.samples.astype(float)
    out = np.empty((2 * radius + 1, 2 * radius + 1))
    n_flat = 0
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            a = x1[max(0, -dy):h - max(0, dy), max(0, -dx):w - max(0, dx)]
            b = x2[max(0, dy):h + min(0, dy), max(0, dx):w + min(0, dx)]
            out[dy + radius, dx + radius], flat = _ncc(a, b)
            n_flat += flat
    return out, n_flat


def ncc_pair_stats(f1: FrameLuma, f2: FrameLuma, radius: int = NCC_RADIUS, bins: int = HIST_BINS) -> DistStats:
    m, n_flat = ncc_map(f1, f2, radius)
    s = distribution_stats(m, bins)
    if n_flat:
        s = DistStats(*s.as_tuple(), degenerate=True)
    return s


def ncc_stats(frames: Sequence[FrameLuma], radius: int = NCC_RADIUS, bins: int = HIST_BINS) -> DistStats:
    """NCC statistics averaged over consecutive frame pairs (no rescaling)."""
    if len(frames) < 2:
        raise ValidationError("NCC needs at least 2 frames")
    return _mean_stats([ncc_pair_stats(a, b, radius, bins) for a, b in zip(frames, frames[1:])])


# ------------------------------------------------------------------ Lanczos

def lanczos3(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.where(np.abs(x) < 3.0, np.sinc(x) * np.sinc(x / 3.0), 0.0)


def lanczos_weights(n_in: int, n_out: int) -> sparse.csr_matrix:
    """``(n_out, n_in)`` resampling matrix with rows summing to 1.

    Output sample ``i`` sits at input coordinate ``(i + 0.5) * n_in / n_out - 0.5``.
    When downscaling the kernel is stretched by the scale factor so it
    also acts as the anti-alias filter.  Taps beyond the edge are clamped.
    """
    if n_in < 1 or n_out < 1:
        raise ValidationError(f"sizes must be positive, got {n_in} -> {n_out}")
    scale = n_in / n_out
    stretch = max(scale, 1.0)
    support = 3.0 * stretch
    centres = (np.arange(n_out) + 0.5) * scale - 0.5
    taps = int(math.ceil(2 * support)) + 1
    first = np.floor(centres - support).astype(np.int64) + 1
    idx = first[:, None] + np.arange(taps)[None, :]
    wts = lanczos3((idx - centres[:, None]) / stretch)
    wts /= wts.sum(axis=1, keepdims=True)
    rows = np.repeat(np.arange(n_out), taps)
    m = sparse.coo_matrix((wts.ravel(), (rows, np.clip(idx, 0, n_in - 1).ravel())), shape=(n_out, n_in))
    return m.tocsr()


def lanczos3_resample(frame: FrameLuma, out_w: int, out_h: int) -> FrameLuma:
    """Separable Lanczos-3 resize, rounded and clipped to the sample range."""
    if out_w < 1 or out_h < 1:
        raise ValidationError(f"output size must be positive, got {out_w}x{out_h}")
    x = frame.samples.astype(float)
    if (out_w, out_h) != (frame.width, frame.height):
        x = lanczos_weights(frame.height, out_h) @ x
        x = (lanczos_weights(frame.width, out_w) @ x.T).T
    y = np.clip(np.rint(x), 0, frame.max_value).astype(np.int32)
    return FrameLuma(y, frame.bit_depth)


def scaled_size(target: Resolution, native: Tuple[int, int] = NATIVE_SIZE) -> Tuple[int, int]:
    """Size of ``target`` relative to a frame of size ``native`` standing in for 2160p."""
    w = max(1, round(native[0] * target.width / Resolution.R2160P.width))
    h = max(1, round(native[1] * target.height / Resolution.R2160P.height))
    return w, h


def rsmse(frame: FrameLuma, target: Resolution, native: Tuple[int, int] = NATIVE_SIZE) -> float:
    """Luma MSE after a Lanczos-3 round trip down to ``target`` and back.

    ``native`` is the frame size treated as 2160p; small test fixtures pass
    their own size.

    Raises:
        ValidationError: the frame is not ``native`` sized, or ``target``
            is not a lower resolution.
    """
    if (frame.width, frame.height) != tuple(native):
        raise ValidationError(f"rescaling MSE needs a {native[0]}x{native[1]} frame, "
                              f"got {frame.width}x{frame.height}")
    if target not in (Resolution.R1080P, Resolution.R720P, Resolution.R540P):
        raise ValidationError(f"target must be below 2160p, got {target}")
    w, h = scaled_size(target, native)
    back = lanczos3_resample(lanczos3_resample(frame, w, h), frame.width, frame.height)
    d = back.samples.astype(float) - frame.samples
    return float(np.mean(d * d))


# ------------------------------------------------------------- extraction

@dataclass(frozen=True)
class FeatureConfig:
    levels: int = GLCM_LEVELS
    offsets: Tuple[Tuple[int, int], ...] = GLCM_OFFSETS
    tc_block: int = TC_BLOCK
    ncc_radius: int = NCC_RADIUS
    # None keeps the native size.
    ncc_size: Optional[Tuple[int, int]] = NCC_SIZE
    native: Tuple[int, int] = NATIVE_SIZE
    hist_bins: int = HIST_BINS

    def to_dict(self) -> dict:
        return {"levels": self.levels, "offsets": [list(o) for o in self.offsets],
                "tc_block": self.tc_block, "ncc_radius": self.ncc_radius,
                "ncc_size": None if self.ncc_size is None else list(self.ncc_size),
                "native": list(self.native), "hist_bins": self.hist_bins}


@dataclass(frozen=True)
class FeatureVector:
    sequence_id: str
    values: Tuple[float, ...]
    flags: Tuple[str, ...] = field(default=())

    def __post_init__(self):
        if len(self.values) != len(FEATURE_NAMES):
            raise ValidationError(f"expected {len(FEATURE_NAMES)} features, got {len(self.values)}")
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    def __getitem__(self, number: int) -> float:
        """Feature by its 1-based number, so ``fv[16]`` is F16."""
        if not 1 <= number <= len(self.values):
            raise IndexError(f"no feature F{number}")
        return self.values[number - 1]

    def as_array(self) -> np.ndarray:
        return np.array(self.values)

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(FEATURE_NAMES, self.values))


def extract_features(frames: Iterable[FrameLuma], config: FeatureConfig = FeatureConfig(),
                     sequence_id: str = "") -> FeatureVector:
    """Compute F1-F17 over a frame sequence, streaming two frames at a time.

    Raises:
        ValidationError: fewer than 2 frames, mixed sizes, or a first frame
            that is not ``config.native`` sized.
    """
    glcm: List[GLCMDescriptors] = []
    tc: List[DistStats] = []
    ncc: List[DistStats] = []
    prev: Optional[FrameLuma] = None
    prev_small: Optional[FrameLuma] = None
    rs = (0.0, 0.0)
    for k, f in enumerate(frames):
        if prev is None:
            rs = (rsmse(f, Resolution.R1080P, config.native), rsmse(f, Resolution.R720P, config.native))
        elif f.samples.shape != prev.samples.shape:
            raise ValidationError(f"frame {k} is {f.width}x{f.height}, expected {prev.width}x{prev.height}")
        glcm.append(glcm_descriptors(f, config.levels, config.offsets))
        small = f if config.ncc_size is None else lanczos3_resample(f, *config.ncc_size)
        if prev is not None:
            tc.append(tc_pair_stats(prev, f, config.tc_block, config.hist_bins))
            ncc.append(ncc_pair_stats(prev_small, small, config.ncc_radius, config.hist_bins))
        prev, prev_small = f, small
    if len(glcm) < 2:
        raise ValidationError(f"{sequence_id or 'sequence'}: need at least 2 frames, got {len(glcm)}")
    n = len(glcm)
    g = [math.fsum(col) / n for col in zip(*(d.as_tuple() for d in glcm))]
    t, c = _mean_stats(tc), _mean_stats(ncc)
    flags = []
    if any(d.degenerate for d in glcm):
        flags.append("glcm_correlation")
    if t.degenerate:
        flags.append("tc")
    if c.degenerate:
        flags.append("ncc")
    return FeatureVector(sequence_id, tuple(g) + t.as_tuple() + c.as_tuple() + rs, tuple(flags))


def extract_features_file(path, info: Optional[StreamInfo] = None, config: FeatureConfig = FeatureConfig(),
                          sequence_id: Optional[str] = None) -> FeatureVector:
    """:func:`extract_features` on a YUV file; ``info`` defaults to its JSON sidecar."""
    path = Path(path)
    if info is None:
        side = sidecar_path(path)
        if not side.exists():
            raise ValidationError(f"{path}: no stream info given and no sidecar {side.name}")
        info = StreamInfo.from_sidecar(side)
    return extract_features(read_luma(path, info), config, sequence_id or path.stem)


def write_features_csv(vectors: Iterable[FeatureVector], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("sequence",) + FEATURE_NAMES + ("flags",))
        for v in vectors:
            w.writerow([v.sequence_id] + [repr(x) for x in v.values] + [";".join(v.flags)])
    return path


def read_features_csv(path) -> Dict[str, FeatureVector]:
    """``{sequence_id: FeatureVector}``.  Columns may be in any order.

    Raises:
        ValidationError: missing feature columns or non-numeric values.
    """
    path = Path(path)
    out: Dict[str, FeatureVector] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ("sequence",) + FEATURE_NAMES if c not in (reader.fieldnames or ())]
        if missing:
            raise ValidationError(f"{path}: missing columns {', '.join(missing)}")
        for line, row in enumerate(reader, start=2):
            try:
                vals = tuple(float(row[c]) for c in FEATURE_NAMES)
            except ValueError as exc:
                raise ValidationError(f"{path}:{line}: {exc}") from exc
            flags = tuple(f for f in (row.get("flags") or "").split(";") if f)
            out[row["sequence"]] = FeatureVector(row["sequence"], vals, flags)
    return out
