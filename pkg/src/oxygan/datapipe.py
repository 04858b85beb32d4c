"""Datasets, sliding-window augmentation and a synthetic Beer-Lambert RGB/StO2 source.

Images are numpy arrays in C x H x W layout. On disk they are OXT1 tensors
with values in [0, 1]; in memory, network-ready pairs are normalized to
[-1, 1].
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from oxygan.errors import ConfigError, FormatError, GeometryError, ShapeError
from oxygan.tensor_core import io as oxt1

TISSUES = ("porcine_bowel", "lamb_uterus", "rabbit_uterus", "synthetic")
SPLITS = ("train", "test")
DEFAULT_TRAIN_RATIO = 167 / 222


# ------------------------------------------------------------------- geometry

def crop_offsets(h: int, w: int, window: int, stride: int) -> list[tuple[int, int]]:
    """Top-left corners of every window, in raster order."""
    if stride < 1:
        raise GeometryError(f"stride must be >= 1, got {stride}")
    if window < 1 or window > h or window > w:
        raise GeometryError(f"window {window} does not fit a {h}x{w} image")
    rows = (h - window) // stride + 1
    cols = (w - window) // stride + 1
    return [(r * stride, c * stride) for r in range(rows) for c in range(cols)]


def crop_count(h: int, w: int, window: int, stride: int) -> int:
    return len(crop_offsets(h, w, window, stride))


def crop_slide(image: np.ndarray, window: int, stride: int) -> list[np.ndarray]:
    _, h, w = _chw(image).shape
    return [image[:, i:i + window, j:j + window].copy() for i, j in crop_offsets(h, w, window, stride)]


def center_offset(h: int, w: int, window: int, stride: int) -> tuple[int, int]:
    """The middle crop of the sliding-window grid."""
    rows = (h - window) // stride + 1
    cols = (w - window) // stride + 1
    return (rows // 2) * stride, (cols // 2) * stride


def _chw(image) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError("expected a C x H x W image", image.shape)
    return image


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize on a corner-aligned grid (first and last pixels map onto each other)."""
    image = _chw(image)
    if out_h < 1 or out_w < 1:
        raise GeometryError(f"target size must be positive, got {out_h}x{out_w}")
    _, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    dtype = image.dtype if image.dtype.kind == "f" else np.float32
    src = image.astype(np.float64)

    def axis(n_in, n_out):
        pos = np.zeros(n_out) if n_out == 1 else np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(h, out_h)
    c0, c1, fc = axis(w, out_w)
    top = src[:, r0][:, :, c0] * (1 - fc) + src[:, r0][:, :, c1] * fc
    bot = src[:, r1][:, :, c0] * (1 - fc) + src[:, r1][:, :, c1] * fc
    out = top * (1 - fr)[:, None] + bot * fr[:, None]
    return out.astype(dtype)


def resize_nearest(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    image = _chw(image)
    if out_h < 1 or out_w < 1:
        raise GeometryError(f"target size must be positive, got {out_h}x{out_w}")
    _, h, w = image.shape
    rows = np.minimum((np.arange(out_h) * h) // out_h, h - 1)
    cols = np.minimum((np.arange(out_w) * w) // out_w, w - 1)
    return image[:, rows][:, :, cols].copy()


def replicate_channels(mono: np.ndarray) -> np.ndarray:
    mono = _chw(mono)
    if mono.shape[0] != 1:
        raise ShapeError("replicate_channels needs a single-channel image", mono.shape)
    return np.repeat(mono, 3, axis=0)


def normalize(image):
    """[0, 1] -> [-1, 1]."""
    return image * 2 - 1


def denormalize(image):
    """[-1, 1] -> [0, 1]."""
    return (image + 1) / 2


# ------------------------------------------------------------------ synthesis

@dataclass
class SynthConfig:
    eps_oxy: tuple[float, float, float] = (0.2, 0.9, 0.3)
    eps_deoxy: tuple[float, float, float] = (0.8, 0.4, 0.9)
    depth: float = 1.0
    field_smoothness: int = 8
    seed: int = 0
    height: int = 96
    width: int = 128

    def __post_init__(self):
        self.eps_oxy = tuple(float(v) for v in self.eps_oxy)
        self.eps_deoxy = tuple(float(v) for v in self.eps_deoxy)
        self.validate()

    def validate(self) -> None:
        if len(self.eps_oxy) != 3 or len(self.eps_deoxy) != 3:
            raise ConfigError("eps_oxy and eps_deoxy need one coefficient per RGB channel")
        if self.depth < 0 or not math.isfinite(self.depth):
            raise ConfigError(f"depth must be a finite non-negative number, got {self.depth}")
        if self.field_smoothness < 3:
            raise ConfigError(f"field_smoothness (max blob count) must be >= 3, got {self.field_smoothness}")
        if self.height < 1 or self.width < 1:
            raise ConfigError(f"image dims must be positive, got {self.height}x{self.width}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eps_oxy"], d["eps_deoxy"] = list(self.eps_oxy), list(self.eps_deoxy)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> SynthConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown synth config field(s): {sorted(unknown)}")
        return cls(**data)


def beer_lambert_rgb(sto2: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    """Per-pixel reflectance exp(-depth * (s*eps_oxy + (1-s)*eps_deoxy)) for each channel.

    ``sto2`` is 1 x H x W in [0, 1]; returns 3 x H x W in (0, 1].
    """
    s = _chw(sto2).astype(np.float64)
    oxy = np.asarray(cfg.eps_oxy, dtype=np.float64)[:, None, None]
    deoxy = np.asarray(cfg.eps_deoxy, dtype=np.float64)[:, None, None]
    absorb = s * oxy + (1 - s) * deoxy
    return np.exp(-cfg.depth * absorb).astype(np.float32)


def random_sto2_field(height: int, width: int, max_blobs: int, rng: np.random.Generator) -> np.ndarray:
    """Clamped baseline plus 3..max_blobs signed Gaussian blobs, shape 1 x H x W."""
    n_blobs = int(rng.integers(3, max_blobs + 1))
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    field_ = np.full((height, width), rng.uniform(0.3, 0.7))
    scale = min(height, width)
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        sigma = rng.uniform(0.1, 0.35) * scale
        amp = rng.uniform(-0.5, 0.5)
        field_ += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    return np.clip(field_, 0.0, 1.0).astype(np.float32)[None]


def synth_pair(cfg: SynthConfig, rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(sto2 1 x H x W in [0, 1], rgb 3 x H x W in (0, 1]); rgb is a pure function of sto2."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    sto2 = random_sto2_field(cfg.height, cfg.width, cfg.field_smoothness, rng)
    return sto2, beer_lambert_rgb(sto2, cfg)


# ------------------------------------------------------------------- manifest

@dataclass
class CaseEntry:
    case_id: str
    tissue: str
    rgb_path: str
    sto2_path: str
    split: str

    def __post_init__(self):
        if self.tissue not in TISSUES:
            raise ConfigError(f"case {self.case_id!r}: unknown tissue {self.tissue!r}")
        if self.split not in SPLITS:
            raise ConfigError(f"case {self.case_id!r}: split must be one of {SPLITS}, got {self.split!r}")


@dataclass
class DatasetManifest:
    cases: list[CaseEntry]
    provenance: str = "synthetic"
    root: Path | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        ids = [c.case_id for c in self.cases]
        if len(set(ids)) != len(ids):
            raise ConfigError("manifest case_ids must be unique")

    def split(self, which: str) -> list[CaseEntry]:
        return [c for c in self.cases if c.split == which]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() or self.root is None else self.root / p

    def check_files(self) -> None:
        for c in self.cases:
            for rel in (c.rgb_path, c.sto2_path):
                if not self.resolve(rel).is_file():
                    raise FormatError(f"case {c.case_id!r}: missing file {self.resolve(rel)}")

    def to_dict(self) -> dict:
        return {"provenance": self.provenance, "cases": [asdict(c) for c in self.cases]}

    @classmethod
    def from_dict(cls, data: dict, root: Path | None = None) -> DatasetManifest:
        try:
            cases = [CaseEntry(**c) for c in data["cases"]]
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed manifest: {exc}") from exc
        return cls(cases, data.get("provenance", "synthetic"), root)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path, check_files: bool = True) -> DatasetManifest:
        path = Path(path)
        manifest = cls.from_dict(json.loads(path.read_text()), root=path.parent)
        if check_files:
            manifest.check_files()
        return manifest


def split_counts(n_cases: int, train_ratio: float = DEFAULT_TRAIN_RATIO) -> tuple[int, int]:
    """Nearest-integer train count, clamped so both splits keep at least one case."""
    if n_cases < 2:
        raise ConfigError(f"need at least 2 cases to split, got {n_cases}")
    if not 0 < train_ratio < 1:
        raise ConfigError(f"train ratio must lie in (0, 1), got {train_ratio}")
    n_train = int(math.floor(n_cases * train_ratio + 0.5))
    n_train = min(max(n_train, 1), n_cases - 1)
    return n_train, n_cases - n_train


def assign_splits(case_ids: Sequence[str], train_ratio: float = DEFAULT_TRAIN_RATIO) -> list[str]:
    n_train, _ = split_counts(len(case_ids), train_ratio)
    return ["train" if i < n_train else "test" for i in range(len(case_ids))]


def write_synthetic_dataset(out_dir, n_cases: int, cfg: SynthConfig,
                            train_ratio: float = DEFAULT_TRAIN_RATIO) -> DatasetManifest:
    """Generate ``n_cases`` pairs with seeds cfg.seed, cfg.seed+1, ... and a manifest."""
    out_dir = Path(out_dir)
    (out_dir / "cases").mkdir(parents=True, exist_ok=True)
    ids = [f"syn{i:04d}" for i in range(n_cases)]
    splits = assign_splits(ids, train_ratio)
    cases = []
    for i, (cid, split) in enumerate(zip(ids, splits)):
        sto2, rgb = synth_pair(cfg, np.random.default_rng(cfg.seed + i))
        rgb_rel, sto2_rel = f"cases/{cid}_rgb.oxt", f"cases/{cid}_sto2.oxt"
        oxt1.save(out_dir / rgb_rel, rgb)
        oxt1.save(out_dir / sto2_rel, sto2)
        cases.append(CaseEntry(cid, "synthetic", rgb_rel, sto2_rel, split))
    manifest = DatasetManifest(cases, "synthetic", out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest


# -------------------------------------------------------------------- dataset

@dataclass
class AugmentConfig:
    window: int = 64
    stride: int = 16
    net_size: int = 64
    interpolation: str = "bilinear"

    def validate(self) -> None:
        if self.interpolation not in ("bilinear", "nearest"):
            raise ConfigError(f"interpolation must be bilinear or nearest, got {self.interpolation!r}")
        if self.window < 1 or self.stride < 1 or self.net_size < 1:
            raise ConfigError("window, stride and net_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


FULL_GEOMETRY = AugmentConfig(window=128, stride=16, net_size=256)


@dataclass
class SamplePair:
    x: np.ndarray
    y: np.ndarray
    case_id: str
    crop_index: int


@dataclass
class CaseCrops:
    """All network-ready crops of one original image, in crop-index order."""
    case_id: str
    tissue: str
    split: str
    offsets: list[tuple[int, int]]
    x: np.ndarray  # n x 3 x S x S, [-1, 1]
    y: np.ndarray  # n x 3 x S x S, [-1, 1], channels identical
    center_index: int = 0

    def pairs(self) -> list[SamplePair]:
        return [SamplePair(self.x[i], self.y[i], self.case_id, i) for i in range(len(self.offsets))]


@dataclass
class Dataset:
    cases: list[CaseCrops]
    augment: AugmentConfig | None

    @property
    def train_cases(self) -> list[CaseCrops]:
        return [c for c in self.cases if c.split == "train"]

    @property
    def test_cases(self) -> list[CaseCrops]:
        return [c for c in self.cases if c.split == "test"]

    def pairs(self, split: str | None = None) -> list[SamplePair]:
        return [p for c in self.cases if split is None or c.split == split for p in c.pairs()]

    def split_indices(self) -> tuple[list[int], list[int]]:
        train, test, k = [], [], 0
        for c in self.cases:
            n = len(c.offsets)
            (train if c.split == "train" else test).extend(range(k, k + n))
            k += n
        return train, test

    def train_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        cases = self.train_cases
        if not cases:
            return np.zeros((0,)), np.zeros((0,))
        return np.concatenate([c.x for c in cases]), np.concatenate([c.y for c in cases])


def plan_case(h: int, w: int, aug: AugmentConfig | None) -> list[tuple[int, int]]:
    """Crop offsets a case of size h x w expands into (one full-frame crop without augmentation)."""
    if aug is None:
        return [(0, 0)]
    return crop_offsets(h, w, aug.window, aug.stride)


def planned_pair_count(manifest_or_dims: Iterable, aug: AugmentConfig | None, split: str = "train") -> int:
    """Pair count for entries of (h, w, split); no image data is touched."""
    return sum(len(plan_case(h, w, aug)) for h, w, s in manifest_or_dims if s == split)


def expand_case(case_id: str, rgb: np.ndarray, sto2: np.ndarray, aug: AugmentConfig | None, net_size: int,
                tissue: str = "synthetic", split: str = "train") -> CaseCrops:
    """Crop rgb and sto2 at identical offsets, resize, replicate StO2 to 3 channels, normalize."""
    rgb, sto2 = _chw(rgb), _chw(sto2)
    if rgb.shape[1:] != sto2.shape[1:]:
        raise ShapeError(f"case {case_id!r}: rgb and sto2 differ in size", rgb.shape, sto2.shape)
    if sto2.shape[0] != 1:
        raise ShapeError(f"case {case_id!r}: sto2 must be single-channel", sto2.shape)
    _, h, w = rgb.shape
    if aug is None:
        offsets = [(0, 0)]
        crops = [(rgb, sto2)]
        center = 0
        resize = resize_bilinear
    else:
        aug.validate()
        offsets = crop_offsets(h, w, aug.window, aug.stride)
        crops = [(rgb[:, i:i + aug.window, j:j + aug.window], sto2[:, i:i + aug.window, j:j + aug.window])
                 for i, j in offsets]
        center = offsets.index(center_offset(h, w, aug.window, aug.stride))
        resize = resize_bilinear if aug.interpolation == "bilinear" else resize_nearest
    xs, ys = [], []
    for cx, cy in crops:
        xs.append(normalize(resize(cx, net_size, net_size).astype(np.float32)))
        ys.append(normalize(replicate_channels(resize(cy, net_size, net_size).astype(np.float32))))
    return CaseCrops(case_id, tissue, split, offsets, np.stack(xs), np.stack(ys), center)


def build_dataset(source, augment: bool = True, aug: AugmentConfig | None = None, *, n_cases: int | None = None,
                  train_ratio: float = DEFAULT_TRAIN_RATIO, net_size: int | None = None) -> Dataset:
    """Build network-ready crops from a :class:`DatasetManifest` or a :class:`SynthConfig`.

    With a SynthConfig, ``n_cases`` pairs are generated in memory with seeds
    cfg.seed + i and split by ``train_ratio``.
    """
    aug = (aug or AugmentConfig()) if augment else None
    size = net_size or (aug.net_size if aug else None)
    if isinstance(source, SynthConfig):
        if n_cases is None or n_cases < 2:
            raise ConfigError("build_dataset from a SynthConfig needs n_cases >= 2")
        ids = [f"syn{i:04d}" for i in range(n_cases)]
        splits = assign_splits(ids, train_ratio)
        raw = []
        for i, (cid, split) in enumerate(zip(ids, splits)):
            sto2, rgb = synth_pair(source, np.random.default_rng(source.seed + i))
            raw.append((cid, "synthetic", split, rgb, sto2))
    elif isinstance(source, DatasetManifest):
        if len(source.cases) < 2:
            raise ConfigError("a dataset needs at least 2 cases")
        raw = [(c.case_id, c.tissue, c.split, oxt1.load(source.resolve(c.rgb_path)),
                oxt1.load(source.resolve(c.sto2_path))) for c in source.cases]
    else:
        raise ConfigError(f"unsupported dataset source {type(source).__name__}")
    if not any(split == "test" for _, _, split, _, _ in raw):
        raise ConfigError("dataset split has no test cases")
    if not any(split == "train" for _, _, split, _, _ in raw):
        raise ConfigError("dataset split has no training cases")
    if size is None:
        raise ConfigError("net_size is required when augment is False")
    cases = [expand_case(cid, rgb, sto2, aug, size, tissue, split) for cid, tissue, split, rgb, sto2 in raw]
    cases.sort(key=lambda c: c.case_id)
    return Dataset(cases, aug)
