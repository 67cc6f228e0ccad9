"""Planted-feature image datasets.

Images are single- or multi-channel squares on a 4x4 cell grid.  A pattern
feature draws a glyph (square, cross or triangle) inside its anchor cell; an
attribute feature adds a global brightness tint.  Every instance carries the
task label ``y`` and the annotation bit-vector ``f``.

Counts are built deterministically from the configuration; the seed only
decides which instances receive which bits and the pixel noise.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

GRID = 4
BACKGROUND = 0.1
CONTRAST = 0.8
SHAPES = ("square", "cross", "triangle")
DATASET_MAGIC = b"FUDS"
DATASET_VERSION = 1


class InfeasibleError(ValueError):
    """Requested correlation cannot be realised with the given marginals."""


class FormatError(ValueError):
    """A persisted file is truncated or carries the wrong magic/version."""


@dataclass(frozen=True)
class Glyph:
    shape: str
    row: int
    col: int
    size: int = 6
    channels: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.shape not in SHAPES:
            raise ValueError(f"unknown glyph shape {self.shape!r}; expected one of {SHAPES}")
        if not (0 <= self.row < GRID and 0 <= self.col < GRID):
            raise ValueError(f"glyph anchor ({self.row}, {self.col}) outside the {GRID}x{GRID} grid")
        if self.size < 2:
            raise ValueError("glyph size must be at least 2 pixels")


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str = "pattern"
    glyph: Glyph | None = None
    tint: tuple[float, ...] = ()
    prevalence: float = 0.5
    visibility: float = 1.0

    def __post_init__(self):
        if self.kind == "pattern" and self.glyph is None:
            raise ValueError(f"pattern feature {self.name!r} needs a glyph")
        if self.kind == "attribute":
            if not self.tint or any(abs(t) > 0.3 for t in self.tint):
                raise ValueError(f"attribute feature {self.name!r} needs per-channel tints in [-0.3, 0.3]")
        if self.kind not in ("pattern", "attribute"):
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if not 0.0 <= self.prevalence <= 1.0:
            raise ValueError("prevalence must lie in [0, 1]")
        if not 0.0 <= self.visibility <= 1.0:
            raise ValueError("visibility must lie in [0, 1]")


@dataclass
class DatasetConfig:
    n: int
    features: list[FeatureSpec]
    task: str
    image_size: tuple[int, int, int] = (1, 32, 32)
    correlations: dict[str, float] = field(default_factory=dict)
    cell_counts: dict[str, dict[str, int]] = field(default_factory=dict)
    noise: float = 0.05
    label_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ValueError("feature names must be unique")
        if self.task not in names:
            raise ValueError(f"task feature {self.task!r} not among features {names}")
        for name, rho in self.correlations.items():
            if name not in names or name == self.task:
                raise ValueError(f"correlation target {name!r} must be a non-task feature")
            if not -1.0 <= rho <= 1.0:
                raise ValueError(f"correlation for {name!r} outside [-1, 1]")
        for name, cells in self.cell_counts.items():
            if name not in names or name == self.task:
                raise ValueError(f"cell counts target {name!r} must be a non-task feature")
            total = sum(cells.get(k, 0) for k in ("FF", "FT", "TF", "TT"))
            if total != self.n:
                raise ValueError(f"cell counts for {name!r} sum to {total}, expected n={self.n}")
        c, h, w = self.image_size
        if h % GRID or w % GRID:
            raise ValueError(f"image height/width must be multiples of {GRID}")
        patterns = [f for f in self.features if f.kind == "pattern"]
        cells = [(f.glyph.row, f.glyph.col) for f in patterns]
        if len(set(cells)) != len(cells):
            raise ValueError("pattern glyphs must occupy disjoint grid cells")
        for f in patterns:
            if f.glyph.size > min(h, w) // GRID:
                raise ValueError(f"glyph of {f.name!r} larger than its cell")
            if any(not 0 <= ch < c for ch in f.glyph.channels):
                raise ValueError(f"glyph of {f.name!r} paints channels outside 0..{c - 1}")
        for f in self.features:
            if f.kind == "attribute" and len(f.tint) not in (1, c):
                raise ValueError(f"tint of {f.name!r} needs 1 or {c} channel values")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        feats = []
        for f in d.pop("features"):
            f = dict(f)
            glyph = f.pop("glyph", None)
            feats.append(FeatureSpec(glyph=Glyph(**glyph) if glyph else None, tint=tuple(f.pop("tint", ())), **f))
        d["image_size"] = tuple(d.get("image_size", (1, 32, 32)))
        return cls(features=feats, **d)


@dataclass
class Instance:
    x: np.ndarray
    y: int
    f: np.ndarray


class Dataset:
    """Arrays ``x[N,C,H,W]``, ``y[N]`` and ``f[N,k]`` plus feature metadata."""

    def __init__(self, x, y, f, feature_names: Sequence[str], config: DatasetConfig | None = None):
        self.x = np.asarray(x, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.int64)
        f = np.asarray(f, dtype=np.int64)
        self.f = f if f.ndim == 2 else f.reshape(len(self.y), -1)
        self.feature_names = list(feature_names)
        self.config = config
        if not (len(self.x) == len(self.y) == len(self.f)):
            raise ValueError("x, y and f must have the same number of instances")

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i: int) -> Instance:
        return Instance(self.x[i], int(self.y[i]), self.f[i])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.f[idx], self.feature_names, self.config)

    def with_x(self, x) -> "Dataset":
        return Dataset(x, self.y, self.f, self.feature_names, self.config)

    def feature_index(self, name: str) -> int:
        return self.feature_names.index(name)

    def feature(self, name: str) -> np.ndarray:
        return self.f[:, self.feature_index(name)]

    def cell_counts(self, target: str) -> dict[str, int]:
        """Joint counts of (task label, target bit) keyed ``FF, FT, TF, TT``."""
        t = self.feature(target)
        out = {}
        for ky, yv in (("F", 0), ("T", 1)):
            for kt, tv in (("F", 0), ("T", 1)):
                out[ky + kt] = int(np.sum((self.y == yv) & (t == tv)))
        return out

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.x.shape[1:])


# ---------------------------------------------------------------------------
# glyph geometry


def cell_size(image_size) -> tuple[int, int]:
    _, h, w = image_size
    return h // GRID, w // GRID


def glyph_mask(glyph: Glyph, image_size) -> np.ndarray:
    """Boolean H x W mask of the pixels a glyph draws."""
    _, h, w = image_size
    ch, cw = cell_size(image_size)
    s = glyph.size
    top = glyph.row * ch + (ch - s) // 2
    left = glyph.col * cw + (cw - s) // 2
    local = np.zeros((s, s), dtype=bool)
    if glyph.shape == "square":
        local[:, :] = True
    elif glyph.shape == "cross":
        mid = s // 2
        bar = max(1, s // 3)
        lo = mid - bar // 2
        local[lo : lo + bar, :] = True
        local[:, lo : lo + bar] = True
    else:
        for r in range(s):
            half = (r * s) // (2 * s - 2) if s > 1 else 0
            c0 = (s - 1) // 2 - half
            c1 = s // 2 + half
            local[r, max(c0, 0) : min(c1, s - 1) + 1] = True
    out = np.zeros((h, w), dtype=bool)
    out[top : top + s, left : left + s] = local
    return out


def region_mask(glyph: Glyph, image_size) -> np.ndarray:
    """Boolean H x W mask of the glyph's whole anchor cell."""
    _, h, w = image_size
    ch, cw = cell_size(image_size)
    out = np.zeros((h, w), dtype=bool)
    out[glyph.row * ch : (glyph.row + 1) * ch, glyph.col * cw : (glyph.col + 1) * cw] = True
    return out


# ---------------------------------------------------------------------------
# generation


def _split_count(total: int, p: float) -> int:
    return int(math.floor(total * p + 0.5))


def _joint_with_task(n: int, p_task: float, p_feat: float, rho: float) -> dict[str, int]:
    """Exact (task, feature) cell counts for marginals and a target correlation."""
    sd = math.sqrt(p_task * (1 - p_task) * p_feat * (1 - p_feat))
    p_tt = p_task * p_feat + rho * sd
    lo = max(0.0, p_task + p_feat - 1.0)
    hi = min(p_task, p_feat)
    if p_tt < lo - 1e-12 or p_tt > hi + 1e-12:
        raise InfeasibleError(
            f"correlation {rho} infeasible for marginals {p_task:.3f}/{p_feat:.3f}: "
            f"P(both) would be {p_tt:.4f}, allowed [{lo:.4f}, {hi:.4f}]"
        )
    probs = {"TT": p_tt, "TF": p_task - p_tt, "FT": p_feat - p_tt, "FF": 1.0 - p_task - p_feat + p_tt}
    probs = {k: min(max(v, 0.0), 1.0) for k, v in probs.items()}
    # largest-remainder rounding so cells sum to n exactly
    raw = {k: v * n for k, v in probs.items()}
    counts = {k: int(math.floor(v)) for k, v in raw.items()}
    rest = n - sum(counts.values())
    for k in sorted(raw, key=lambda k: (-(raw[k] - counts[k]), k))[:rest]:
        counts[k] += 1
    return counts


def _assign_bits(cfg: DatasetConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    names = [f.name for f in cfg.features]
    k = len(names)
    n = cfg.n
    bits = np.zeros((n, k), dtype=np.int64)
    ti = names.index(cfg.task)
    task_spec = cfg.features[ti]

    pair_counts: dict[str, dict[str, int]] = {}
    for name, cells in cfg.cell_counts.items():
        pair_counts[name] = {key: int(cells.get(key, 0)) for key in ("FF", "FT", "TF", "TT")}
    if pair_counts:
        first = next(iter(pair_counts.values()))
        n_task = first["TF"] + first["TT"]
        for name, c in pair_counts.items():
            if c["TF"] + c["TT"] != n_task:
                raise InfeasibleError(f"cell counts for {name!r} imply a different task marginal")
    else:
        n_task = _split_count(n, task_spec.prevalence)

    order = rng.permutation(n)
    task_on = np.zeros(n, dtype=bool)
    task_on[order[:n_task]] = True
    bits[:, ti] = task_on
    pos_idx = np.flatnonzero(task_on)
    neg_idx = np.flatnonzero(~task_on)

    for j, spec in enumerate(cfg.features):
        if j == ti:
            continue
        if spec.name in pair_counts:
            c = pair_counts[spec.name]
        else:
            rho = cfg.correlations.get(spec.name, 0.0)
            p_task = n_task / n if n else 0.0
            c = _joint_with_task(n, p_task, spec.prevalence, rho)
            # keep the task marginal that was already drawn
            c_tt = min(c["TT"], n_task)
            c_ft = min(c["FT"], n - n_task)
            c = {"TT": c_tt, "TF": n_task - c_tt, "FT": c_ft, "FF": n - n_task - c_ft}
        on = np.zeros(n, dtype=bool)
        on[rng.permutation(pos_idx)[: c["TT"]]] = True
        on[rng.permutation(neg_idx)[: c["FT"]]] = True
        bits[:, j] = on

    y = bits[:, ti].copy()
    flips = _split_count(n, cfg.label_noise)
    if flips:
        y[rng.permutation(n)[:flips]] ^= 1
    return y, bits


def render(bits: np.ndarray, cfg: DatasetConfig, rng: np.random.Generator) -> np.ndarray:
    """Draw images for annotation rows ``bits[N,k]``."""
    c, h, w = cfg.image_size
    n = len(bits)
    x = np.full((n, c, h, w), BACKGROUND)
    for j, spec in enumerate(cfg.features):
        on = bits[:, j].astype(bool)
        if not on.any():
            continue
        if spec.kind == "pattern":
            m = glyph_mask(spec.glyph, cfg.image_size)
            channels = list(spec.glyph.channels) or list(range(c))
            sel = x[on]
            for ch in channels:
                sel[:, ch, m] = BACKGROUND + CONTRAST
            x[on] = sel
    for j, spec in enumerate(cfg.features):
        if spec.kind != "attribute":
            continue
        on = bits[:, j].astype(bool)
        tint = np.broadcast_to(np.asarray(spec.tint, dtype=np.float64), (c,))
        x[on] += tint[None, :, None, None]
    if cfg.noise > 0:
        x += rng.uniform(-cfg.noise, cfg.noise, size=x.shape)
    return np.clip(x, 0.0, 1.0)


def _drawn_bits(bits: np.ndarray, cfg: DatasetConfig, rng: np.random.Generator) -> np.ndarray:
    """Which annotated features are actually drawn: a pattern with visibility
    ``v`` is left out of an exact ``round((1 - v) * count)`` of its carriers."""
    drawn = bits.copy()
    for j, spec in enumerate(cfg.features):
        if spec.visibility >= 1.0:
            continue
        on = np.flatnonzero(bits[:, j])
        hide = _split_count(len(on), 1.0 - spec.visibility)
        drawn[rng.permutation(on)[:hide], j] = 0
    return drawn


def generate_dataset(cfg: DatasetConfig) -> Dataset:
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    y, bits = _assign_bits(cfg, rng)
    x = render(_drawn_bits(bits, cfg, np.random.default_rng([cfg.seed, 0x1D5])), cfg, np.random.default_rng([cfg.seed, 0xA015E]))
    return Dataset(x, y, bits, [f.name for f in cfg.features], cfg)


def generate_one_of(cfg: DatasetConfig, cells: Sequence[tuple[int, int]] | None = None) -> Dataset:
    """Multiclass variant: every instance shows exactly one pattern feature and
    its label is that feature's index.  Classes are balanced to within one
    instance; ``cfg.task`` is ignored.

    With ``cells``, each glyph is drawn in a grid cell picked uniformly from
    ``cells`` instead of at its anchor, so classes differ by shape only.
    """
    k = len(cfg.features)
    if any(f.kind != "pattern" for f in cfg.features):
        raise ValueError("one-of datasets use pattern features only")
    rng = np.random.default_rng([cfg.seed, 0x0C1A55])
    y = rng.permutation(np.arange(cfg.n) % k)
    bits = np.eye(k, dtype=np.int64)[y]
    if cells is None:
        x = render(bits, cfg, np.random.default_rng([cfg.seed, 0xA015E]))
        return Dataset(x, y.astype(np.int64), bits, [f.name for f in cfg.features], cfg)
    cells = [tuple(int(v) for v in c) for c in cells]
    for r, c in cells:
        if not (0 <= r < GRID and 0 <= c < GRID):
            raise ValueError(f"cell ({r}, {c}) outside the {GRID}x{GRID} grid")
    ch, h, w = cfg.image_size
    where = rng.integers(0, len(cells), size=cfg.n)
    x = np.full((cfg.n, ch, h, w), BACKGROUND)
    for j, spec in enumerate(cfg.features):
        g = spec.glyph
        channels = list(g.channels) or list(range(ch))
        for p, (r, c) in enumerate(cells):
            sel = np.flatnonzero((y == j) & (where == p))
            if len(sel) == 0:
                continue
            m = glyph_mask(Glyph(g.shape, r, c, g.size, g.channels), cfg.image_size)
            block = x[sel]
            for chan in channels:
                block[:, chan, m] = BACKGROUND + CONTRAST
            x[sel] = block
    noise_rng = np.random.default_rng([cfg.seed, 0xA015E])
    if cfg.noise > 0:
        x += noise_rng.uniform(-cfg.noise, cfg.noise, size=x.shape)
    x = np.clip(x, 0.0, 1.0)
    return Dataset(x, y.astype(np.int64), bits, [f.name for f in cfg.features], cfg)


def shape_region(glyph: Glyph, cells: Sequence[tuple[int, int]], image_size) -> np.ndarray:
    """Union of the glyph's pixel masks over every cell it may be drawn in."""
    out = np.zeros(image_size[1:], dtype=bool)
    for r, c in cells:
        out |= glyph_mask(Glyph(glyph.shape, r, c, glyph.size, glyph.channels), image_size)
    return out


def detect_features(x: np.ndarray, cfg: DatasetConfig) -> np.ndarray:
    """Recover pattern-feature bits from pixels alone (attribute columns are -1)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    out = np.full((len(x), len(cfg.features)), -1, dtype=np.int64)
    for j, spec in enumerate(cfg.features):
        if spec.kind != "pattern":
            continue
        m = glyph_mask(spec.glyph, cfg.image_size)
        cell = region_mask(spec.glyph, cfg.image_size) & ~m
        channels = list(spec.glyph.channels) or list(range(x.shape[1]))
        gray = x[:, channels].mean(axis=1)
        inside = gray[:, m].mean(axis=1)
        ref = gray[:, cell].mean(axis=1) if cell.any() else np.median(gray.reshape(len(x), -1), axis=1)
        out[:, j] = (inside - ref > CONTRAST / 2).astype(np.int64)
    return out


def split(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    perm = np.random.default_rng([seed, 0x5911]).permutation(len(ds))
    cut = _split_count(len(ds), train_fraction)
    return ds.subset(np.sort(perm[:cut])), ds.subset(np.sort(perm[cut:]))


def remove_instances(ds: Dataset, predicate: Callable[[np.ndarray], bool]) -> Dataset:
    """Keep only instances whose annotation vector fails ``predicate``."""
    keep = [i for i in range(len(ds)) if not predicate(ds.f[i])]
    return ds.subset(keep)


# ---------------------------------------------------------------------------
# persistence


def save_dataset(ds: Dataset, directory) -> None:
    """Write ``manifest.json`` and ``data.bin`` under ``directory``.

    ``data.bin`` layout: magic ``FUDS``, then little-endian u32 version, n, C,
    H, W, k; then float64 LE row-major x, y and f arrays in that order.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n, c, h, w = ds.x.shape
    k = ds.f.shape[1]
    header = DATASET_MAGIC + struct.pack("<6I", DATASET_VERSION, n, c, h, w, k)
    payload = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes() for a in (ds.x, ds.y.astype(np.float64), ds.f.astype(np.float64))
    )
    _atomic_write(directory / "data.bin", header + payload)
    manifest = {
        "format": "FUDS",
        "version": DATASET_VERSION,
        "n": n,
        "image_size": [c, h, w],
        "features": ds.feature_names,
        "label_counts": {str(int(v)): int(np.sum(ds.y == v)) for v in np.unique(np.r_[ds.y, 0, 1])},
        "feature_counts": {name: int(ds.f[:, j].sum()) for j, name in enumerate(ds.feature_names)},
        "config": ds.config.to_dict() if ds.config else None,
    }
    _atomic_write(directory / "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    raw = (directory / "data.bin").read_bytes()
    if len(raw) < 28 or raw[:4] != DATASET_MAGIC:
        raise FormatError("not a FUDS dataset file")
    version, n, c, h, w, k = struct.unpack("<6I", raw[4:28])
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    expected = 28 + 8 * (n * c * h * w + n + n * k)
    if len(raw) != expected:
        raise FormatError(f"dataset file has {len(raw)} bytes, expected {expected}")
    arr = np.frombuffer(raw, dtype="<f8", offset=28).astype(np.float64)
    x = arr[: n * c * h * w].reshape(n, c, h, w)
    y = arr[n * c * h * w : n * c * h * w + n].astype(np.int64)
    f = arr[n * c * h * w + n :].reshape(n, k).astype(np.int64)
    cfg = DatasetConfig.from_dict(manifest["config"]) if manifest.get("config") else None
    return Dataset(x, y, f, manifest["features"], cfg)


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


# ---------------------------------------------------------------------------
# presets


def standard_features(
    names: Sequence[str] = ("task", "target", "other"), colored: bool = False, glyph_size: int = 6
) -> list[FeatureSpec]:
    """Pattern features on distinct, well-separated cells: square, cross, triangle.

    With ``colored`` the i-th glyph paints only channel ``i % 3`` (use 3-channel
    images), which gives every pattern a distinct signature a filter can key on.
    """
    anchors = [("square", 0, 0), ("cross", 3, 3), ("triangle", 0, 3), ("square", 3, 0)]
    out = []
    for i, (name, (shape, r, c)) in enumerate(zip(names, anchors)):
        channels = (i % 3,) if colored else ()
        out.append(FeatureSpec(name=name, kind="pattern", glyph=Glyph(shape, r, c, glyph_size, channels)))
    return out


# (task, bias) cell counts of biased training sets: agreement cells FT/TF dominate
BIASED_COUNTS = {
    "heavy": {"FF": 2000, "FT": 16000, "TF": 16000, "TT": 2000},
    "moderate": {"FF": 2000, "FT": 10000, "TF": 10000, "TT": 2000},
}
