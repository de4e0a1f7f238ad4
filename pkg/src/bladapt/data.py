"""
Synthetic multi-scene low-light benchmark, image I/O and the on-disk manifest.

Normal-light images are procedural (smooth gradient, random rectangles and
ellipses, band-limited texture). Each scene darkens them with its own curve
and noise model. Stored images are 8-bit quantized, so a benchmark written to
disk and read back is bit-identical to the in-memory one.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import gaussian_filter

IMAGE_SIZE = 64
SCALES = {"tiny": (50, 50, 10), "small": (200, 200, 40)}
VAL_FRACTION = 0.2


class ImageFormatError(ValueError):
    """Unsupported, unreadable or truncated image file."""


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Named, reproducible random sub-stream of a run seed."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode()), *extra]))


@dataclass(frozen=True)
class SceneSpec:
    scene_id: str
    gamma: Optional[float] = None
    linear_scale: Optional[float] = None
    noise: str = "none"
    noise_sigma: float = 0.0
    paired: bool = True
    learnable: bool = False
    pools: tuple = SCALES["tiny"]

    def __post_init__(self):
        if (self.gamma is None) == (self.linear_scale is None):
            raise ValueError(f"scene {self.scene_id}: exactly one of gamma / linear_scale must be set")
        if self.gamma is not None and self.gamma < 1:
            raise ValueError(f"scene {self.scene_id}: gamma must be >= 1")
        if self.linear_scale is not None and not 0 < self.linear_scale < 1:
            raise ValueError(f"scene {self.scene_id}: linear_scale must lie in (0, 1)")
        if self.noise not in ("none", "gaussian", "speckle"):
            raise ValueError(f"scene {self.scene_id}: unknown noise model {self.noise!r}")
        if not 0.0 <= self.noise_sigma <= 0.2:
            raise ValueError(f"scene {self.scene_id}: noise sigma must lie in [0, 0.2]")
        if len(self.pools) != 3 or min(self.pools) <= 0:
            raise ValueError(f"scene {self.scene_id}: pool sizes must be three positive ints")

    @property
    def noisy(self) -> bool:
        return self.noise != "none" and self.noise_sigma > 0

    def degradation_text(self) -> str:
        return f"gamma={self.gamma:g}" if self.gamma is not None else f"linear={self.linear_scale:g}"


@dataclass
class ScenePair:
    id: str
    low: np.ndarray
    gt: Optional[np.ndarray]
    noise_seed: int = 0


@dataclass
class SceneDataset:
    spec: SceneSpec
    learn_tr: list = field(default_factory=list)
    learn_val: list = field(default_factory=list)
    adapt_tr: list = field(default_factory=list)
    adapt_val: list = field(default_factory=list)
    test: list = field(default_factory=list)

    @property
    def noisy(self) -> bool:
        return self.spec.noisy

    @property
    def scene_id(self) -> str:
        return self.spec.scene_id

    def splits(self) -> dict:
        return {
            "learn_tr": self.learn_tr,
            "learn_val": self.learn_val,
            "adapt_tr": self.adapt_tr,
            "adapt_val": self.adapt_val,
            "test": self.test,
        }


def quantize(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def generate_base_image(seed: int, H: int = IMAGE_SIZE, W: int = IMAGE_SIZE) -> np.ndarray:
    """A normal-light [3,H,W] image with values in [0.2, 1.0]."""
    if H % 16 or W % 16:
        raise ValueError(f"H={H}, W={W} must be divisible by 16")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, H), np.linspace(0, 1, W), indexing="ij")

    theta = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(theta) * xx + np.sin(theta) * yy
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    c0, c1 = rng.uniform(0.3, 0.9, 3), rng.uniform(0.3, 0.9, 3)
    img = c0[:, None, None] + (c1 - c0)[:, None, None] * ramp[None]

    for _ in range(rng.integers(3, 7)):
        color = rng.uniform(0.2, 1.0, 3)
        cy, cx = rng.uniform(0, 1, 2)
        ry, rx = rng.uniform(0.08, 0.3, 2)
        if rng.random() < 0.5:
            mask = (np.abs(yy - cy) < ry) & (np.abs(xx - cx) < rx)
        else:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1.0
        alpha = rng.uniform(0.6, 1.0)
        img = np.where(mask[None], (1 - alpha) * img + alpha * color[:, None, None], img)

    texture = gaussian_filter(rng.standard_normal((3, H, W)), sigma=(0, 1.5, 1.5))
    texture /= max(texture.std(), 1e-9)
    img = img + rng.uniform(0.02, 0.06) * texture
    return np.clip(img, 0.2, 1.0).astype(np.float32)


def degrade(gt: np.ndarray, spec: SceneSpec, seed: int) -> np.ndarray:
    """Darken ``gt`` with the scene curve and add its noise; clipped to [0, 1]."""
    gt = np.asarray(gt, dtype=np.float64)
    dark = gt ** spec.gamma if spec.gamma is not None else gt * spec.linear_scale
    if spec.noisy:
        n = np.random.default_rng(seed).standard_normal(gt.shape) * spec.noise_sigma
        dark = dark + n if spec.noise == "gaussian" else dark * (1.0 + n)
    return np.clip(dark, 0.0, 1.0).astype(np.float32)


def default_scenes(scale: str = "tiny") -> list:
    pools = SCALES[scale]
    return [
        SceneSpec("A", gamma=2.5, paired=True, learnable=True, pools=pools),
        SceneSpec("B", gamma=3.0, noise="gaussian", noise_sigma=0.05, paired=True, learnable=True, pools=pools),
        SceneSpec("C", gamma=3.5, paired=True, pools=pools),
        SceneSpec("D", linear_scale=0.2, noise="speckle", noise_sigma=0.03, paired=True, pools=pools),
        SceneSpec("E", gamma=4.0, noise="gaussian", noise_sigma=0.08, paired=False, pools=pools),
    ]


def _split(pairs: list) -> tuple:
    n_val = max(1, int(round(len(pairs) * VAL_FRACTION)))
    return pairs[: len(pairs) - n_val], pairs[len(pairs) - n_val:]


def build_scene(spec: SceneSpec, seed: int, scene_index: int, size: int = IMAGE_SIZE) -> SceneDataset:
    pools = {}
    for phase_index, (phase, count) in enumerate(zip(("learn", "adapt", "test"), spec.pools)):
        pairs = []
        for i in range(count):
            seeds = np.random.SeedSequence([seed, scene_index, phase_index, i]).generate_state(2)
            gt = quantize(generate_base_image(int(seeds[0]), size, size))
            low = quantize(degrade(gt, spec, int(seeds[1])))
            pairs.append(ScenePair("", low, gt if spec.paired else None, int(seeds[1])))
        pools[phase] = pairs
    learn_tr, learn_val = _split(pools["learn"])
    adapt_tr, adapt_val = _split(pools["adapt"])
    ds = SceneDataset(spec, learn_tr, learn_val, adapt_tr, adapt_val, pools["test"])
    for split, pairs in ds.splits().items():
        for i, pair in enumerate(pairs):
            pair.id = f"{spec.scene_id}-{split}-{i:04d}"
    return ds


def build_benchmark(seed: int, scale: str = "tiny", size: int = IMAGE_SIZE) -> list:
    if scale not in SCALES:
        raise ValueError(f"unknown scale {scale!r}; choose from {sorted(SCALES)}")
    return [build_scene(spec, seed, k, size) for k, spec in enumerate(default_scenes(scale))]


def stack_low(pairs: Sequence[ScenePair]) -> np.ndarray:
    return np.stack([p.low for p in pairs])


def stack_gt(pairs: Sequence[ScenePair]) -> np.ndarray:
    if any(p.gt is None for p in pairs):
        raise ValueError("batch contains unpaired images")
    return np.stack([p.gt for p in pairs])


def histogram_chi2(a: Iterable[np.ndarray], b: Iterable[np.ndarray], bins: int = 32) -> float:
    """Symmetric chi-square distance between normalized intensity histograms."""
    ha, _ = np.histogram(np.concatenate([np.ravel(x) for x in a]), bins=bins, range=(0, 1))
    hb, _ = np.histogram(np.concatenate([np.ravel(x) for x in b]), bins=bins, range=(0, 1))
    pa, pb = ha / ha.sum(), hb / hb.sum()
    denom = pa + pb
    live = denom > 0
    return float(0.5 * np.sum((pa[live] - pb[live]) ** 2 / denom[live]))


# ---------------------------------------------------------------- image I/O

def save_image(img: np.ndarray, path) -> None:
    """Write a [3,H,W] array in [0,1] as 8-bit PNG or binary PPM (by suffix)."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in (".png", ".ppm"):
        raise ImageFormatError(f"unsupported image suffix {suffix!r}")
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"save_image expects [3,H,W], got {arr.shape}")
    u8 = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(u8, mode="RGB").save(path, format="PNG" if suffix == ".png" else "PPM")


def load_image(path) -> np.ndarray:
    """Read an 8-bit RGB PNG or P6 PPM into a float32 [3,H,W] array in [0,1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "PPM") or im.mode != "RGB":
                raise ImageFormatError(f"{path}: unsupported format {im.format}/{im.mode}")
            im.load()
            arr = np.asarray(im, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise ImageFormatError(f"{path}: unrecognised image data") from exc
    except (OSError, SyntaxError) as exc:
        raise ImageFormatError(f"{path}: truncated or corrupt image ({exc})") from exc
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0)


# ---------------------------------------------------------------- manifest

MANIFEST = "manifest.csv"
SCENES = "scenes.csv"
SCENE_FIELDS = ["scene_id", "degradation", "noise", "noise_sigma", "paired", "learnable", "pools"]


def write_benchmark(datasets: Sequence[SceneDataset], root) -> Path:
    """Write images, ``scenes.csv`` and ``manifest.csv`` under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / SCENES, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCENE_FIELDS)
        for ds in datasets:
            s = ds.spec
            w.writerow([s.scene_id, s.degradation_text(), s.noise, f"{s.noise_sigma:g}", int(s.paired),
                        int(s.learnable), "/".join(str(n) for n in s.pools)])
    with open(root / MANIFEST, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scene_id", "split", "index", "low_path", "gt_path"])
        for ds in datasets:
            for split, pairs in ds.splits().items():
                for i, pair in enumerate(pairs):
                    stem = f"images/{ds.scene_id}/{split}_{i:04d}"
                    save_image(pair.low, root / f"{stem}_low.png")
                    row = [ds.scene_id, split, i, f"{stem}_low.png"]
                    if pair.gt is not None:
                        save_image(pair.gt, root / f"{stem}_gt.png")
                        row.append(f"{stem}_gt.png")
                    w.writerow(row)
    return root / MANIFEST


def _parse_spec(row: dict) -> SceneSpec:
    kind, value = row["degradation"].split("=")
    kwargs = {"gamma": float(value)} if kind == "gamma" else {"linear_scale": float(value)}
    return SceneSpec(
        row["scene_id"],
        noise=row["noise"],
        noise_sigma=float(row["noise_sigma"]),
        paired=bool(int(row["paired"])),
        learnable=bool(int(row["learnable"])),
        pools=tuple(int(n) for n in row["pools"].split("/")),
        **kwargs,
    )


def load_benchmark(root) -> list:
    root = Path(root)
    for name in (SCENES, MANIFEST):
        if not (root / name).exists():
            raise FileNotFoundError(f"missing benchmark file {root / name}; run `bladapt gen` first")
    with open(root / SCENES, newline="") as fh:
        specs = [_parse_spec(r) for r in csv.DictReader(fh)]
    datasets = {s.scene_id: SceneDataset(s) for s in specs}
    with open(root / MANIFEST, newline="") as fh:
        for row in csv.reader(fh):
            if row[0] == "scene_id":
                continue
            scene, split, idx, low_path = row[:4]
            gt = load_image(root / row[4]) if len(row) > 4 and row[4] else None
            ds = datasets[scene]
            pair = ScenePair(f"{scene}-{split}-{int(idx):04d}", load_image(root / low_path), gt)
            getattr(ds, split).append(pair)
    return [datasets[s.scene_id] for s in specs]
