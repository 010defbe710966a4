"""Synthetic paired datasets and PNG helpers."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

TASKS = ("translation", "saliency")

# distractor palette, all far from pure red
_PALETTE = np.array([
    [0.1, 0.7, 0.2], [0.15, 0.3, 0.9], [0.9, 0.85, 0.15], [0.6, 0.2, 0.8],
    [0.1, 0.75, 0.8], [0.85, 0.85, 0.85], [0.95, 0.55, 0.1],
])
_RED = np.array([0.9, 0.05, 0.05])


@dataclass
class PairedSet:
    task: str
    inputs: np.ndarray   # (n, 3, hw, hw)
    targets: np.ndarray  # (n, 3 or 1, hw, hw)

    def __len__(self) -> int:
        return len(self.inputs)


def _shape_mask(kind: str, cy: float, cx: float, r: float, hw: int) -> np.ndarray:
    yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float64)
    if kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "square":
        return (np.abs(yy - cy) <= r * 0.85) & (np.abs(xx - cx) <= r * 0.85)
    # diamond
    return np.abs(yy - cy) + np.abs(xx - cx) <= r * 1.2


def _erode(mask: np.ndarray, width: int) -> np.ndarray:
    out = mask.copy()
    for _ in range(width):
        inner = out.copy()
        inner[1:, :] &= out[:-1, :]
        inner[:-1, :] &= out[1:, :]
        inner[:, 1:] &= out[:, :-1]
        inner[:, :-1] &= out[:, 1:]
        inner[0, :] = inner[-1, :] = inner[:, 0] = inner[:, -1] = False
        out = inner
    return out


def _background(rng: np.random.Generator, hw: int, noise: float) -> np.ndarray:
    base = rng.uniform(0.1, 0.45, size=(3, 1, 1))
    ramp = np.linspace(-0.1, 0.1, hw)
    grad = ramp[None, :, None] * rng.uniform(-1, 1) + ramp[None, None, :] * rng.uniform(-1, 1)
    img = base + grad + rng.normal(0.0, noise, size=(3, hw, hw))
    return np.clip(img, 0.0, 1.0)


def _place(rng, hw, r, placed, min_gap=2.0):
    for _ in range(100):
        cy, cx = rng.uniform(r + 1, hw - r - 1, size=2)
        if all(np.hypot(cy - py, cx - px) > r + pr + min_gap for py, px, pr in placed):
            return cy, cx
    return cy, cx


def _saliency_pair(rng: np.random.Generator, hw: int):
    img = _background(rng, hw, 0.04)
    n_shapes = int(rng.integers(3, 6))
    red_idx = int(rng.integers(0, n_shapes))
    placed = []
    red_center = None
    red_r = None
    for k in range(n_shapes):
        r = rng.uniform(hw * 0.06, hw * 0.12)
        cy, cx = _place(rng, hw, r, placed)
        placed.append((cy, cx, r))
        mask = _shape_mask(("circle", "square", "diamond")[int(rng.integers(0, 3))], cy, cx, r, hw)
        color = _RED if k == red_idx else _PALETTE[int(rng.integers(0, len(_PALETTE)))]
        color = np.clip(color + rng.normal(0, 0.03, 3), 0, 1)
        img[:, mask] = color[:, None]
        if k == red_idx:
            red_center, red_r = (cy, cx), r
    yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float64)
    sigma = 1.2 * red_r
    dens = np.exp(-((yy - red_center[0]) ** 2 + (xx - red_center[1]) ** 2) / (2 * sigma ** 2))
    dens /= dens.sum()
    return img, dens[None]


def _translation_pair(rng: np.random.Generator, hw: int):
    img = _background(rng, hw, 0.08)
    target = np.zeros((3, hw, hw))
    placed = []
    for _ in range(int(rng.integers(2, 5))):
        r = rng.uniform(hw * 0.08, hw * 0.16)
        cy, cx = _place(rng, hw, r, placed)
        placed.append((cy, cx, r))
        mask = _shape_mask(("circle", "square", "diamond")[int(rng.integers(0, 3))], cy, cx, r, hw)
        outline = mask & ~_erode(mask, 2)
        color = np.vstack([_PALETTE, _RED])[int(rng.integers(0, len(_PALETTE) + 1))]
        img[:, outline] = color[:, None]
        target[:, mask] = color[:, None]
    return img, target


def gen_dataset(task: str, n: int, hw: int = 64, seed: int = 0) -> PairedSet:
    """Deterministic synthetic pairs.

    ``translation``: shape outlines on a noisy background -> filled shapes.
    ``saliency``: multi-shape scenes -> Gaussian density (sums to 1) on the red shape.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    if n < 1:
        raise ValueError("n must be >= 1")
    if hw < 32 or hw & (hw - 1):
        raise ValueError(f"hw must be a power of two >= 32, got {hw}")
    rng = np.random.default_rng(seed)
    make = _saliency_pair if task == "saliency" else _translation_pair
    pairs = [make(rng, hw) for _ in range(n)]
    inputs = np.stack([p[0] for p in pairs]).astype(np.float64)
    targets = np.stack([p[1] for p in pairs]).astype(np.float64)
    return PairedSet(task, inputs, targets)


def model_targets(task: str, targets: np.ndarray) -> np.ndarray:
    """Targets in model output space: saliency densities are rescaled to peak 1."""
    if task == "saliency":
        peak = targets.max(axis=(-2, -1), keepdims=True)
        return targets / peak
    return targets


def save_dataset(ds: PairedSet, out: str | Path) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    np.savez(out / f"{ds.task}.npz", inputs=ds.inputs, targets=ds.targets)
    return out / f"{ds.task}.npz"


def load_dataset(path: str | Path, task: str) -> PairedSet:
    with np.load(path) as z:
        return PairedSet(task, z["inputs"], z["targets"])


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(image: np.ndarray, path: str | Path) -> None:
    """Write a ``(C, H, W)`` image in [0, 1] with C in {1, 3}."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ValueError(f"expected (1|3, H, W) image, got shape {image.shape}")
    px = to_uint8(image)
    if px.shape[0] == 1:
        Image.fromarray(px[0], mode="L").save(path, format="PNG")
    else:
        Image.fromarray(px.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, SyntaxError) as exc:
        raise ValueError(f"malformed PNG {path}: {exc}") from exc
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1).copy()
