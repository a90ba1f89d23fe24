"""Synthetic datasets that exercise each decomposition mode.

* :func:`synth_correlated_classes` -- class-1 cores wrapped in class-2 rings
  (spatially correlated classes, for class decomposition);
* :func:`synth_shape_mix` -- filled ellipses next to U/L-shaped objects
  (for shape decomposition);
* :func:`synth_count_mix` -- images with one or several separated objects
  (for image-level decomposition).

Every generator is a pure function of its arguments: sample ``i`` is drawn
from ``np.random.default_rng([seed, i])``, so a prefix of a larger dataset
equals the smaller dataset.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import Sample
from .errors import UnsupportedDimensionError


@dataclass(frozen=True)
class CorrelatedConfig:
    n_objects: tuple[int, int] = (1, 3)
    core_radius: tuple[float, float] = (4.0, 8.0)
    ring_width: float = 3.0
    intensities: tuple[float, float, float] = (0.2, 0.5, 0.8)
    noise: float = 0.08

    def expected_class_ratio(self, ndim: int = 2) -> float:
        """Expected class-2 / class-1 pixel ratio for continuous discs (balls)
        with core radius uniform on ``core_radius``."""
        a, b = self.core_radius
        w = self.ring_width
        p = ndim

        def moment(shift: float) -> float:
            # E[(r + shift)^p] for r ~ U[a, b]
            return ((b + shift) ** (p + 1) - (a + shift) ** (p + 1)) / ((p + 1) * (b - a))

        return (moment(w) - moment(0.0)) / moment(0.0)


def _ball(radius: float, ndim: int, offset, size: int | None = None) -> np.ndarray:
    """Boolean mask of pixels whose centres lie within ``radius`` of a centre
    at ``offset`` (fractional, relative to the box origin)."""
    if size is None:
        size = int(np.ceil(2 * radius)) + 3
    grids = np.meshgrid(*[np.arange(size) for _ in range(ndim)], indexing="ij")
    d2 = sum((g - o) ** 2 for g, o in zip(grids, offset))
    return d2 <= radius * radius


def _place(canvas: np.ndarray, mask: np.ndarray, rng, occupied: np.ndarray, gap: int, tries: int = 200):
    """Try to drop ``mask`` somewhere on ``canvas`` with at least ``gap``
    background pixels to every occupied pixel. Returns the origin or None."""
    limits = [c - m for c, m in zip(canvas.shape, mask.shape)]
    if any(lim < 0 for lim in limits):
        return None
    for _ in range(tries):
        origin = tuple(int(rng.integers(0, lim + 1)) for lim in limits)
        box = tuple(slice(o, o + m) for o, m in zip(origin, mask.shape))
        if not occupied[box][mask].any():
            grown = ndimage.binary_dilation(
                np.pad(mask, gap), structure=np.ones((3,) * mask.ndim, bool), iterations=gap
            )
            lo = [o - gap for o in origin]
            src = tuple(
                slice(max(0, -l), g - max(0, l + g - c))
                for l, g, c in zip(lo, grown.shape, canvas.shape)
            )
            dst = tuple(slice(max(0, l), min(c, l + g)) for l, g, c in zip(lo, grown.shape, canvas.shape))
            occupied[dst] |= grown[src]
            return origin
    return None


def _render(label: np.ndarray, intensities, noise: float, rng) -> np.ndarray:
    image = np.asarray(intensities, dtype=np.float64)[label]
    image = image + rng.normal(0.0, noise, size=label.shape)
    return np.clip(image, 0.0, 1.0)


def synth_correlated_classes(n: int, dims=(64, 64), seed: int = 0, config: CorrelatedConfig | None = None) -> list[Sample]:
    """K=2 data: class-1 blobs, each wrapped by its own class-2 annulus."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    cfg = config or CorrelatedConfig()
    dims = tuple(int(d) for d in dims)
    ndim = len(dims)
    samples = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        label = np.zeros(dims, dtype=np.int64)
        occupied = np.zeros(dims, dtype=bool)
        count = int(rng.integers(cfg.n_objects[0], cfg.n_objects[1] + 1))
        objects = []
        for _ in range(count):
            r = float(rng.uniform(*cfg.core_radius))
            outer = r + cfg.ring_width
            off = [outer + 1 + float(rng.random()) for _ in range(ndim)]
            ring = _ball(outer, ndim, off)
            core = _ball(r, ndim, off, size=ring.shape[0])
            origin = _place(label, ring, rng, occupied, gap=2)
            if origin is None:
                continue
            box = tuple(slice(o, o + s) for o, s in zip(origin, ring.shape))
            label[box][ring] = 2
            label[box][core] = 1
            objects.append({"core_radius": r, "pixel": [o + int(c) for o, c in zip(origin, off)]})
        image = _render(label, cfg.intensities, cfg.noise, rng)
        samples.append(Sample(image, label, f"corr_{i:05d}", {"objects": objects}))
    return samples


def _ellipse(rng) -> np.ndarray:
    a, b = rng.uniform(3.5, 7.5, size=2)
    theta = rng.uniform(0, np.pi)
    size = int(np.ceil(2 * max(a, b))) + 3
    c = (size - 1) / 2 + rng.uniform(-0.5, 0.5, size=2)
    r, col = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    dr, dc = r - c[0], col - c[1]
    u = dr * np.cos(theta) + dc * np.sin(theta)
    v = -dr * np.sin(theta) + dc * np.cos(theta)
    mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    rows, cols = np.nonzero(mask)
    return mask[rows.min() : rows.max() + 1, cols.min() : cols.max() + 1]


def _concave(rng) -> tuple[np.ndarray, str]:
    kind = "U" if rng.random() < 0.5 else "L"
    h, w = (int(v) for v in rng.integers(9, 17, size=2))
    t = int(rng.integers(2, min(h, w) // 3 + 1))
    mask = np.zeros((h, w), dtype=bool)
    mask[h - t :, :] = True
    mask[:, :t] = True
    if kind == "U":
        mask[:, w - t :] = True
    return np.rot90(mask, int(rng.integers(0, 4))).copy(), kind


def synth_shape_mix(n: int, dims=(64, 64), seed: int = 0, n_objects=(2, 4), noise: float = 0.08) -> list[Sample]:
    """K=1 data mixing convex ellipses and concave U/L shapes.

    ``meta["objects"]`` records each object's intended kind ("convex" or
    "concave") and one of its pixels.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    dims = tuple(int(d) for d in dims)
    if len(dims) != 2:
        raise UnsupportedDimensionError("shape-mix data is 2D only")
    samples = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        label = np.zeros(dims, dtype=np.int64)
        occupied = np.zeros(dims, dtype=bool)
        objects = []
        for _ in range(int(rng.integers(n_objects[0], n_objects[1] + 1))):
            if rng.random() < 0.5:
                mask, shape, kind = _ellipse(rng), "ellipse", "convex"
            else:
                (mask, shape), kind = _concave(rng), "concave"
            origin = _place(label, mask, rng, occupied, gap=2)
            if origin is None:
                continue
            box = tuple(slice(o, o + s) for o, s in zip(origin, mask.shape))
            label[box][mask] = 1
            first = np.argwhere(mask)[0]
            objects.append({"kind": kind, "shape": shape, "pixel": [int(o + f) for o, f in zip(origin, first)]})
        image = _render(label, (0.3, 0.7), noise, rng)
        samples.append(Sample(image, label, f"shape_{i:05d}", {"objects": objects}))
    return samples


def synth_count_mix(n: int, dims=(64, 64), seed: int = 0, p_single: float = 0.5, noise: float = 0.08) -> list[Sample]:
    """K=1 data with one object (probability ``p_single``) or 2-5 objects.

    Objects keep at least two background pixels between each other, so the
    object count is the same under every connectivity.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not 0.0 <= p_single <= 1.0:
        raise ValueError(f"p_single must lie in [0, 1], got {p_single}")
    dims = tuple(int(d) for d in dims)
    ndim = len(dims)
    r_max = max(2.0, min(8.0, min(dims) / 8))
    samples = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        want = 1 if rng.random() < p_single else int(rng.integers(2, 6))
        for _attempt in range(100):
            label = np.zeros(dims, dtype=np.int64)
            occupied = np.zeros(dims, dtype=bool)
            objects = []
            for _ in range(want):
                r = float(rng.uniform(max(1.5, r_max / 2), r_max))
                off = [r + 1 + float(rng.random()) for _ in range(ndim)]
                mask = _ball(r, ndim, off)
                origin = _place(label, mask, rng, occupied, gap=2)
                if origin is None:
                    break
                box = tuple(slice(o, o + s) for o, s in zip(origin, mask.shape))
                label[box][mask] = 1
                objects.append({"radius": r, "pixel": [o + int(c) for o, c in zip(origin, off)]})
            if len(objects) == want:
                break
        else:
            raise ValueError(f"cannot fit {want} separated objects into dims {dims}")
        image = _render(label, (0.3, 0.7), noise, rng)
        samples.append(Sample(image, label, f"count_{i:05d}", {"objects": objects, "n_objects": want}))
    return samples


GENERATORS = {
    "correlated": synth_correlated_classes,
    "shapes": synth_shape_mix,
    "counts": synth_count_mix,
}
GENERATOR_K = {"correlated": 2, "shapes": 1, "counts": 1}
