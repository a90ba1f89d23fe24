"""Annotation-map decomposition: by class, by object convexity, by object count.

Label maps are integer arrays with 0 as background and 1..K as foreground
classes. Each decomposition returns a :class:`DecompositionResult` whose
``sub_maps`` are the training targets of the stage-1 modules:

* ``class``: K binary maps, map k is 1 where the source equals k+1;
* ``shape``: (convex-like, concave-like) maps keeping source labels;
* ``image_level``: (single-object, multiple-object) maps keeping source labels;
* ``identity``: every sub-map is the source itself (the no-decomposition arm).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ._validation import check_label_map
from .errors import ShapeError, UnsupportedDimensionError

METHODS = ("class", "shape", "image_level", "identity")
DEFAULT_T_SHAPE = 0.9

_CONNECTIVITY_RANK = {2: {4: 1, 8: 2}, 3: {6: 1, 26: 3}}


def default_connectivity(ndim: int) -> int:
    return 8 if ndim == 2 else 26


@dataclass
class ObjectComponent:
    """One maximal connected same-label region.

    ``pixels`` is an (n, ndim) int array in row-major order.
    """

    pixels: np.ndarray
    label: int
    component_id: int

    @property
    def size(self) -> int:
        return len(self.pixels)

    @property
    def first_pixel(self) -> tuple[int, ...]:
        return tuple(int(v) for v in self.pixels[0])


@dataclass
class DecompositionResult:
    method: str
    sub_maps: list[np.ndarray]
    assignments: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.sub_maps)

    def in_source_labels(self) -> list[np.ndarray]:
        """Sub-maps expressed with the source's class ids."""
        if self.method == "class":
            return [m.astype(np.int64) * (k + 1) for k, m in enumerate(self.sub_maps)]
        return [np.asarray(m, dtype=np.int64) for m in self.sub_maps]

    def stacked(self) -> np.ndarray:
        return np.stack(self.sub_maps).astype(np.int64)


@dataclass
class PartitionReport:
    ok: bool
    violations: list[dict] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.ok


def _structure(ndim: int, connectivity: int | None) -> np.ndarray:
    if connectivity is None:
        connectivity = default_connectivity(ndim)
    try:
        rank = _CONNECTIVITY_RANK[ndim][connectivity]
    except KeyError:
        allowed = sorted(_CONNECTIVITY_RANK.get(ndim, {}))
        raise ValueError(
            f"connectivity {connectivity} invalid for {ndim}D maps; use one of {allowed}"
        ) from None
    return ndimage.generate_binary_structure(ndim, rank)


def connected_components(label_map, connectivity: int | None = None) -> list[ObjectComponent]:
    """Foreground objects of ``label_map``, ordered by their first pixel in raster order.

    Adjacent regions with different labels are separate objects.
    """
    y = check_label_map(label_map)
    structure = _structure(y.ndim, connectivity)
    found: list[tuple[int, int, np.ndarray]] = []
    for lab in np.unique(y):
        if lab == 0:
            continue
        cc, n = ndimage.label(y == lab, structure=structure)
        flat = cc.ravel()
        idx = np.flatnonzero(flat)
        order = np.argsort(flat[idx], kind="stable")
        idx = idx[order]
        starts = np.searchsorted(flat[idx], np.arange(1, n + 1))
        for part in np.split(idx, starts[1:]):
            found.append((int(part[0]), int(lab), part))
    found.sort(key=lambda item: item[0])
    return [
        ObjectComponent(
            pixels=np.stack(np.unravel_index(part, y.shape), axis=1).astype(np.int64),
            label=lab,
            component_id=i,
        )
        for i, (_, lab, part) in enumerate(found)
    ]


# --------------------------------------------------------------------------
# convex hull on the pixel grid


def _cross(o, a, b) -> int:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points) -> list[tuple[int, int]]:
    """Andrew's monotone chain; returns hull vertices counter-clockwise.

    Collinear points on hull edges are dropped. Fewer than three vertices
    means the input is degenerate (a point or a segment).
    """
    pts = sorted({(int(p[0]), int(p[1])) for p in points})
    if len(pts) <= 2:
        return pts
    lower: list[tuple[int, int]] = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[tuple[int, int]] = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def hull_pixel_count(hull: list[tuple[int, int]]) -> int:
    """Grid points inside or on a counter-clockwise convex polygon (exact)."""
    h = np.asarray(hull, dtype=np.int64)
    lo, hi = h.min(axis=0), h.max(axis=0)
    r, c = np.meshgrid(
        np.arange(lo[0], hi[0] + 1), np.arange(lo[1], hi[1] + 1), indexing="ij"
    )
    inside = np.ones(r.shape, dtype=bool)
    for a, b in zip(h, np.roll(h, -1, axis=0)):
        inside &= (b[0] - a[0]) * (c - a[1]) - (b[1] - a[1]) * (r - a[0]) >= 0
    return int(inside.sum())


def convexity_ratio(component) -> float:
    """Object pixel count over the pixel count of its rasterised convex hull.

    Accepts an :class:`ObjectComponent` or an (n, 2) coordinate array. Objects
    whose hull is degenerate (fewer than three non-collinear pixels) get 1.0.
    """
    pixels = component.pixels if isinstance(component, ObjectComponent) else component
    pixels = np.asarray(pixels)
    if pixels.size == 0:
        raise ValueError("convexity_ratio: empty component")
    if pixels.ndim != 2 or pixels.shape[1] != 2:
        raise UnsupportedDimensionError(
            f"convexity_ratio works on 2D pixel coordinates, got array of shape {pixels.shape}"
        )
    hull = convex_hull(pixels)
    if len(hull) < 3:
        return 1.0
    n = len({(int(a), int(b)) for a, b in pixels})
    return n / hull_pixel_count(hull)


# --------------------------------------------------------------------------
# decompositions


def decompose_by_class(label_map, n_classes: int | None = None) -> DecompositionResult:
    y = check_label_map(label_map, n_classes)
    if n_classes is None:
        n_classes = max(int(y.max()), 1)
    if n_classes < 1:
        raise ValueError(f"n_classes must be >= 1, got {n_classes}")
    subs = []
    for k in range(1, n_classes + 1):
        sub = np.zeros(y.shape, dtype=np.int64)
        sub[y == k] = 1
        subs.append(sub)
    return DecompositionResult("class", subs)


def decompose_by_shape(
    label_map, t_shape: float = DEFAULT_T_SHAPE, connectivity: int | None = None
) -> DecompositionResult:
    """Split objects into (convex-like, concave-like) maps by convexity ratio.

    An object goes to the convex map only when its ratio is strictly above
    ``t_shape``.
    """
    if not 0.0 < t_shape <= 1.0:
        raise ValueError(f"t_shape must lie in (0, 1], got {t_shape}")
    y = check_label_map(label_map)
    if y.ndim != 2:
        raise UnsupportedDimensionError(
            f"shape decomposition supports 2D maps only, got shape {y.shape}"
        )
    convex = np.zeros_like(y)
    concave = np.zeros_like(y)
    records = []
    for comp in connected_components(y, connectivity):
        ratio = convexity_ratio(comp)
        dest = 0 if ratio > t_shape else 1
        target = convex if dest == 0 else concave
        target[tuple(comp.pixels.T)] = comp.label
        records.append(
            {
                "component_id": comp.component_id,
                "label": comp.label,
                "first_pixel": list(comp.first_pixel),
                "size": comp.size,
                "ratio": ratio,
                "sub_map": dest,
            }
        )
    return DecompositionResult("shape", [convex, concave], records)


def decompose_by_image_level(label_map, connectivity: int | None = None) -> DecompositionResult:
    """(single-object, multiple-object) maps; an empty map gives two empty maps."""
    y = check_label_map(label_map)
    comps = connected_components(y, connectivity)
    zeros = np.zeros_like(y)
    if len(comps) == 1:
        subs, dest = [y.copy(), zeros], 0
    elif len(comps) >= 2:
        subs, dest = [zeros, y.copy()], 1
    else:
        subs, dest = [zeros, zeros.copy()], None
    records = [
        {
            "component_id": c.component_id,
            "label": c.label,
            "first_pixel": list(c.first_pixel),
            "size": c.size,
            "sub_map": dest,
        }
        for c in comps
    ]
    return DecompositionResult("image_level", subs, records)


def decompose_identity(label_map, n_modules: int = 1) -> DecompositionResult:
    y = check_label_map(label_map)
    if n_modules < 1:
        raise ValueError(f"n_modules must be >= 1, got {n_modules}")
    return DecompositionResult("identity", [y.copy() for _ in range(n_modules)])


def decompose(
    label_map,
    method: str,
    n_classes: int | None = None,
    t_shape: float = DEFAULT_T_SHAPE,
    connectivity: int | None = None,
    n_modules: int = 1,
) -> DecompositionResult:
    method = normalize_method(method)
    if method == "class":
        return decompose_by_class(label_map, n_classes)
    if method == "shape":
        return decompose_by_shape(label_map, t_shape, connectivity)
    if method == "image_level":
        return decompose_by_image_level(label_map, connectivity)
    return decompose_identity(label_map, n_modules)


def normalize_method(method: str) -> str:
    m = method.replace("-", "_").lower()
    if m not in METHODS:
        raise ValueError(f"unknown decomposition method {method!r}; choose from {METHODS}")
    return m


def n_sub_maps(method: str, n_classes: int, n_modules: int | None = None) -> int:
    method = normalize_method(method)
    if method == "class":
        return n_classes
    if method == "identity":
        return n_modules if n_modules else n_classes
    return 2


def sub_problem_channels(method: str, n_classes: int) -> int:
    """Softmax width of each stage-1 module for a decomposition method."""
    return 2 if normalize_method(method) == "class" else n_classes + 1


def verify_partition(label_map, result: DecompositionResult, max_report: int = 20) -> PartitionReport:
    """Check that the sub-maps partition the source foreground.

    Every foreground pixel must appear in exactly one sub-map, carrying its
    source label, and the elementwise maximum of the sub-maps must equal the
    source. The identity decomposition instead requires each sub-map to equal
    the source.
    """
    y = check_label_map(label_map)
    subs = result.in_source_labels()
    violations: list[dict] = []
    for k, s in enumerate(subs):
        if s.shape != y.shape:
            raise ShapeError(f"sub-map {k} has shape {s.shape}, source has {y.shape}")

    def report(mask: np.ndarray, reason: str) -> None:
        for pos in np.argwhere(mask)[: max(0, max_report - len(violations))]:
            violations.append({"pixel": [int(v) for v in pos], "reason": reason})

    if result.method == "identity":
        for k, s in enumerate(subs):
            report(s != y, f"sub-map {k} differs from source")
        return PartitionReport(not violations, violations)

    if not subs:
        report(y > 0, "no sub-maps")
        return PartitionReport(not violations, violations)
    stack = np.stack(subs)
    hits = (stack > 0).sum(axis=0)
    fg = y > 0
    report(fg & (hits == 0), "foreground pixel missing from all sub-maps")
    report(fg & (hits > 1), "foreground pixel in more than one sub-map")
    report(~fg & (hits > 0), "background pixel set in a sub-map")
    wrong = np.zeros(y.shape, dtype=bool)
    for s in subs:
        wrong |= (s > 0) & (s != y)
    report(wrong, "sub-map label differs from source label")
    report(stack.max(axis=0) != y, "elementwise max does not reconstruct source")
    return PartitionReport(not violations, violations)
