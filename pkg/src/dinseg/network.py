"""K-to-1 network: K stage-1 segmentation modules feeding one integrator.

Each module is a plain encoder-decoder (two conv+ReLU per level, 2x max-pool
down, nearest-neighbour up, skip concatenation, 1x1 head producing logits).
Stage-1 softmax probabilities, optionally with the raw image, are
channel-concatenated and fed to the integrator, whose softmax is the final
per-pixel class distribution.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .decomposition import DecompositionResult, n_sub_maps, normalize_method, sub_problem_channels
from .errors import ShapeError


@dataclass(frozen=True)
class SegModuleSpec:
    in_channels: int
    out_channels: int
    depth: int = 2
    base_channels: int = 8
    kernel_size: int = 3

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        for name in ("in_channels", "out_channels", "base_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be a positive odd int, got {self.kernel_size}")


@dataclass(frozen=True)
class KTo1Spec:
    """Topology of a K-to-1 network.

    ``lam`` weights the summed stage-1 losses; ``None`` means 1/K.
    """

    n_classes: int
    stage1: tuple[SegModuleSpec, ...]
    integrator: SegModuleSpec
    lam: float | None = None
    feed_raw_to_integrator: bool = True
    image_channels: int = 1
    spatial_dims: int = 2
    method: str = "class"

    def __post_init__(self):
        object.__setattr__(self, "stage1", tuple(self.stage1))
        if not self.stage1:
            raise ValueError("K-to-1 spec needs at least one stage-1 module")
        if self.spatial_dims not in (2, 3):
            raise ValueError(f"spatial_dims must be 2 or 3, got {self.spatial_dims}")
        for k, s in enumerate(self.stage1):
            if s.in_channels != self.image_channels:
                raise ShapeError(
                    f"stage-1 module {k} expects {s.in_channels} input channels, "
                    f"image has {self.image_channels}"
                )
        expected = sum(s.out_channels for s in self.stage1)
        if self.feed_raw_to_integrator:
            expected += self.image_channels
        if self.integrator.in_channels != expected:
            raise ShapeError(
                f"integrator expects {self.integrator.in_channels} input channels but "
                f"stage-1 modules ({'+'.join(str(s.out_channels) for s in self.stage1)})"
                f"{' + image' if self.feed_raw_to_integrator else ''} provide {expected}"
            )
        if self.integrator.out_channels != self.n_classes + 1:
            raise ShapeError(
                f"integrator emits {self.integrator.out_channels} channels, "
                f"the problem has {self.n_classes + 1} (background + {self.n_classes})"
            )

    @property
    def K(self) -> int:
        return len(self.stage1)

    @property
    def weight(self) -> float:
        return 1.0 / self.K if self.lam is None else float(self.lam)

    @property
    def min_divisor(self) -> int:
        return 2 ** max(s.depth for s in (*self.stage1, self.integrator))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "KTo1Spec":
        d = dict(d)
        d["stage1"] = tuple(SegModuleSpec(**s) for s in d["stage1"])
        d["integrator"] = SegModuleSpec(**d["integrator"])
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def make_spec(
    n_classes: int,
    method: str = "class",
    n_modules: int | None = None,
    depth: int = 2,
    base_channels: int = 8,
    kernel_size: int = 3,
    feed_raw_to_integrator: bool = True,
    lam: float | None = None,
    spatial_dims: int = 2,
    integrator_depth: int | None = None,
    integrator_channels: int | None = None,
) -> KTo1Spec:
    """Spec for a K-to-1 network on an ``n_classes``-foreground problem.

    K and the stage-1 output widths follow from the decomposition method:
    class decomposition gives K binary modules, shape and image-level give two
    modules over the full label set, identity gives ``n_modules`` of those.
    """
    method = normalize_method(method)
    k = n_sub_maps(method, n_classes, n_modules)
    sub_out = sub_problem_channels(method, n_classes)
    stage1 = tuple(
        SegModuleSpec(1, sub_out, depth, base_channels, kernel_size) for _ in range(k)
    )
    integ_in = k * sub_out + (1 if feed_raw_to_integrator else 0)
    integrator = SegModuleSpec(
        integ_in,
        n_classes + 1,
        integrator_depth or depth,
        integrator_channels or base_channels,
        kernel_size,
    )
    return KTo1Spec(n_classes, stage1, integrator, lam, feed_raw_to_integrator, 1, spatial_dims, method)


class SegModule:
    """Encoder-decoder producing per-pixel logits."""

    def __init__(self, spec: SegModuleSpec, spatial_dims: int, rng: np.random.Generator):
        self.spec = spec
        self.spatial_dims = spatial_dims
        self.params: dict[str, ad.Parameter] = {}
        c = spec.base_channels
        widths = [c * 2**level for level in range(spec.depth + 1)]
        prev = spec.in_channels
        for level in range(spec.depth):
            self._conv(f"enc{level}a", prev, widths[level], rng)
            self._conv(f"enc{level}b", widths[level], widths[level], rng)
            prev = widths[level]
        self._conv("bottom_a", prev, widths[-1], rng)
        self._conv("bottom_b", widths[-1], widths[-1], rng)
        prev = widths[-1]
        for level in reversed(range(spec.depth)):
            self._conv(f"dec{level}a", prev + widths[level], widths[level], rng)
            self._conv(f"dec{level}b", widths[level], widths[level], rng)
            prev = widths[level]
        self._conv("head", prev, spec.out_channels, rng, kernel=1)

    def _conv(self, name: str, cin: int, cout: int, rng, kernel: int | None = None) -> None:
        k = self.spec.kernel_size if kernel is None else kernel
        shape = (cout, cin) + (k,) * self.spatial_dims
        fan_in = cin * k**self.spatial_dims
        self.params[f"{name}.w"] = ad.Parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))
        self.params[f"{name}.b"] = ad.Parameter(np.zeros(cout))

    def _apply(self, name: str, x: ad.Tensor, relu: bool = True) -> ad.Tensor:
        y = ad.conv(x, self.params[f"{name}.w"], self.params[f"{name}.b"], "same")
        return ad.relu(y) if relu else y

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        skips = []
        for level in range(self.spec.depth):
            x = self._apply(f"enc{level}b", self._apply(f"enc{level}a", x))
            skips.append(x)
            x = ad.downsample2(x)
        x = self._apply("bottom_b", self._apply("bottom_a", x))
        for level in reversed(range(self.spec.depth)):
            x = ad.channel_concat([ad.upsample2(x), skips[level]])
            x = self._apply(f"dec{level}b", self._apply(f"dec{level}a", x))
        return self._apply("head", x, relu=False)

    @property
    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())


class KTo1Net:
    def __init__(self, spec: KTo1Spec, stage1: list[SegModule], integrator: SegModule, seed: int):
        self.spec = spec
        self.stage1 = stage1
        self.integrator = integrator
        self.seed = seed

    def named_parameters(self) -> list[tuple[str, ad.Parameter]]:
        out = []
        for k, m in enumerate(self.stage1):
            out += [(f"stage1.{k}.{n}", p) for n, p in m.params.items()]
        out += [(f"integrator.{n}", p) for n, p in self.integrator.params.items()]
        return out

    def parameters(self) -> list[ad.Parameter]:
        return [p for _, p in self.named_parameters()]

    @property
    def n_params(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def check_input(self, x: np.ndarray) -> np.ndarray:
        """Coerce to (N, C, *spatial) and check divisibility."""
        x = np.asarray(x, dtype=np.float64)
        nd = self.spec.spatial_dims
        if x.ndim == nd:
            x = x[None, None]
        elif x.ndim == nd + 1:
            x = x[:, None]
        if x.ndim != nd + 2 or x.shape[1] != self.spec.image_channels:
            raise ShapeError(
                f"expected images of shape (N, {self.spec.image_channels}, {nd} spatial dims), got {x.shape}"
            )
        div = self.spec.min_divisor
        bad = [s for s in x.shape[2:] if s % div]
        if bad:
            padded = tuple(-(-s // div) * div for s in x.shape[2:])
            raise ShapeError(
                f"spatial dims {x.shape[2:]} must be divisible by {div}; "
                f"pad the image to {padded}"
            )
        return x

    def forward(self, x) -> tuple[list[ad.Tensor], ad.Tensor]:
        """Stage-1 logits and final logits as tape tensors."""
        xt = x if isinstance(x, ad.Tensor) else ad.Tensor(self.check_input(x))
        stage1_logits = [m(xt) for m in self.stage1]
        feats = [ad.softmax(z) for z in stage1_logits]
        if self.spec.feed_raw_to_integrator:
            feats.append(xt)
        final_logits = self.integrator(ad.channel_concat(feats))
        return stage1_logits, final_logits


def build(spec: KTo1Spec, seed: int = 0, stage1_seeds: list[int] | None = None) -> KTo1Net:
    """Instantiate a K-to-1 network with He-normal weights and zero biases.

    Module k draws its weights from its own stream, so identical
    ``stage1_seeds`` entries give identical stage-1 modules.
    """
    children = np.random.SeedSequence(seed).spawn(spec.K + 1)
    if stage1_seeds is not None:
        if len(stage1_seeds) != spec.K:
            raise ValueError(f"got {len(stage1_seeds)} stage-1 seeds for K={spec.K}")
        rngs = [np.random.default_rng(s) for s in stage1_seeds]
    else:
        rngs = [np.random.default_rng(c) for c in children[: spec.K]]
    stage1 = [SegModule(s, spec.spatial_dims, r) for s, r in zip(spec.stage1, rngs)]
    integrator = SegModule(spec.integrator, spec.spatial_dims, np.random.default_rng(children[-1]))
    return KTo1Net(spec, stage1, integrator, seed)


def forward_all(model: KTo1Net, image) -> tuple[list[np.ndarray], np.ndarray]:
    """Stage-1 probability maps and the final probability map (numpy)."""
    s1, final = model.forward(image)
    return [ad.softmax(z).data for z in s1], ad.softmax(final).data


@dataclass
class LossBreakdown:
    total: float
    main: float
    sub: list[float] = field(default_factory=list)
    weight: float = 0.0

    def as_dict(self) -> dict:
        return {"loss": self.total, "main": self.main, "sub": list(self.sub)}


def _sub_target_array(sub_targets, k: int, batch_shape: tuple) -> np.ndarray:
    if isinstance(sub_targets, DecompositionResult):
        arr = sub_targets.stacked()
        arr = arr.reshape((arr.shape[0],) + batch_shape)
    elif isinstance(sub_targets, (list, tuple)) and sub_targets and isinstance(sub_targets[0], DecompositionResult):
        arr = np.stack([r.stacked() for r in sub_targets], axis=1)
    else:
        arr = np.asarray(sub_targets)
    if arr.shape[0] != k:
        raise ValueError(f"model has K={k} stage-1 modules but got {arr.shape[0]} sub-targets")
    if arr.shape[1:] != batch_shape:
        raise ShapeError(f"sub-targets shape {arr.shape[1:]} does not match labels {batch_shape}")
    return arr


def composite_loss(model: KTo1Net, image, y, sub_targets, lam: float | None = None):
    """Main cross entropy plus ``lam`` times the summed stage-1 cross entropies.

    ``sub_targets`` is a DecompositionResult (single image), a list of them
    (one per batch item), or an array shaped (K, N, *spatial). Returns the
    scalar loss tensor, a :class:`LossBreakdown`, and the final logits.
    """
    x = model.check_input(image)
    y = np.asarray(y)
    if y.ndim == model.spec.spatial_dims:
        y = y[None]
    weight = model.spec.weight if lam is None else float(lam)
    subs = _sub_target_array(sub_targets, model.spec.K, y.shape)
    s1, final = model.forward(x)
    main = ad.spatial_cross_entropy(final, y)
    sub_terms = [ad.spatial_cross_entropy(z, t) for z, t in zip(s1, subs)]
    acc = sub_terms[0]
    for t in sub_terms[1:]:
        acc = ad.add(acc, t)
    loss = ad.add(main, ad.scale(acc, weight))
    breakdown = LossBreakdown(
        float(loss.data), float(main.data), [float(t.data) for t in sub_terms], weight
    )
    return loss, breakdown, final
