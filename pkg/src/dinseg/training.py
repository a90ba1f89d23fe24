"""End-to-end training of K-to-1 networks, sliding-window inference and checkpoints.

Checkpoint file layout::

    DINSEG-CHECKPOINT 1\\n
    <one-line JSON header>\\n
    <little-endian float64 blobs, back to back>

The header holds the network spec and its SHA-256, the iteration counter,
the seed, the training RNG state, the training config, per-parameter Adam
step counters, and an ``arrays`` table of ``{name, shape, offset}`` entries
(offsets in bytes from the start of the blob section). Every parameter
contributes three arrays: ``param/<name>``, ``adam_m/<name>``, ``adam_v/<name>``.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .data import AugmentationConfig, Sample, augment
from .decomposition import DEFAULT_T_SHAPE, decompose
from .errors import FormatError, NonFiniteLossError, ShapeError
from .network import KTo1Net, KTo1Spec, build, composite_loss

logger = logging.getLogger(__name__)

MAGIC = b"DINSEG-CHECKPOINT 1\n"


def default_window(ndim: int) -> tuple[int, ...]:
    return (192, 192) if ndim == 2 else (64, 64, 64)


@dataclass
class TrainConfig:
    window: tuple[int, ...] | None = None
    batch: int = 8
    max_iters: int = 60000
    lr: float = 5e-4
    lr_drop_iter: int = 30000
    lr_after_drop: float = 5e-5
    seed: int = 0
    rotate: bool = True
    flip: bool = True
    log_every: int = 1
    checkpoint_every: int = 0
    t_shape: float = DEFAULT_T_SHAPE
    connectivity: int | None = None

    def __post_init__(self):
        if self.window is not None:
            self.window = tuple(int(w) for w in self.window)
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.max_iters < 0:
            raise ValueError(f"max_iters must be >= 0, got {self.max_iters}")
        if self.lr < 0 or self.lr_after_drop < 0:
            raise ValueError("learning rates must be non-negative")

    def lr_at(self, iteration: int) -> float:
        """Learning rate for the (0-based) iteration."""
        return self.lr if iteration < self.lr_drop_iter else self.lr_after_drop

    def to_dict(self) -> dict:
        d = asdict(self)
        d["window"] = None if self.window is None else list(self.window)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Batch:
    images: np.ndarray  # (N, 1, *S)
    labels: np.ndarray  # (N, *S)
    sub_targets: np.ndarray  # (K, N, *S)


@dataclass
class StepResult:
    loss: float
    main: float
    sub: list[float]
    accuracy: float


def make_batch(
    samples: Sequence[Sample],
    spec: KTo1Spec,
    config: TrainConfig,
    rng: np.random.Generator,
) -> Batch:
    """Random crops/rotations/flips, then decomposition of each cropped window."""
    ndim = spec.spatial_dims
    window = config.window or default_window(ndim)
    aug_cfg = AugmentationConfig(window, config.rotate, config.flip)
    images, labels, subs = [], [], []
    for _ in range(config.batch):
        s = samples[int(rng.integers(len(samples)))]
        a = augment(s, aug_cfg, rng)
        dec = decompose(
            a.label,
            spec.method,
            n_classes=spec.n_classes,
            t_shape=config.t_shape,
            connectivity=config.connectivity,
            n_modules=spec.K,
        )
        images.append(a.image)
        labels.append(a.label)
        subs.append(dec.stacked())
    return Batch(
        np.stack(images)[:, None].astype(np.float64),
        np.stack(labels).astype(np.int64),
        np.stack(subs, axis=1),
    )


def train_step(model: KTo1Net, batch: Batch, lr: float, lam: float | None = None, iteration: int = 0) -> StepResult:
    """One forward/backward over all K+1 loss terms and one Adam update."""
    model.zero_grad()
    with ad.Tape() as tape:
        loss, parts, final = composite_loss(model, batch.images, batch.labels, batch.sub_targets, lam)
    if not math.isfinite(parts.total):
        raise NonFiniteLossError(iteration, parts.as_dict())
    tape.backward(loss)
    params = model.parameters()
    ad.adam_step(params, lr)
    model.zero_grad()
    pred = final.data.argmax(axis=1)
    acc = float(np.mean(pred == batch.labels))
    return StepResult(parts.total, parts.main, parts.sub, acc)


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class CheckpointState:
    spec: KTo1Spec
    iteration: int
    seed: int
    rng_state: dict | None
    arrays: dict[str, np.ndarray]
    steps: dict[str, int]
    config: dict = field(default_factory=dict)

    @property
    def spec_hash(self) -> str:
        return self.spec.hash()


def capture_state(model: KTo1Net, iteration: int, rng: np.random.Generator | None, config: TrainConfig | None = None) -> CheckpointState:
    arrays: dict[str, np.ndarray] = {}
    steps: dict[str, int] = {}
    for name, p in model.named_parameters():
        arrays[f"param/{name}"] = p.data.copy()
        arrays[f"adam_m/{name}"] = p.m.copy()
        arrays[f"adam_v/{name}"] = p.v.copy()
        steps[name] = p.step
    return CheckpointState(
        spec=model.spec,
        iteration=iteration,
        seed=model.seed,
        rng_state=None if rng is None else rng.bit_generator.state,
        arrays=arrays,
        steps=steps,
        config={} if config is None else config.to_dict(),
    )


def restore_model(state: CheckpointState) -> KTo1Net:
    model = build(state.spec, state.seed)
    for name, p in model.named_parameters():
        try:
            p.data[...] = state.arrays[f"param/{name}"]
            p.m[...] = state.arrays[f"adam_m/{name}"]
            p.v[...] = state.arrays[f"adam_v/{name}"]
        except KeyError as exc:
            raise FormatError(f"checkpoint lacks array {exc.args[0]!r}") from None
        except ValueError as exc:
            raise FormatError(f"checkpoint array for {name!r} has the wrong shape ({exc})") from None
        p.step = int(state.steps[name])
    return model


def save_checkpoint(state: CheckpointState, path) -> None:
    path = Path(path)
    table = []
    blobs = []
    offset = 0
    for name in sorted(state.arrays):
        arr = np.ascontiguousarray(state.arrays[name], dtype="<f8")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "spec": state.spec.to_dict(),
        "spec_hash": state.spec_hash,
        "iteration": state.iteration,
        "seed": state.seed,
        "rng_state": state.rng_state,
        "steps": state.steps,
        "config": state.config,
        "arrays": table,
    }
    text = json.dumps(header, sort_keys=True, separators=(",", ":"))
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(text.encode("utf-8") + b"\n")
        for b in blobs:
            fh.write(b)


def read_checkpoint_header(path) -> tuple[dict, int]:
    """Parsed header and the byte offset of the blob section."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            magic = fh.readline()
            if magic != MAGIC:
                raise FormatError("not a dinseg checkpoint (bad magic line)", path)
            line = fh.readline()
            start = fh.tell()
    except FileNotFoundError:
        raise FormatError("checkpoint not found", path) from None
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed checkpoint header ({exc})", path) from exc
    return header, start


def load_checkpoint(path, verify_hash: bool = True) -> CheckpointState:
    path = Path(path)
    header, start = read_checkpoint_header(path)
    try:
        spec = KTo1Spec.from_dict(header["spec"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"invalid spec in checkpoint header ({exc})", path) from exc
    if verify_hash and spec.hash() != header.get("spec_hash"):
        raise FormatError("spec hash mismatch: header spec does not match its recorded hash", path)
    blob = path.read_bytes()[start:]
    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = entry["offset"] + 8 * count
        if end > len(blob):
            raise FormatError(f"array {entry['name']!r} runs past the end of the file", path)
        arrays[entry["name"]] = (
            np.frombuffer(blob, dtype="<f8", count=count, offset=entry["offset"])
            .reshape(entry["shape"])
            .astype(np.float64)
        )
    return CheckpointState(
        spec=spec,
        iteration=int(header["iteration"]),
        seed=int(header["seed"]),
        rng_state=header.get("rng_state"),
        arrays=arrays,
        steps={k: int(v) for k, v in header["steps"].items()},
        config=header.get("config", {}),
    )


# --------------------------------------------------------------------------
# fitting


@dataclass
class FitResult:
    log: list[dict]
    state: CheckpointState
    timing: list[dict] = field(default_factory=list)


def fit(
    model: KTo1Net,
    dataset: Sequence[Sample],
    config: TrainConfig,
    state: CheckpointState | None = None,
    checkpoint_dir=None,
    on_row: Callable[[dict], None] | None = None,
) -> FitResult:
    """Train for ``config.max_iters`` iterations (counted from zero).

    Passing ``state`` (from a checkpoint of this model) resumes at its
    iteration with its RNG state, so the continued run matches an
    uninterrupted one bit for bit. Log rows carry iteration, learning rate,
    every loss term and the batch pixel accuracy; wall-clock times are kept
    apart in ``FitResult.timing`` so logs stay reproducible.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    spec = model.spec
    window = config.window or default_window(spec.spatial_dims)
    for s in dataset:
        if np.ndim(s.image) != spec.spatial_dims:
            raise ShapeError(f"sample {s.id!r} is {np.ndim(s.image)}D, model is {spec.spatial_dims}D")
        if any(w > d for w, d in zip(window, np.shape(s.image))):
            raise ShapeError(f"window {window} does not fit sample {s.id!r} of shape {np.shape(s.image)}")
    if any(w % spec.min_divisor for w in window):
        raise ShapeError(f"window {window} must be divisible by {spec.min_divisor}")

    rng = np.random.default_rng(config.seed)
    start = 0
    if state is not None:
        if state.spec_hash != spec.hash():
            raise ValueError("checkpoint spec does not match the model")
        start = state.iteration
        if state.rng_state is not None:
            rng.bit_generator.state = state.rng_state

    log: list[dict] = []
    timing: list[dict] = []
    t0 = time.perf_counter()
    for it in range(start, config.max_iters):
        batch = make_batch(dataset, spec, config, rng)
        lr = config.lr_at(it)
        step = train_step(model, batch, lr, iteration=it + 1)
        done = it + 1
        if done % config.log_every == 0 or done == config.max_iters:
            row = {
                "iter": done,
                "lr": lr,
                "loss": step.loss,
                "main": step.main,
                "sub": step.sub,
                "accuracy": step.accuracy,
            }
            log.append(row)
            timing.append({"iter": done, "wall_time": time.perf_counter() - t0})
            if on_row is not None:
                on_row(row)
        if checkpoint_dir is not None and config.checkpoint_every and done % config.checkpoint_every == 0:
            save_checkpoint(capture_state(model, done, rng, config), Path(checkpoint_dir) / f"ckpt_{done:07d}.ckpt")
    final_iter = max(start, config.max_iters)
    return FitResult(log, capture_state(model, final_iter, rng, config), timing)


# --------------------------------------------------------------------------
# inference


def _tile_starts(size: int, window: int, overlap: int) -> list[int]:
    step = window - overlap
    starts = list(range(0, size - window + 1, step))
    if starts[-1] != size - window:
        starts.append(size - window)
    return starts


def predict_proba(model: KTo1Net, image, window=None, overlap: int = 0, tile_batch: int = 8) -> np.ndarray:
    """Final-output probabilities (C, *S) by sliding-window averaging."""
    image = np.asarray(image, dtype=np.float64)
    nd = model.spec.spatial_dims
    if image.ndim != nd:
        raise ShapeError(f"expected a {nd}D image, got shape {image.shape}")
    window = tuple(image.shape) if window is None else tuple(int(w) for w in window)
    if len(window) != nd:
        raise ShapeError(f"window {window} has the wrong number of dims for a {nd}D image")
    if any(w > s for w, s in zip(window, image.shape)):
        raise ShapeError(
            f"image {image.shape} is smaller than the window {window}; pad the image to at least the window size"
        )
    if not 0 <= overlap < min(window):
        raise ValueError(f"overlap must lie in [0, {min(window)}), got {overlap}")
    grids = [_tile_starts(s, w, overlap) for s, w in zip(image.shape, window)]
    corners = [tuple(c) for c in np.array(np.meshgrid(*grids, indexing="ij")).reshape(nd, -1).T]
    n_out = model.spec.n_classes + 1
    acc = np.zeros((n_out,) + image.shape)
    hits = np.zeros(image.shape)
    for i in range(0, len(corners), tile_batch):
        chunk = corners[i : i + tile_batch]
        tiles = np.stack([image[tuple(slice(c, c + w) for c, w in zip(cs, window))] for cs in chunk])
        _, final = model.forward(tiles[:, None])
        probs = ad.softmax(final).data
        for cs, p in zip(chunk, probs):
            region = tuple(slice(c, c + w) for c, w in zip(cs, window))
            acc[(slice(None),) + region] += p
            hits[region] += 1
    return acc / hits


def predict(model: KTo1Net, image, window=None, overlap: int = 0) -> np.ndarray:
    """Label map by argmax of averaged window probabilities (ties -> lower class)."""
    return predict_proba(model, image, window, overlap).argmax(axis=0).astype(np.int64)
