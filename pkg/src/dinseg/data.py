"""Samples, on-disk formats, dataset manifests and augmentation.

2D samples are stored as ``<id>_image.png`` (16-bit grayscale) and
``<id>_label.png`` (8-bit, pixel value = class id). 3D samples are stored as
raw little-endian blobs in z-major order, each with a JSON sidecar header
``{"dims": [z, y, x], "dtype": "u8"|"f32", "k": int}``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ._validation import check_image, check_label_map
from .errors import FormatError, ShapeError

_DTYPES = {"u8": np.dtype("<u1"), "f32": np.dtype("<f4")}
IMAGE_LEVELS = 65535


@dataclass
class Sample:
    """One (image, label map) pair. ``image`` is grayscale in [0, 1]."""

    image: np.ndarray
    label: np.ndarray
    id: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.shape(self.image) != np.shape(self.label):
            raise ShapeError(
                f"sample {self.id!r}: image shape {np.shape(self.image)} "
                f"!= label shape {np.shape(self.label)}"
            )


# --------------------------------------------------------------------------
# files


def sample_files(root, sample_id: str, ndim: int) -> dict[str, Path]:
    root = Path(root)
    if ndim == 2:
        return {"image": root / f"{sample_id}_image.png", "label": root / f"{sample_id}_label.png"}
    return {
        "image": root / f"{sample_id}_image.raw",
        "image_header": root / f"{sample_id}_image.json",
        "label": root / f"{sample_id}_label.raw",
        "label_header": root / f"{sample_id}_label.json",
    }


def write_png_label(path, label: np.ndarray) -> None:
    label = np.asarray(label)
    if label.size and (label.min() < 0 or label.max() > 255):
        raise ValueError(f"{path}: label values must fit in 8 bits")
    Image.fromarray(label.astype(np.uint8), mode="L").save(path, format="PNG")


def read_png_label(path, k: int | None = None) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P", "I;16", "I"):
                raise FormatError(f"unsupported label PNG mode {im.mode}", path)
            arr = np.array(im).astype(np.int64)
    except OSError as exc:
        raise FormatError(f"cannot read PNG ({exc})", path) from exc
    if k is not None and arr.size and arr.max() > k:
        pos = tuple(int(v) for v in np.argwhere(arr > k)[0])
        raise FormatError(f"label value {int(arr[pos])} at pixel {pos} exceeds k={k}", path)
    return arr


def write_raw(path, array: np.ndarray, dtype: str, k: int) -> None:
    path = Path(path)
    arr = np.ascontiguousarray(array, dtype=_DTYPES[dtype])
    header = {"dims": [int(s) for s in arr.shape], "dtype": dtype, "k": int(k)}
    path.with_suffix(".json").write_text(json.dumps(header, sort_keys=True) + "\n")
    path.write_bytes(arr.tobytes())


def read_raw(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    header_path = path.with_suffix(".json")
    try:
        header = json.loads(header_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read header ({exc})", header_path) from exc
    dims = header.get("dims")
    dtype = header.get("dtype")
    if (
        not isinstance(dims, list)
        or len(dims) != 3
        or not all(isinstance(d, int) and d > 0 for d in dims)
    ):
        raise FormatError(f"header 'dims' must be three positive ints, got {dims!r}", header_path)
    if dtype not in _DTYPES:
        raise FormatError(f"header 'dtype' must be one of {sorted(_DTYPES)}, got {dtype!r}", header_path)
    if not isinstance(header.get("k"), int):
        raise FormatError("header 'k' must be an int", header_path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read blob ({exc})", path) from exc
    expected = int(np.prod(dims)) * _DTYPES[dtype].itemsize
    if len(blob) != expected:
        raise FormatError(
            f"blob length {len(blob)} bytes does not match dims {dims} x {dtype} "
            f"({expected} bytes)",
            path,
        )
    return np.frombuffer(blob, dtype=_DTYPES[dtype]).reshape(dims), header


def save_sample(sample: Sample, root, k: int) -> dict[str, Path]:
    """Write a sample under ``root``; returns the written paths."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    image = check_image(sample.image)
    label = check_label_map(sample.label, k)
    files = sample_files(root, sample.id, image.ndim)
    if image.ndim == 2:
        q = np.round(np.clip(image, 0.0, 1.0) * IMAGE_LEVELS).astype(np.uint16)
        Image.fromarray(q).save(files["image"], format="PNG")
        write_png_label(files["label"], label)
    else:
        write_raw(files["image"], np.clip(image, 0.0, 1.0), "f32", k)
        write_raw(files["label"], label, "u8", k)
    return files


def load_sample(root, sample_id: str, k: int | None = None, ndim: int = 2) -> Sample:
    files = sample_files(root, sample_id, ndim)
    for key in ("image", "label"):
        if not files[key].exists():
            raise FormatError("file not found", files[key])
    if ndim == 2:
        try:
            with Image.open(files["image"]) as im:
                scale = IMAGE_LEVELS if im.mode.startswith("I") else 255
                raw = np.array(im.convert("L") if im.mode not in ("L", "I;16", "I") else im)
        except OSError as exc:
            raise FormatError(f"cannot read PNG ({exc})", files["image"]) from exc
        image = raw.astype(np.float64) / scale
        label = read_png_label(files["label"], k)
    else:
        image, _ = read_raw(files["image"])
        label, header = read_raw(files["label"])
        kk = header["k"] if k is None else k
        label = label.astype(np.int64)
        if label.size and label.max() > kk:
            pos = tuple(int(v) for v in np.argwhere(label > kk)[0])
            raise FormatError(f"label value {int(label[pos])} at voxel {pos} exceeds k={kk}", files["label"])
        image = image.astype(np.float64)
    if image.shape != label.shape:
        raise FormatError(
            f"image dims {image.shape} do not match label dims {label.shape}", files["label"]
        )
    return Sample(image, label, sample_id)


# --------------------------------------------------------------------------
# manifests


@dataclass
class DatasetManifest:
    root: Path
    k: int
    dims_kind: str
    splits: dict[str, list[str]]

    @property
    def ndim(self) -> int:
        return 2 if self.dims_kind == "2d" else 3

    def to_dict(self) -> dict:
        return {
            "root": str(self.root),
            "k": self.k,
            "dims_kind": self.dims_kind,
            "splits": {name: list(ids) for name, ids in self.splits.items()},
        }

    def ids(self, split: str) -> list[str]:
        if split not in self.splits:
            raise KeyError(f"manifest has no split {split!r}; available: {sorted(self.splits)}")
        return list(self.splits[split])

    def load_one(self, sample_id: str) -> Sample:
        return load_sample(self.root, sample_id, self.k, self.ndim)

    def load(self, split: str) -> list[Sample]:
        return [self.load_one(i) for i in self.ids(split)]

    def validate(self) -> None:
        seen: dict[str, str] = {}
        for split, ids in self.splits.items():
            for i in ids:
                if i in seen and seen[i] != split:
                    raise ValueError(f"sample id {i!r} appears in splits {seen[i]!r} and {split!r}")
                seen[i] = split
                for path in sample_files(self.root, i, self.ndim).values():
                    if not path.exists():
                        raise FormatError("referenced file does not exist", path)


def write_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")


def load_manifest(path, validate: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise FormatError("manifest not found", path) from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot parse manifest ({exc})", path) from exc
    try:
        root = Path(raw["root"])
        if not root.is_absolute():
            root = path.parent / root
        manifest = DatasetManifest(
            root=root,
            k=int(raw["k"]),
            dims_kind=str(raw["dims_kind"]).lower(),
            splits={str(s): [str(i) for i in ids] for s, ids in raw["splits"].items()},
        )
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise FormatError(f"malformed manifest ({exc!r})", path) from exc
    if manifest.dims_kind not in ("2d", "3d"):
        raise FormatError(f"dims_kind must be '2d' or '3d', got {manifest.dims_kind!r}", path)
    if validate:
        manifest.validate()
    return manifest


# --------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentationConfig:
    """Random crop to ``window`` (None keeps the full image), 90-degree
    rotations in the last two axes, and per-axis flips."""

    window: tuple[int, ...] | None = None
    rotate: bool = True
    flip: bool = True
    seed: int = 0


def augment(sample: Sample, config: AugmentationConfig, rng: np.random.Generator | None = None) -> Sample:
    """Apply the same crop/rotation/flips to image and label.

    The random stream consumed is independent of which transforms are
    enabled, so toggling one does not reshuffle the others.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    image, label = np.asarray(sample.image), np.asarray(sample.label)
    shape = image.shape
    window = tuple(config.window) if config.window is not None else shape
    if len(window) != len(shape) or any(w > s or w < 1 for w, s in zip(window, shape)):
        raise ShapeError(f"crop window {window} does not fit image of shape {shape}")

    starts = [int(rng.integers(0, s - w + 1)) for s, w in zip(shape, window)]
    n_rot = int(rng.integers(0, 4))
    flips = [bool(rng.random() < 0.5) for _ in shape]

    crop = tuple(slice(a, a + w) for a, w in zip(starts, window))
    image, label = image[crop], label[crop]
    if config.rotate:
        plane = (image.ndim - 2, image.ndim - 1)
        if image.shape[plane[0]] != image.shape[plane[1]]:
            n_rot = 2 * (n_rot % 2)
        image = np.rot90(image, n_rot, axes=plane)
        label = np.rot90(label, n_rot, axes=plane)
    if config.flip:
        for ax, f in enumerate(flips):
            if f:
                image = np.flip(image, axis=ax)
                label = np.flip(label, axis=ax)
    return Sample(np.ascontiguousarray(image), np.ascontiguousarray(label), sample.id, dict(sample.meta))
