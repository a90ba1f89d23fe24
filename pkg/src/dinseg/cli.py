"""Command-line front end: ``dinseg synth|decompose|train|eval``.

Exit codes: 0 success, 1 invalid input or configuration, 2 partition
violation in ``decompose``, 3 non-finite loss in ``train``. Failures print
one JSON object to stderr with the command, error type, message and, where
known, the offending path. ``DINSEG_THREADS`` caps BLAS threads.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .data import DatasetManifest, load_manifest, save_sample, write_manifest, write_png_label, write_raw
from .decomposition import DEFAULT_T_SHAPE, METHODS, decompose, normalize_method, verify_partition
from .errors import FormatError, NonFiniteLossError
from .metrics import aggregate, evaluate
from .network import build, make_spec
from .synth import GENERATOR_K, GENERATORS
from .training import TrainConfig, capture_state, fit, load_checkpoint, predict, restore_model, save_checkpoint

logger = logging.getLogger("dinseg")

EXIT_OK, EXIT_INPUT, EXIT_PARTITION, EXIT_NONFINITE = 0, 1, 2, 3

# flat run-config keys and their defaults; None means "derive"
RUN_DEFAULTS: dict = {
    "manifest": None,
    "out": None,
    "split": "train",
    "method": "class",
    "n_modules": None,
    "depth": 2,
    "base_channels": 8,
    "kernel_size": 3,
    "feed_raw_to_integrator": True,
    "lambda": None,
    "integrator_depth": None,
    "integrator_channels": None,
    "window": None,
    "batch": 8,
    "max_iters": 60000,
    "lr": 5e-4,
    "lr_drop_iter": 30000,
    "lr_after_drop": 5e-5,
    "seed": 0,
    "rotate": True,
    "flip": True,
    "log_every": 1,
    "checkpoint_every": 0,
    "t_shape": DEFAULT_T_SHAPE,
    "connectivity": None,
    "timing": False,
}


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT, path=None):
        super().__init__(message)
        self.code = code
        self.path = None if path is None else str(path)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _parse_dims(text: str) -> tuple[int, ...]:
    parts = text.replace("x", ",").split(",")
    try:
        dims = tuple(int(p) for p in parts if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid dims {text!r}") from None
    if len(dims) not in (2, 3) or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"dims must be 2 or 3 positive ints, got {text!r}")
    return dims


# --------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    if args.n < 1:
        raise CliError(f"--n must be >= 1, got {args.n}")
    if not 0.0 <= args.test_fraction < 1.0:
        raise CliError(f"--test-fraction must lie in [0, 1), got {args.test_fraction}")
    kind = args.kind
    gen = GENERATORS[kind]
    kwargs = {"p_single": args.p_single} if kind == "counts" else {}
    try:
        samples = gen(args.n, args.dims, args.seed, **kwargs)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    k = GENERATOR_K[kind]
    out = Path(args.out)
    data_dir = out / "data"
    for s in samples:
        save_sample(s, data_dir, k)
    n_test = min(int(round(args.n * args.test_fraction)), args.n - 1)
    ids = [s.id for s in samples]
    manifest = DatasetManifest(
        root=Path("data"),
        k=k,
        dims_kind=f"{len(args.dims)}d",
        splits={"train": ids[: args.n - n_test], "test": ids[args.n - n_test :]},
    )
    write_manifest(manifest, out / "manifest.json")
    (out / "objects.json").write_text(_dump({s.id: s.meta for s in samples}))
    print(f"wrote {args.n} samples to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# decompose


def _write_label(path: Path, label: np.ndarray, k: int) -> None:
    if label.ndim == 2:
        write_png_label(path.with_suffix(".png"), label)
    else:
        write_raw(path.with_suffix(".raw"), label, "u8", k)


def cmd_decompose(args) -> int:
    manifest = load_manifest(args.manifest)
    method = normalize_method(args.method)
    splits = [args.split] if args.split else sorted(manifest.splits)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_modules = args.n_modules or manifest.k
    records = {}
    failures = []
    for split in splits:
        for sample_id in manifest.ids(split):
            sample = manifest.load_one(sample_id)
            result = decompose(
                sample.label,
                method,
                n_classes=manifest.k,
                t_shape=args.t_shape,
                connectivity=args.connectivity,
                n_modules=n_modules,
            )
            report = verify_partition(sample.label, result)
            if not report:
                failures.append({"id": sample_id, "violations": report.violations})
            for i, sub in enumerate(result.sub_maps):
                _write_label(out / f"{sample_id}_sub{i}", sub, manifest.k)
            records[sample_id] = {
                "split": split,
                "n_sub_maps": len(result),
                "assignments": result.assignments,
                "objects_per_sub_map": [
                    sum(1 for a in result.assignments if a.get("sub_map") == i) for i in range(len(result))
                ],
            }
    summary = {
        "method": method,
        "t_shape": args.t_shape if method == "shape" else None,
        "connectivity": args.connectivity,
        "samples": records,
    }
    (out / "assignments.json").write_text(_dump(summary))
    if failures:
        raise CliError(
            f"partition violated for {len(failures)} sample(s): {json.dumps(failures[:3])}",
            EXIT_PARTITION,
        )
    print(f"decomposed {len(records)} samples with method {method} into {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# train


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_run_config(config_path, overrides: list[str], out: str | None = None) -> dict:
    cfg = dict(RUN_DEFAULTS)
    if config_path is not None:
        path = Path(config_path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise CliError("config file not found", path=path) from None
        except json.JSONDecodeError as exc:
            raise CliError(f"config is not valid JSON ({exc})", path=path) from None
        if not isinstance(raw, dict):
            raise CliError("config must be a JSON object", path=path)
        cfg.update(raw)
    for item in overrides or []:
        if "=" not in item:
            raise CliError(f"override {item!r} must look like key=value")
        key, value = item.split("=", 1)
        cfg[key.strip()] = _coerce(value)
    if out is not None:
        cfg["out"] = out
    unknown = sorted(set(cfg) - set(RUN_DEFAULTS))
    if unknown:
        raise CliError(f"unknown config keys: {unknown}")
    for key in ("manifest", "out"):
        if not cfg[key]:
            raise CliError(f"config needs {key!r}")
    return cfg


def _train_config(cfg: dict) -> TrainConfig:
    keys = (
        "window", "batch", "max_iters", "lr", "lr_drop_iter", "lr_after_drop", "seed",
        "rotate", "flip", "log_every", "checkpoint_every", "t_shape", "connectivity",
    )
    try:
        return TrainConfig(**{k: cfg[k] for k in keys})
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid training config: {exc}") from exc


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.override, args.out)
    manifest = load_manifest(cfg["manifest"])
    tc = _train_config(cfg)
    try:
        spec = make_spec(
            manifest.k,
            cfg["method"],
            n_modules=cfg["n_modules"],
            depth=cfg["depth"],
            base_channels=cfg["base_channels"],
            kernel_size=cfg["kernel_size"],
            feed_raw_to_integrator=cfg["feed_raw_to_integrator"],
            lam=cfg["lambda"],
            spatial_dims=manifest.ndim,
            integrator_depth=cfg["integrator_depth"],
            integrator_channels=cfg["integrator_channels"],
        )
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid model config: {exc}") from exc
    samples = manifest.load(cfg["split"])
    if not samples:
        raise CliError(f"split {cfg['split']!r} is empty", path=cfg["manifest"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(_dump(cfg))
    model = build(spec, tc.seed)
    log_path = out / "train_log.jsonl"
    with open(log_path, "w") as fh:

        def on_row(row):
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            fh.flush()

        try:
            result = fit(model, samples, tc, checkpoint_dir=out / "checkpoints", on_row=on_row)
        except NonFiniteLossError as exc:
            save_checkpoint(capture_state(model, exc.iteration - 1, None, tc), out / "failed.ckpt")
            raise CliError(str(exc), EXIT_NONFINITE) from exc
        except ValueError as exc:
            raise CliError(str(exc)) from exc
    save_checkpoint(result.state, out / "model.ckpt")
    if cfg["timing"]:
        (out / "timing.jsonl").write_text("".join(json.dumps(t) + "\n" for t in result.timing))
    last = result.log[-1] if result.log else None
    print(json.dumps({"iterations": result.state.iteration, "last": last}, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    ids = manifest.ids(args.split) if args.split in manifest.splits else []
    if not ids:
        raise CliError(f"split {args.split!r} is empty", path=args.manifest)
    model = None
    window = None
    if not args.pred_from_gt:
        if not args.checkpoint:
            raise CliError("--checkpoint is required unless --pred-from-gt is given")
        try:
            state = load_checkpoint(args.checkpoint)
        except FormatError as exc:
            raise CliError(str(exc), path=args.checkpoint) from exc
        spec = state.spec
        if spec.n_classes != manifest.k or spec.spatial_dims != manifest.ndim:
            raise CliError(
                f"checkpoint spec (k={spec.n_classes}, {spec.spatial_dims}D, hash {spec.hash()[:12]}) "
                f"is incompatible with manifest (k={manifest.k}, {manifest.dims_kind})",
                path=args.checkpoint,
            )
        model = restore_model(state)
        window = args.window or state.config.get("window")
    rows = []
    reports = []
    for sample_id in ids:
        sample = manifest.load_one(sample_id)
        if model is None:
            pred = sample.label
        else:
            win = tuple(window) if window else sample.image.shape
            overlap = args.overlap if args.overlap is not None else min(win) // 2
            pred = predict(model, sample.image, win, overlap)
        report = evaluate(sample.label, pred, manifest.k)
        reports.append(report)
        rows.append({"id": sample_id, "metrics": report.to_dict()})
    doc = {
        "split": args.split,
        "k": manifest.k,
        "checkpoint": None if model is None else Path(args.checkpoint).name,
        "samples": rows,
        "summary": aggregate(reports),
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(_dump(doc))
    print(json.dumps({"n_samples": len(rows), "mean": doc["summary"]["mean"]}, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dinseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset and manifest")
    p.add_argument("--kind", choices=sorted(GENERATORS), required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--dims", type=_parse_dims, default=(64, 64))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--p-single", type=float, default=0.5)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("decompose", help="decompose every label map of a manifest")
    p.add_argument("--in", dest="manifest", required=True)
    p.add_argument("--method", required=True, type=lambda s: s.replace("-", "_"),
                   choices=list(METHODS))
    p.add_argument("--t-shape", type=float, default=DEFAULT_T_SHAPE)
    p.add_argument("--connectivity", type=int, default=None)
    p.add_argument("--n-modules", type=int, default=None)
    p.add_argument("--split", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("train", help="train a K-to-1 network")
    p.add_argument("--config", default=None)
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--window", type=_parse_dims, default=None)
    p.add_argument("--overlap", type=int, default=None)
    p.add_argument("--pred-from-gt", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def _thread_limit():
    value = os.environ.get("DINSEG_THREADS")
    if not value:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(value)))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except CliError as exc:
        err = {"command": args.command, "error": "CliError", "message": str(exc), "exit_code": exc.code}
        if exc.path:
            err["path"] = exc.path
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return exc.code
    except (FormatError, ValueError, KeyError, OSError) as exc:
        err = {"command": args.command, "error": type(exc).__name__, "message": str(exc), "exit_code": EXIT_INPUT}
        path = getattr(exc, "path", None) or getattr(exc, "filename", None)
        if path:
            err["path"] = str(path)
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
