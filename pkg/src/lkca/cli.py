"""Command line entry point: equivalence fuzzing, gradient checking,
training, evaluation, parameter accounting, and benchmarks.

Exit codes are a stable contract: 0 success, 1 check or runtime failure,
2 usage or config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import attention, bench, model as model_lib, train as train_lib
from .autodiff import cross_entropy_smoothed, grad_check
from .bench import BenchCase
from .model import CheckpointError, ModelConfig
from .tensor import F32, F64, NumericsError, SeededRng, ShapeError
from .train import IdxFormatError, TrainConfig


class ConfigError(ValueError):
    """Problem with a config file or its values (exit code 2)."""


# ---------------------------------------------------------------------------
# key = value config files
# ---------------------------------------------------------------------------

def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


MODEL_KEYS = {
    "image_h": int, "image_w": int, "channels": int, "patch": int, "dim": int,
    "mixers": str, "mlp_ratio": int, "num_classes": int,
    "use_pos_embed": _parse_bool, "kernel_init": str,
}
TRAIN_KEYS = {
    "view": str, "batch_size": int, "total_steps": int, "warmup_steps": int,
    "base_lr": float, "min_lr": float, "weight_decay": float,
    "label_smoothing": float, "eval_every": int, "seed": int, "data": str,
    "train_samples": int, "test_samples": int, "noise_std": float,
    "idx_train_images": str, "idx_train_labels": str,
    "idx_test_images": str, "idx_test_labels": str,
    "metrics_path": str, "checkpoint_path": str,
}

# keep the key tables honest against the dataclasses they mirror
assert set(MODEL_KEYS) == {f.name for f in dataclasses.fields(ModelConfig)}
assert set(TRAIN_KEYS) == {f.name for f in dataclasses.fields(TrainConfig)} - {"model"}


def parse_config_text(text: str) -> dict:
    """Line-oriented `key = value`; `#` starts a comment; blank lines ok."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', "
                              f"got {stripped!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def build_train_config(raw: dict) -> TrainConfig:
    unknown = sorted(set(raw) - set(MODEL_KEYS) - set(TRAIN_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

    def coerce(key, conv):
        try:
            return conv(raw[key])
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from exc

    model_kwargs = {k: coerce(k, c) for k, c in MODEL_KEYS.items() if k in raw}
    train_kwargs = {k: coerce(k, c) for k, c in TRAIN_KEYS.items() if k in raw}
    try:
        return TrainConfig(model=ModelConfig(**model_kwargs), **train_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_train_config(path, echo: bool = True) -> TrainConfig:
    with open(path, "r") as fh:
        raw = parse_config_text(fh.read())
    cfg = build_train_config(raw)
    if echo:
        for key in MODEL_KEYS:
            mark = "" if key in raw else "  (default)"
            print(f"config: {key} = {getattr(cfg.model, key)}{mark}")
        for key in TRAIN_KEYS:
            mark = "" if key in raw else "  (default)"
            print(f"config: {key} = {getattr(cfg, key)}{mark}")
    return cfg


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _grid_spec(text: str):
    try:
        h_str, w_str = text.lower().split("x")
        gh, gw = int(h_str), int(w_str)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected GhxGw like 4x4, got {text!r}")
    if gh < 1 or gw < 1:
        raise argparse.ArgumentTypeError(f"grid extents must be >= 1, got {text!r}")
    return gh, gw


def cmd_equiv(args) -> int:
    gh, gw = args.grid
    dtype = F32 if args.precision == "f32" else F64
    spectral_tol = 1e-4
    failures = 0
    for i in range(args.cases):
        rng = SeededRng(args.seed + i)
        layer = attention.init_layer(gh, gw, args.dim, rng,
                                     kernel_init="trunc_normal", dtype=dtype)
        x = rng.normal((args.batch, gh * gw, args.dim), 0.0, 1.0, dtype=dtype)
        ref = attention.forward_attention_view(x, layer)
        dev_conv = float(np.abs(attention.forward_conv_view(x, layer) - ref).max())
        dev_spec = float(np.abs(attention.forward_spectral_view(x, layer) - ref).max())
        tol = 1e-5 * (1.0 + float(np.abs(ref).max())) if dtype is F32 else 1e-10
        ok = dev_conv <= tol and dev_spec <= spectral_tol
        failures += not ok
        print(f"case {i:3d}: conv dev {dev_conv:.3e} (tol {tol:.3e})  "
              f"spectral dev {dev_spec:.3e} (tol {spectral_tol:.0e})  "
              f"{'ok' if ok else 'FAIL'}")
    print(f"{args.cases - failures}/{args.cases} cases within tolerance")
    return 0 if failures == 0 else 1


def cmd_grad_check(args) -> int:
    cfg = load_train_config(args.config)
    mc = cfg.model
    base = model_lib.build_model(mc, seed=cfg.seed)
    params64 = {k: v.astype(F64) for k, v in model_lib.param_registry(base).items()}
    model64 = model_lib.bind_params(base, params64)
    rng = SeededRng(cfg.seed + 1)
    batch = 2
    images = rng.uniform(batch * mc.image_h * mc.image_w * mc.channels).reshape(
        batch, mc.image_h, mc.image_w, mc.channels)
    labels = rng.integers(0, mc.num_classes, batch)

    def loss_fn(params):
        bound = model_lib.bind_params(model64, params)
        logits = model_lib.model_forward(images, bound)
        return cross_entropy_smoothed(logits, labels, cfg.label_smoothing)

    report = grad_check(loss_fn, params64, tolerance=1e-5)
    print(report)
    return 0 if report.passed else 1


def cmd_train(args) -> int:
    cfg = load_train_config(args.config)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        if not cfg.metrics_path:
            cfg.metrics_path = os.path.join(args.out, "metrics.csv")
        if not cfg.checkpoint_path:
            cfg.checkpoint_path = os.path.join(args.out, "checkpoint.bin")
    result = train_lib.train_loop(cfg)
    if result.history:
        last = result.history[-1]
        summary = f"step {last.step}: lr {last.lr:.6g} loss {last.loss:.6g}"
        if last.train_acc is not None:
            summary += f" train_acc {last.train_acc:.4f}"
        if last.test_acc is not None:
            summary += f" test_acc {last.test_acc:.4f}"
        print(summary)
    else:
        print("no steps requested; wrote initial checkpoint")
    if cfg.metrics_path:
        print(f"metrics written to {cfg.metrics_path}")
    if cfg.checkpoint_path:
        print(f"checkpoint written to {cfg.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_train_config(args.config)
    model = model_lib.build_model(cfg.model, seed=cfg.seed)
    model = model_lib.load_checkpoint(args.checkpoint, model)
    model = model_lib.set_mixer_view(model, cfg.view)
    if args.data:
        parts = args.data.split(",")
        if len(parts) != 2:
            raise ConfigError(f"--data wants 'images.idx,labels.idx', got {args.data!r}")
        data = train_lib.load_idx_dataset(parts[0], parts[1])
    else:
        train_data, test_data = train_lib.build_datasets(cfg)
        data = test_data if test_data is not None else train_data
    acc = train_lib.evaluate(model, data)
    print(f"accuracy {acc:.4f} on {data.size} samples")
    return 0


def cmd_params(args) -> int:
    cfg = load_train_config(args.config)
    model = model_lib.build_model(cfg.model, seed=cfg.seed)
    registry = model_lib.param_registry(model)
    width = max(len(name) for name in registry)
    for name, arr in registry.items():
        shape = "x".join(str(s) for s in arr.shape)
        print(f"{name:<{width}}  {shape:>9}  {arr.size}")
    enumerated = sum(arr.size for arr in registry.values())
    closed = model_lib.count_model_params(cfg.model)
    if enumerated != closed:
        print(f"error: registry total {enumerated} != closed form {closed}",
              file=sys.stderr)
        return 1
    print(f"total {enumerated}")
    return 0


def _parse_bench_cases(path) -> list:
    """One case per line: grid_h grid_w dim batch view [reps] [warmup] [seed];
    `#` comments."""
    cases = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            parts = stripped.split()
            if len(parts) < 5 or len(parts) > 8:
                raise ConfigError(f"{path}:{lineno}: expected 'grid_h grid_w dim "
                                  f"batch view [reps] [warmup] [seed]'")
            try:
                nums = [int(p) for p in parts[:4]]
                extra = [int(p) for p in parts[5:]]
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from exc
            kwargs = dict(zip(("repetitions", "warmup_reps", "seed"), extra))
            try:
                cases.append(BenchCase(nums[0], nums[1], nums[2], nums[3],
                                       view=parts[4], **kwargs))
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from exc
    if not cases:
        raise ConfigError(f"{path}: no bench cases found")
    return cases


def cmd_bench(args) -> int:
    cases = _parse_bench_cases(args.cases)
    results = bench.run_suite(cases, csv_path=args.out)
    for r in results:
        c = r.case
        ident = f"{c.grid_h}x{c.grid_w} d={c.dim} b={c.batch} {c.view}"
        if r.skipped:
            print(f"{ident}: skipped ({r.skipped_reason})")
        else:
            print(f"{ident}: min {r.min_s:.3e}s mean {r.mean_s:.3e}s "
                  f"macs {r.macs_measured}")
    print(f"bench CSV written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser and entry
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lkca",
        description="Shared-kernel attention: equivalence checks, training, "
                    "and accounting.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("equiv", help="fuzz the view equivalence")
    p.add_argument("--grid", type=_grid_spec, default=(4, 4), metavar="GhxGw")
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--cases", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", choices=("f32", "f64"), default="f32")
    p.set_defaults(func=cmd_equiv)

    p = sub.add_parser("grad-check", help="full-model gradient check in f64")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("train", help="train per a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="", help="directory for metrics.csv and "
                                             "checkpoint.bin")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--data", default="", help="images.idx,labels.idx override")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("params", help="parameter accounting for a config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("bench", help="timing/MAC suite from a cases file")
    p.add_argument("--cases", required=True)
    p.add_argument("--out", required=True, help="bench CSV destination")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, IdxFormatError, NumericsError, ShapeError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
