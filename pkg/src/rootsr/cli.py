"""``rootsr`` command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

``train`` and ``segtrain`` accept ``--config FILE`` holding ``key = value``
lines named like the long flags. Explicit flags override the file, which
overrides the defaults; the effective settings are echoed to
``<out>/config.echo``, which can be passed back through ``--config`` to
repeat the run.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Callable

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (
    ArchitectureError,
    ConfigError,
    ManifestError,
    ParameterError,
    RootSRError,
    ShapeError,
)
from .evaluation import evaluate_models, format_table, model_sr_function, write_table_tsv
from .gradcheck import CHECKS, DEFAULT_SEEDS, THRESHOLD, run_gradcheck
from .imaging import (
    PATCH_SIZE,
    SCALE,
    GrayImage,
    bicubic_resize,
    combine_manifests,
    load_image,
    load_manifest,
    make_synthetic_dataset,
    save_image,
)
from .models import FsrcnnConfig, super_resolve
from .tensor import AdamConfig
from .training import SegTrainConfig, TrainConfig, train, train_segmenter

USAGE_ERRORS = (ConfigError, ParameterError, ShapeError, ManifestError, ArchitectureError)


class UsageError(Exception):
    """Bad flags or config; maps to exit code 2."""


# ---------------------------------------------------------------------------
# config files


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _path_list(text: str) -> list[str]:
    return [p.strip() for p in str(text).split(",") if p.strip()]


def _optional(conv: Callable) -> Callable:
    return lambda text: None if str(text).strip().lower() in ("", "none") else conv(text)


# key -> (converter, default); keys double as long flag names
TRAIN_KEYS: dict[str, tuple[Callable, Any]] = {
    "mode": (str, "fsrcnn"),
    "manifest": (_path_list, []),
    "out": (str, None),
    "epochs": (int, 100),
    "seed": (int, 0),
    "batch-size": (int, 100),
    "lr": (float, 0.001),
    "patches-per-image": (int, 4),
    "val-count": (_optional(int), None),
    "val-dataset": (_optional(int), None),
    "init-checkpoint": (_optional(str), None),
    "content-weight": (float, 1.0),
    "adversarial-weight": (float, 1.0),
    "saturating": (_bool, False),
    "d": (int, 56),
    "s": (int, 12),
    "m": (int, 4),
    "keep-epoch-checkpoints": (_bool, True),
}


SEGTRAIN_KEYS: dict[str, tuple[Callable, Any]] = {
    "manifest": (_path_list, []),
    "out": (str, None),
    "epochs": (int, 20),
    "seed": (int, 0),
    "batch-size": (int, 16),
    "lr": (float, 0.001),
    "patches-per-image": (int, 4),
}


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment line."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("_", "-")] = value
    return out


def resolve_config(keys: dict[str, tuple[Callable, Any]], args: argparse.Namespace
                   ) -> dict[str, Any]:
    """Defaults, then config-file values, then explicitly given flags."""
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    unknown = sorted(set(file_values) - set(keys))
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    resolved = {}
    for key, (conv, default) in keys.items():
        flag = getattr(args, key.replace("-", "_"), None)
        try:
            if flag is not None:
                resolved[key] = flag
            elif key in file_values:
                resolved[key] = conv(file_values[key])
            else:
                resolved[key] = default
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {exc}") from None
    return resolved


def echo_config(resolved: dict[str, Any], path: Path) -> None:
    def show(v):
        if v is None:
            return "none"
        if isinstance(v, list):
            return ",".join(str(Path(p).resolve()) for p in v)
        if isinstance(v, bool):
            return "true" if v else "false"
        return str(v)

    lines = []
    for key, value in resolved.items():
        if key in ("out", "init-checkpoint") and value is not None:
            value = str(Path(value).resolve())
        lines.append(f"{key} = {show(value)}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_manifests(paths: list[str]):
    if not paths:
        raise UsageError("at least one --manifest is required")
    manifests = [load_manifest(p) for p in paths]
    if len(manifests) == 1:
        return manifests[0]
    # several manifests: each becomes its own dataset id, in flag order
    return combine_manifests([(Path(p).stem if Path(p).stem != "manifest" else Path(p).parent.name,
                               m) for p, m in zip(paths, manifests)])


# ---------------------------------------------------------------------------
# commands


def cmd_make_synthetic(args: argparse.Namespace) -> int:
    if args.size < PATCH_SIZE:
        raise UsageError(f"--size {args.size} is below the {PATCH_SIZE}-pixel training patch; "
                         f"images must be at least {PATCH_SIZE}x{PATCH_SIZE}")
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    make_synthetic_dataset(args.n, args.size, args.size, args.seed, args.out, kind=args.kind,
                           dataset_id=args.dataset_id, name=args.name)
    print(Path(args.out) / "manifest.tsv")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(TRAIN_KEYS, args)
    if cfg["out"] is None:
        raise UsageError("--out is required")
    manifest = _load_manifests(cfg["manifest"])
    try:
        adam = AdamConfig(learning_rate=cfg["lr"])
        fsrcnn = FsrcnnConfig(d=cfg["d"], s=cfg["s"], m=cfg["m"])
    except ParameterError as exc:
        raise UsageError(str(exc)) from None
    config = TrainConfig(
        mode=cfg["mode"], epochs=cfg["epochs"], batch_size=cfg["batch-size"], adam=adam,
        patches_per_image=cfg["patches-per-image"], val_count=cfg["val-count"],
        val_dataset=cfg["val-dataset"], seed=cfg["seed"], init_checkpoint=cfg["init-checkpoint"],
        content_weight=cfg["content-weight"], adversarial_weight=cfg["adversarial-weight"],
        saturating=cfg["saturating"], fsrcnn=fsrcnn, out_dir=cfg["out"],
        keep_epoch_checkpoints=cfg["keep-epoch-checkpoints"])
    if config.mode == "muldis" and len(manifest.dataset_ids()) < 2:
        raise ConfigError("muldis needs a manifest with at least 2 datasets "
                          f"(found {len(manifest.dataset_ids())}); pass several --manifest flags")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out / "config.echo")
    report = train(manifest, config)
    print(f"best epoch {report.best_epoch}  val_snr {report.best_val_snr:.4f}  "
          f"{report.best_checkpoint_path}")
    return 0


def cmd_segtrain(args: argparse.Namespace) -> int:
    cfg = resolve_config(SEGTRAIN_KEYS, args)
    if cfg["out"] is None:
        raise UsageError("--out is required")
    manifest = _load_manifests(cfg["manifest"])
    try:
        adam = AdamConfig(learning_rate=cfg["lr"])
    except ParameterError as exc:
        raise UsageError(str(exc)) from None
    config = SegTrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch-size"],
                            patches_per_image=cfg["patches-per-image"], adam=adam,
                            seed=cfg["seed"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out / "config.echo")
    model = train_segmenter(manifest, config)
    save_checkpoint(model, out / "segmenter.ckpt", epoch=config.epochs, seed=config.seed)
    print(out / "segmenter.ckpt")
    return 0


def _sr_one(img: GrayImage, model, factor: int) -> GrayImage:
    h, w = img.pixels.shape
    if model is None:
        return bicubic_resize(img, w * factor, h * factor)
    small = img.pixels[None, None]
    up = bicubic_resize(img, w * factor, h * factor).pixels[None, None]
    return GrayImage(super_resolve(model, small, up)[0, 0])


def cmd_superresolve(args: argparse.Namespace) -> int:
    if (args.checkpoint is None) == (args.baseline is None):
        raise UsageError("give exactly one of --checkpoint or --baseline bicubic")
    if args.factor < 1:
        raise UsageError("--factor must be positive")
    model, factor = None, args.factor
    if args.checkpoint is not None:
        model, meta = load_checkpoint(args.checkpoint)
        if meta.arch == "fsrcnn":
            native = int(model.config.get("n", SCALE))
        elif meta.arch == "generator":
            native = SCALE
        else:
            raise ArchitectureError(f"{args.checkpoint} holds a {meta.arch!r} network, "
                                    "not a super-resolution model")
        if args.factor != native:
            raise UsageError(f"checkpoint upscales x{native}, but --factor {args.factor} was given")
    inputs = [Path(p) for p in args.input]
    out = Path(args.out)
    single_file = len(inputs) == 1 and out.suffix.lower() in (".pgm", ".ppm")
    if not single_file:
        out.mkdir(parents=True, exist_ok=True)
    for src in inputs:
        result = _sr_one(load_image(src), model, factor)
        dest = out if single_file else out / (src.stem + "_sr.pgm")
        save_image(result, dest)
        print(dest)
    return 0


def _unique_names(paths: list[str]) -> list[str]:
    names = []
    for p in paths:
        path = Path(p)
        base = path.parent.name if path.stem == "best" and path.parent.name else path.stem
        name, k = base, 2
        while name in names or name in ("Bicubic", "HR"):
            name, k = f"{base}-{k}", k + 1
        names.append(name)
    return names


def cmd_evaluate(args: argparse.Namespace) -> int:
    if args.iou and args.segmenter is None:
        raise UsageError("--iou needs --segmenter")
    manifest = load_manifest(args.manifest)
    models = []
    names = args.names.split(",") if args.names else _unique_names(args.checkpoints)
    if len(names) != len(args.checkpoints):
        raise UsageError("--names must list one name per checkpoint")
    for name, path in zip(names, args.checkpoints):
        model, meta = load_checkpoint(path)
        if meta.arch not in ("fsrcnn", "generator"):
            raise ArchitectureError(f"{path} holds a {meta.arch!r} network, not an SR model")
        models.append((name, model_sr_function(model)))
    segmenter = None
    if args.iou:
        segmenter, _ = load_checkpoint(args.segmenter, expected_arch="segmenter")
    records = evaluate_models(models, manifest, segmenter=segmenter)
    sys.stdout.write(format_table(records))
    if args.out:
        write_table_tsv(records, args.out)
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    ops = args.op or None
    results = run_gradcheck(ops, seeds=args.seeds, eps=args.eps, dtype=args.dtype)
    width = max(len(r.op) for r in results)
    failed = []
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.op:<{width}}  max_rel_err={r.max_error:.3e}  checked={r.checked}  "
              f"kinks_skipped={r.skipped}  {r.seconds:.1f}s  {status}")
        if not r.passed:
            failed.append(r)
    for r in failed:
        print(f"gradcheck failed: {r.op} max relative error {r.max_error:.3e} "
              f"(threshold {THRESHOLD:g}), {r.skipped} of {r.checked + r.skipped} probes "
              f"unscorable", file=sys.stderr)
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(p: argparse.ArgumentParser, keys: dict) -> None:
    # every default is None so explicitly given flags can be told apart from config-file values
    p.add_argument("--config", help="file of 'key = value' lines named like these flags")
    p.add_argument("--manifest", action="append", help="manifest TSV; repeat to combine datasets")
    p.add_argument("--out", help="run directory")
    for key, (conv, default) in keys.items():
        if key in ("manifest", "out"):
            continue
        typ = {int: int, float: float}.get(conv, conv)
        p.add_argument(f"--{key}", type=typ, default=None, help=f"default: {default}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rootsr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="write a synthetic image set with masks and manifest")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("roots", "texture"), default="roots")
    p.add_argument("--dataset-id", type=int, default=0)
    p.add_argument("--name", default=None, help="dataset name recorded in the manifest")
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("train", help="train fsrcnn / srgan / muldis, or fine-tune a checkpoint")
    _add_train_flags(p, TRAIN_KEYS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segtrain", help="train the stand-in root segmenter on HR images + masks")
    _add_train_flags(p, SEGTRAIN_KEYS)
    p.set_defaults(func=cmd_segtrain)

    p = sub.add_parser("superresolve", help="upscale images with a checkpoint or bicubic")
    p.add_argument("input", nargs="+", help="LR input image(s), PGM or PPM")
    p.add_argument("--out", required=True, help="output .pgm (single input) or directory")
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", choices=("bicubic",))
    p.add_argument("--factor", type=int, default=SCALE)
    p.set_defaults(func=cmd_superresolve)

    p = sub.add_parser("evaluate", help="SNR / IoU table over a test manifest")
    p.add_argument("checkpoints", nargs="*", help="SR checkpoints to compare")
    p.add_argument("--manifest", required=True)
    p.add_argument("--names", help="comma-separated row names, one per checkpoint")
    p.add_argument("--segmenter", help="segmenter checkpoint for the IoU columns")
    p.add_argument("--iou", action="store_true", help="add IoU columns (needs masks)")
    p.add_argument("--out", help="also write the table as TSV")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and model")
    p.add_argument("--op", action="append", choices=list(CHECKS), help="restrict to op(s)")
    p.add_argument("--eps", type=float, default=None, help="step (default 1e-6 in float64)")
    p.add_argument("--seeds", type=int, default=DEFAULT_SEEDS)
    p.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, *USAGE_ERRORS) as exc:
        print(f"rootsr {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (RootSRError, OSError) as exc:
        print(f"rootsr {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
