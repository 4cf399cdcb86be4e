"""Command-line interface: gen, train, eval, ablate, sweep.

Exit codes: 0 success, 2 usage or configuration problem, 3 numeric
failure during training. Every command's outputs are reproducible from
its arguments and seed.
"""

from __future__ import annotations

import argparse
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .data import SynthSpec, generate_dataset, load_dataset, save_dataset
from .errors import ConfigError, DataError, MetricError, TrainingError
from .students import ArchConfig
from .trainer import (
    AdamWConfig,
    SGDConfig,
    TrainConfig,
    evaluate,
    load_checkpoint,
    run_training,
)

# config file / manifest keys ------------------------------------------

_TRAIN_KEYS = {
    "alpha": float,
    "beta": float,
    "gamma": float,
    "steps": int,
    "batch_size": int,
    "seed": int,
    "hfd_on": None,  # bool, parsed specially
    "region_bsd_on": None,
    "pixel_bsd_on": None,
    "eval_every": int,
    "checkpoint_every": int,
    "sgd_lr": float,
    "sgd_momentum": float,
    "sgd_weight_decay": float,
    "adamw_lr": float,
    "adamw_beta1": float,
    "adamw_beta2": float,
    "adamw_eps": float,
    "adamw_weight_decay": float,
}

_ARCH_KEYS = {
    "input_size": int,
    "num_classes": int,
    "cnn_channels": "ints",
    "vit_dims": "ints",
    "patch_size": int,
    "num_heads": int,
    "ffn_ratio": int,
}


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "on", "yes"):
        return True
    if low in ("0", "false", "off", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def parse_config_file(path) -> dict:
    """Line-based `key = value` with # comments; unknown keys are errors."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected `key = value`, got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key in _TRAIN_KEYS:
            conv = _TRAIN_KEYS[key]
            values[key] = _parse_bool(raw) if conv is None else conv(raw)
        elif key in _ARCH_KEYS:
            conv = _ARCH_KEYS[key]
            values[key] = tuple(int(v) for v in raw.split(",")) if conv == "ints" else conv(raw)
        else:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
    return values


def build_configs(values: dict) -> tuple:
    """(ArchConfig, TrainConfig) from a flat key/value mapping."""
    size = values.get("input_size", 32)
    acfg = ArchConfig(
        input_hw=(size, size),
        num_classes=values.get("num_classes", 4),
        cnn_channels=values.get("cnn_channels", (8, 16, 24)),
        vit_dims=values.get("vit_dims", (16, 32, 48)),
        patch_size=values.get("patch_size", 2),
        num_heads=values.get("num_heads", 2),
        ffn_ratio=values.get("ffn_ratio", 2),
    )
    sgd = SGDConfig(
        lr=values.get("sgd_lr", SGDConfig.lr),
        momentum=values.get("sgd_momentum", SGDConfig.momentum),
        weight_decay=values.get("sgd_weight_decay", SGDConfig.weight_decay),
    )
    adamw = AdamWConfig(
        lr=values.get("adamw_lr", AdamWConfig.lr),
        beta1=values.get("adamw_beta1", AdamWConfig.beta1),
        beta2=values.get("adamw_beta2", AdamWConfig.beta2),
        eps=values.get("adamw_eps", AdamWConfig.eps),
        weight_decay=values.get("adamw_weight_decay", AdamWConfig.weight_decay),
    )
    tcfg = TrainConfig(
        alpha=values.get("alpha", 1.0),
        beta=values.get("beta", 0.1),
        gamma=values.get("gamma", 1.0),
        steps=values.get("steps", 300),
        batch_size=values.get("batch_size", 4),
        seed=values.get("seed", 0),
        sgd=sgd,
        adamw=adamw,
        hfd_on=values.get("hfd_on", True),
        region_bsd_on=values.get("region_bsd_on", True),
        pixel_bsd_on=values.get("pixel_bsd_on", True),
        eval_every=values.get("eval_every", 50),
        checkpoint_every=values.get("checkpoint_every", 100),
    )
    return acfg, tcfg


def manifest_values(acfg: ArchConfig, tcfg: TrainConfig) -> dict:
    return {
        "alpha": tcfg.alpha,
        "beta": tcfg.beta,
        "gamma": tcfg.gamma,
        "steps": tcfg.steps,
        "batch_size": tcfg.batch_size,
        "seed": tcfg.seed,
        "sgd_lr": tcfg.sgd.lr,
        "sgd_momentum": tcfg.sgd.momentum,
        "sgd_weight_decay": tcfg.sgd.weight_decay,
        "adamw_lr": tcfg.adamw.lr,
        "adamw_beta1": tcfg.adamw.beta1,
        "adamw_beta2": tcfg.adamw.beta2,
        "adamw_eps": tcfg.adamw.eps,
        "adamw_weight_decay": tcfg.adamw.weight_decay,
        "hfd_on": tcfg.hfd_on,
        "region_bsd_on": tcfg.region_bsd_on,
        "pixel_bsd_on": tcfg.pixel_bsd_on,
        "eval_every": tcfg.eval_every,
        "checkpoint_every": tcfg.checkpoint_every,
        "input_size": acfg.input_hw[0],
        "num_classes": acfg.num_classes,
        "cnn_channels": ",".join(str(c) for c in acfg.cnn_channels),
        "vit_dims": ",".join(str(d) for d in acfg.vit_dims),
        "patch_size": acfg.patch_size,
        "num_heads": acfg.num_heads,
        "ffn_ratio": acfg.ffn_ratio,
    }


def build_tag() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except OSError:
        pass
    return f"codistill-{__version__}"


def write_manifest(path, acfg, tcfg, extra=None) -> None:
    lines = [f"build_tag = {build_tag()}"]
    for key, value in (extra or {}).items():
        lines.append(f"{key} = {value}")
    for key, value in manifest_values(acfg, tcfg).items():
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")


# commands ---------------------------------------------------------------

def cmd_gen(args) -> int:
    spec = SynthSpec(
        height=args.size,
        width=args.size,
        num_classes=args.classes,
        min_shapes=args.min_shapes,
        max_shapes=args.max_shapes,
        noise=args.noise,
        seed=args.seed,
    )
    save_dataset(args.out, generate_dataset(spec, args.n))
    print(f"wrote {args.n} records to {args.out}")
    return 0


def _resolved_configs(args) -> tuple:
    values = parse_config_file(args.config) if args.config else {}
    for key in _TRAIN_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return build_configs(values)


def _run_one_training(args, acfg, tcfg, out_dir):
    train_set = load_dataset(args.data)
    eval_set = load_dataset(args.eval_data) if args.eval_data else None
    sample_hw = train_set[0][0].shape[1:]
    if sample_hw != acfg.input_hw:
        acfg = replace(acfg, input_hw=sample_hw)
    return run_training(train_set, eval_set, acfg, tcfg, out_dir=out_dir), acfg


def cmd_train(args) -> int:
    acfg, tcfg = _resolved_configs(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_set = load_dataset(args.data)
    sample_hw = train_set[0][0].shape[1:]
    if sample_hw != acfg.input_hw:
        acfg = replace(acfg, input_hw=sample_hw)
    write_manifest(out_dir / "manifest.txt", acfg, tcfg, extra={"data": args.data, "eval_data": args.eval_data or args.data, "out": args.out})
    eval_set = load_dataset(args.eval_data) if args.eval_data else None
    result = run_training(train_set, eval_set, acfg, tcfg, out_dir=out_dir)
    print(f"final miou_c={result.miou_c:.9g} miou_v={result.miou_v:.9g}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    acfg, params_c, params_v, _ = load_checkpoint(ckpt)
    dataset = load_dataset(args.data)
    miou_c, miou_v = evaluate(params_c, params_v, acfg, dataset)
    print(f"miou_c={miou_c:.9g} miou_v={miou_v:.9g}")
    return 0


_TOGGLE_GRID = [(h, r, p) for h in (False, True) for r in (False, True) for p in (False, True)]


def cmd_ablate(args) -> int:
    acfg, base = _resolved_configs(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for hfd_on, region_on, pixel_on in _TOGGLE_GRID:
        tcfg = replace(base, hfd_on=hfd_on, region_bsd_on=region_on, pixel_bsd_on=pixel_on)
        cell = out_dir / f"cell_hfd{int(hfd_on)}_r{int(region_on)}_p{int(pixel_on)}"
        result, _ = _run_one_training(args, acfg, tcfg, cell)
        rows.append((hfd_on, region_on, pixel_on, result.miou_c, result.miou_v))
    base_sum = rows[0][3] + rows[0][4]  # all-off cell
    header = "hfd\tregion\tpixel\tmiou_c\tmiou_v\tdelta"
    lines = [header]
    for hfd_on, region_on, pixel_on, miou_c, miou_v in rows:
        delta = miou_c + miou_v - base_sum
        lines.append(f"{int(hfd_on)}\t{int(region_on)}\t{int(pixel_on)}\t{miou_c:.9g}\t{miou_v:.9g}\t{delta:.9g}")
    table = "\n".join(lines)
    (out_dir / "ablation.tsv").write_text(table + "\n")
    print(table)
    return 0


def cmd_sweep(args) -> int:
    acfg, base = _resolved_configs(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        points = [float(v) for v in args.values.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"bad sweep values {args.values!r}: {exc}") from exc
    if not points:
        raise ConfigError("sweep needs at least one value")
    vanilla = replace(base, beta=0.0, gamma=0.0)
    result_v, _ = _run_one_training(args, acfg, vanilla, out_dir / "vanilla")
    base_sum = result_v.miou_c + result_v.miou_v
    lines = [f"{args.param}\tmiou_c\tmiou_v\tdelta"]
    for value in points:
        tcfg = replace(base, **{args.param: value})
        cell = out_dir / f"{args.param}_{value:g}"
        result, _ = _run_one_training(args, acfg, tcfg, cell)
        lines.append(f"{value:g}\t{result.miou_c:.9g}\t{result.miou_v:.9g}\t{result.miou_c + result.miou_v - base_sum:.9g}")
    table = "\n".join(lines)
    (out_dir / f"sweep_{args.param}.tsv").write_text(table + "\n")
    print(table)
    return 0


# argument parsing ---------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(2)


def _add_train_flags(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--sgd-lr", dest="sgd_lr", type=float)
    p.add_argument("--adamw-lr", dest="adamw_lr", type=float)
    for toggle in ("hfd", "region-bsd", "pixel-bsd"):
        dest = toggle.replace("-", "_") + "_on"
        p.add_argument(f"--{toggle}", dest=dest, action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--eval-data", dest="eval_data", help="held-out dataset directory")


def make_parser() -> _Parser:
    parser = _Parser(prog="codistill", description="Collaborative two-student segmentation distillation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset directory")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--min-shapes", dest="min_shapes", type=int, default=1)
    p.add_argument("--max-shapes", dest="max_shapes", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="run collaborative training")
    _add_train_flags(p)
    p.add_argument("--out", required=True, help="run directory (manifest, metrics, checkpoints)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the 2x2x2 loss-toggle grid")
    _add_train_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="sweep alpha, beta or gamma over a value list")
    _add_train_flags(p)
    p.add_argument("--param", choices=("alpha", "beta", "gamma"), required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError, MetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
