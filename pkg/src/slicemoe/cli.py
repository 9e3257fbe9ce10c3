"""``slicemoe`` command line: train, eval, ablate, bench, gradcheck."""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .config import FLAT_KEYS, TrainConfig, read_config_file, resolve, to_flat
from .errors import ConfigError, SliceMoEError

MANIFEST_SCHEMA_VERSION = 1


class UsageError(SliceMoEError):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2, which is reserved for config errors
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _parse_set(items: Sequence[str] | None) -> dict[str, str]:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key = key.strip()
        if key not in FLAT_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = value
    return out


def resolve_args(args: argparse.Namespace) -> TrainConfig:
    """Built-in defaults < ``--config`` file < ``--set`` / dedicated flags."""
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    overrides: dict[str, object] = _parse_set(getattr(args, "set", None))
    for key in ("seed", "epochs"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    return resolve(file_values, overrides)


def config_hash(flat: dict) -> str:
    """Git-style blob hash (sha1 over ``blob <len>\\0`` + canonical JSON) of a resolved config."""
    body = json.dumps(flat, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _print_config(cfg: TrainConfig) -> None:
    for key, value in to_flat(cfg).items():
        print(f"config {key} = {value}")


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .harness.train import train, write_metrics_csv, write_timing_csv

    cfg = resolve_args(args)
    _print_config(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    flat = to_flat(cfg)
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "package_version": __version__,
        "config": flat,
        "seed": cfg.seed,
        "config_hash": config_hash(flat),
        "started": _now(),
    }

    def report(m):
        print(
            f"epoch {m.epoch} train_loss={m.train_loss:.4f} cap_loss={m.cap_loss:.5f} "
            f"val_loss={m.val_loss:.4f} val_acc={m.val_acc:.4f} ele={m.ele:.4f} wall_ms={m.wall_ms:.0f}",
            flush=True,
        )

    result = train(cfg, on_epoch=report)
    write_metrics_csv(result.history, out / "metrics.csv", include_wall_time=args.wall_time)
    write_timing_csv(result.history, out / "timing.csv")
    save_checkpoint(out / "final.ckpt", result.model, cfg, result.optimizer)
    manifest["finished"] = _now()
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out / 'manifest.json'}, {out / 'metrics.csv'}, {out / 'final.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .config import from_flat
    from .harness.data import generate_synthetic
    from .harness.train import evaluate

    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    if args.data:
        flat = to_flat(cfg)
        flat.update(read_config_file(args.data))
        cfg = from_flat(flat)
    data = generate_synthetic(cfg.data)
    res = evaluate(
        ckpt.model, data.x_val, data.y_val, cfg.eval_batch_size,
        eval_noise=cfg.eval_noise, seed=cfg.seed, mode=cfg.dispatch,
    )
    report = {"val_acc": res.accuracy, "val_loss": res.loss, "ele": res.ele, "n": int(len(data.y_val))}
    for k, v in report.items():
        print(f"{k}={v!r}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "eval.json").write_text(json.dumps(report, indent=2) + "\n")
    return 0


def cmd_ablate(args) -> int:
    from .harness.ablation import SWEEPS, ablate

    cfg = resolve_args(args)
    key, _ = SWEEPS[args.sweep]
    values = None
    if args.values:
        values = [v.strip() for v in args.values.split(",")]
        # coerce through the config layer so "8" becomes an int, etc.
        values = [getattr(cfg.replace(**{key: v}).model, key) for v in values]
    seeds = [int(s) for s in args.seeds.split(",")]
    _print_config(cfg)
    table = ablate(args.sweep, cfg, values=values, seeds=seeds, workers=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"ablation_{args.sweep}.csv"
    table.write_csv(path)
    for setting in table.settings():
        print(
            f"{key}={setting} val_acc={table.mean(setting, 'val_acc'):.4f} "
            f"ele={table.mean(setting, 'ele'):.4f} val_loss={table.mean(setting, 'val_loss'):.4f}"
        )
    print(f"wrote {path}")
    return 0


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",")]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from None


def cmd_bench(args) -> int:
    from .bench import grid_from_lists, run_bench

    ffn = [None] if args.ffn is None else _int_list(args.ffn)
    grid = grid_from_lists(
        _int_list(args.batch), _int_list(args.d), _int_list(args.slices), _int_list(args.experts),
        _int_list(args.k), ffn, dtype=args.dtype, seed=args.seed or 0,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = run_bench(grid, repeats=args.repeats, warmup=args.warmup, threads=args.threads, out_csv=out / "bench.csv")
    for r in results:
        s = r.spec
        print(
            f"B={s.batch} d={s.d} S={s.n_slices} E={s.n_experts} k={s.top_k} F={s.ffn_width} "
            f"naive_ms={r.naive_ms:.3f} grouped_ms={r.grouped_ms:.3f} speedup={r.speedup:.2f} "
            f"flops={r.flops.total} checksum={r.checksum}"
        )
    print(f"wrote {out / 'bench.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import CASES, TOLERANCE, run_gradcheck

    names = args.ops.split(",") if args.ops else None
    for n in names or ():
        if n not in CASES:
            raise UsageError(f"unknown gradcheck op {n!r}; choose from {', '.join(CASES)}")
    results = run_gradcheck(names, points=args.points, seed=args.seed or 0)
    ok = True
    for name, err in results.items():
        passed = err < TOLERANCE
        ok &= passed
        print(f"{name:24s} max_rel_err={err:.3e} {'PASS' if passed else 'FAIL'}")
    return 0 if ok else 4


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="slicemoe", description=__doc__)
    parser.add_argument("--version", action="version", version=f"slicemoe {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_default: str | None = "run"):
        p.add_argument("--config", metavar="PATH", help="flat key = value config file")
        p.add_argument("--seed", type=int, metavar="U64")
        p.add_argument("--out", metavar="DIR", default=out_default)
        p.add_argument("--threads", type=int, default=1, metavar="N")

    def overrides(p):
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
        p.add_argument("--epochs", type=int)

    p = sub.add_parser("train", help="train on the synthetic task")
    common(p)
    overrides(p)
    p.add_argument("--wall-time", action="store_true", help="fill wall_ms in metrics.csv (breaks bitwise reproducibility)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on its validation split")
    common(p, out_default=None)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--data", metavar="PATH", help="config file overriding the data spec")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run one ablation sweep")
    common(p)
    overrides(p)
    p.add_argument("--sweep", required=True, choices=["slices", "k", "noise", "temperature", "shuffle"])
    p.add_argument("--values", help="comma-separated sweep values (default: the built-in grid)")
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="time naive vs grouped dispatch")
    common(p, out_default="bench")
    p.add_argument("--batch", default="1,64,256")
    p.add_argument("--d", default="768")
    p.add_argument("--slices", default="8")
    p.add_argument("--experts", default="16")
    p.add_argument("--k", default="1,2,3")
    p.add_argument("--ffn", default=None, help="expert hidden width(s); default 4 * slice width")
    p.add_argument("--dtype", default="float64", choices=["float64", "float32"])
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--warmup", type=int, default=3)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seed", type=int)
    p.add_argument("--points", type=int, default=10)
    p.add_argument("--ops", help="comma-separated subset of cases")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be >= 1")
        return args.func(args)
    except SliceMoEError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
