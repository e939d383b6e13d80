"""Command-line entry point: ``unifactor <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.

Training subcommands write a run directory holding ``manifest.json``,
``config.ini`` (the resolved config), ``reports.jsonl`` and
``checkpoint.ckpt``. Relative ``--out`` paths are resolved against
``$UNIFACTOR_OUT_ROOT`` when it is set.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
import traceback
from pathlib import Path

from . import __version__
from .checkpoint import write_atomic
from .config import RunConfig, dump_config, load_config
from .errors import ConfigError
from .seeding import derive_seed, set_strict_deterministic
from .synthdata import Dataset, generate_dataset, load_dataset, save_dataset

log = logging.getLogger("unifactor")

OUT_ROOT_ENV = "UNIFACTOR_OUT_ROOT"
COMMANDS = ("gen-data", "pretrain", "stage1", "stage2", "sft-baseline", "diagnose", "eval", "export-factors")

# which ablation flags each subcommand accepts
ABLATIONS = {
    "pretrain": {"mask_pattern"},
    "stage1": {"mask_pattern", "mid_range", "encoder"},
    "stage2": {"no_uni", "no_sg", "mask_pattern"},
    "sft-baseline": {"mask_pattern", "mid_range"},
}
ABLATION_FLAGS = {
    "no_uni": "--no-uni",
    "no_sg": "--no-sg",
    "mask_pattern": "--mask-pattern",
    "mid_range": "--mid-range",
    "encoder": "--encoder",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _mid_range(text: str) -> tuple[int, int]:
    try:
        a, b = text.split(":")
        return int(a), int(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a:b, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="unifactor", description="Factorized shared/unique post-training lab.")
    p.add_argument("--version", action="version", version=f"unifactor {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, out_help):
        sp.add_argument("--seed", type=int, default=0, help="master seed")
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
        sp.add_argument("--out", required=True, help=out_help)
        sp.add_argument("--strict-deterministic", action="store_true")
        sp.add_argument("--verbose", "-v", action="store_true")

    def ablations(sp):
        sp.add_argument("--no-uni", action="store_true", help="drop the unique CLUB term")
        sp.add_argument("--no-sg", action="store_true", help="live targets instead of stop-gradient EMA")
        sp.add_argument("--mask-pattern", choices=("random", "contiguous"))
        sp.add_argument("--mid-range", type=_mid_range, metavar="A:B")
        sp.add_argument("--encoder", choices=("gated-mlp", "linear-ln"))

    sp = sub.add_parser("gen-data", help="generate a paired synthetic dataset")
    common(sp, "output JSON-lines file")

    for name, hlp in (("pretrain", "train the base model"), ("stage1", "encoder warmup, frozen backbone"),
                      ("sft-baseline", "native-loss fine-tuning baseline")):
        sp = sub.add_parser(name, help=hlp)
        common(sp, "run directory")
        sp.add_argument("--data", required=True, help="training dataset (JSON-lines)")
        if name != "pretrain":
            sp.add_argument("--base", help="base-model checkpoint (default: fresh initialisation)")
        sp.add_argument("--stop-at", type=int, help="stop after this many steps (checkpoint is resumable)")
        ablations(sp)

    sp = sub.add_parser("stage2", help="backbone refinement from a stage-1 checkpoint")
    common(sp, "run directory")
    sp.add_argument("--data", required=True)
    sp.add_argument("--from-stage1", help="stage-1 checkpoint, or a partial stage-2 checkpoint to resume")
    sp.add_argument("--stop-at", type=int)
    ablations(sp)

    sp = sub.add_parser("eval", help="held-out evaluation, writes one JSON report")
    common(sp, "output JSON file")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True, help="held-out dataset")
    sp.add_argument("--batch-size", type=int)
    ablations(sp)

    sp = sub.add_parser("diagnose", help="layer-wise flow diagnostics")
    common(sp, "output directory for one CSV per metric")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--metrics", required=True, help="comma list from residual,er,grad_conflict,freq")
    sp.add_argument("--batch-size", type=int, default=64)
    ablations(sp)

    sp = sub.add_parser("export-factors", help="write shared/unique factors as CSV")
    common(sp, "output CSV file")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    ablations(sp)
    return p


def _check_ablations(args) -> None:
    allowed = ABLATIONS.get(args.command, set())
    for key, flag in ABLATION_FLAGS.items():
        val = getattr(args, key, None)
        if val not in (None, False) and key not in allowed:
            raise UsageError(f"{flag} cannot be used with {args.command}")


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if getattr(args, "mask_pattern", None):
        out["mask.pattern"] = args.mask_pattern
    if getattr(args, "mid_range", None):
        out["model.mid_range"] = args.mid_range
    if getattr(args, "encoder", None):
        out["model.encoder"] = args.encoder
    if getattr(args, "no_uni", False):
        out["stage2.no_uni"] = True
    if getattr(args, "no_sg", False):
        out["stage2.no_sg"] = True
    return out


def resolve_out(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


class Manifest:
    """Run manifest written before work starts and finalised on exit."""

    def __init__(self, path: Path, args, cfg: RunConfig | None, outputs: dict):
        self.path = path
        self.data = {
            "command": args.command,
            "argv": list(sys.argv[1:]) if args.argv is None else list(args.argv),
            "seed": args.seed,
            "version": f"unifactor {__version__}",
            "config": cfg.to_dict() if cfg is not None else None,
            "strict_deterministic": bool(args.strict_deterministic),
            "started": _now(),
            "ended": None,
            "status": "running",
            "outputs": {k: str(v) for k, v in outputs.items()},
        }
        self._write()

    def _write(self):
        write_atomic(self.path, (json.dumps(self.data, indent=2, sort_keys=True, default=str) + "\n").encode())

    def finish(self, status: str, error: str | None = None, extra: dict | None = None):
        self.data["status"] = status
        self.data["ended"] = _now()
        if error is not None:
            self.data["error"] = error
        if extra:
            self.data.update(extra)
        self._write()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _load_data(path: str) -> Dataset:
    try:
        return load_dataset(path)
    except FileNotFoundError:
        raise FileNotFoundError(f"dataset not found: {path}") from None


def _check_data_compat(state, ds: Dataset) -> None:
    c = state.cfg.data
    for k in ("S", "C", "G", "V_t", "V_v", "max_caption"):
        if getattr(ds.cfg, k) != getattr(c, k):
            raise ConfigError(f"data.{k}", f"dataset has {getattr(ds.cfg, k)}, model expects {getattr(c, k)}")


def _progress(every: int):
    def cb(rep):
        if rep["step"] % every == 0:
            log.info("%s step %d total %.4f lr %.2e", rep["stage"], rep["step"], rep["total"], rep["lr"])
    return cb


def _cmd_gen_data(args, cfg):
    out = resolve_out(args.out)
    ds = generate_dataset(cfg.data, derive_seed(args.seed, "data"))
    save_dataset(ds, out)
    log.info("wrote %d samples to %s", len(ds), out)
    return {"samples": len(ds)}


def _run_dir(args) -> dict:
    d = resolve_out(args.out)
    d.mkdir(parents=True, exist_ok=True)
    return {
        "dir": d,
        "manifest": d / "manifest.json",
        "config": d / "config.ini",
        "reports": d / "reports.jsonl",
        "checkpoint": d / "checkpoint.ckpt",
    }


def _train(args, cfg, paths):
    from . import training as T

    ds = _load_data(args.data)
    cfg.data = ds.cfg
    cfg.validate()
    base = None
    if getattr(args, "base", None):
        base = T.load_checkpoint(args.base)
    if paths["reports"].exists():
        paths["reports"].unlink()
    if args.command == "stage2":
        st = T.load_checkpoint(args.from_stage1)
        _check_data_compat(st, ds)
        # start from the stage-1 run's config; --config/--set/flags layer on top
        cfg = load_config(args.config, _overrides(args), base=st.cfg)
        # the stage-2 section, mask and eval settings come from this invocation
        log_every = cfg.stage2.log_every
        rep = T.Reporter(paths["reports"], log_every)
        state = T.run_stage2(cfg, st, ds, rep, until=args.stop_at, progress=_progress(log_every))
        cfg = state.cfg
    else:
        section = {"pretrain": cfg.pretrain, "stage1": cfg.stage1, "sft-baseline": cfg.sft}[args.command]
        rep = T.Reporter(paths["reports"], section.log_every)
        seed = derive_seed(args.seed, "train")
        kw = dict(reporter=rep, until=args.stop_at, progress=_progress(section.log_every))
        if args.command == "pretrain":
            state = T.run_pretrain(cfg, ds, seed, **kw)
        elif args.command == "stage1":
            state = T.run_stage1(cfg, ds, seed, base=base, **kw)
        else:
            state = T.run_sft_baseline(cfg, ds, seed, base=base, **kw)
    write_atomic(paths["config"], dump_config(state.cfg).encode())
    T.save_checkpoint(state, paths["checkpoint"])
    return {"stage": state.stage, "step": state.step, "config": state.cfg.to_dict()}


def _load_for_analysis(args):
    """Checkpoint state whose eval section takes --config/--set values layered over its own."""
    from . import training as T

    state = T.load_checkpoint(args.ckpt)
    state.cfg.eval = load_config(args.config, _overrides(args), base=state.cfg).eval
    return state


def _cmd_eval(args, cfg):
    from . import training as T

    state = _load_for_analysis(args)
    ds = _load_data(args.data)
    _check_data_compat(state, ds)
    report = T.evaluate(state, ds, args.batch_size)
    out = resolve_out(args.out)
    write_atomic(out, (json.dumps(report, sort_keys=True) + "\n").encode())
    print(json.dumps(report, sort_keys=True))
    return {"report": str(out), "config": state.cfg.to_dict()}


def _cmd_diagnose(args, cfg):
    from . import diagnostics as D
    from . import training as T

    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = [m for m in metrics if m not in D.METRICS]
    if not metrics or bad:
        raise UsageError(f"--metrics must be a subset of {','.join(D.METRICS)}; got {args.metrics!r}")
    state = _load_for_analysis(args)
    ds = _load_data(args.data)
    _check_data_compat(state, ds)
    res = D.run_diagnostics(state, ds, metrics, args.batch_size)
    paths = D.write_profiles(res, resolve_out(args.out))
    flagged = {k: [p.layer for p in v if p.flag] for k, v in res.items() if any(p.flag for p in v)}
    return {"files": [str(p) for p in paths], "flagged": flagged, "config": state.cfg.to_dict()}


def _cmd_export(args, cfg):
    from . import diagnostics as D
    from . import training as T

    state = _load_for_analysis(args)
    ds = _load_data(args.data)
    _check_data_compat(state, ds)
    n = D.export_factors(state, ds, resolve_out(args.out))
    return {"rows": n, "config": state.cfg.to_dict()}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(f"a subcommand is required: {', '.join(COMMANDS)}")
        args.argv = argv
        _check_ablations(args)
        if args.command == "stage2" and not args.from_stage1:
            raise UsageError("stage2 requires --from-stage1 <checkpoint>")
        if getattr(args, "stop_at", None) is not None and args.stop_at < 0:
            raise UsageError("--stop-at must be >= 0")
        overrides = _overrides(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, overrides)
    except (ConfigError, ValueError) as e:
        print(f"usage error: invalid configuration: {e}", file=sys.stderr)
        return 1

    if args.strict_deterministic:
        set_strict_deterministic(True)

    training_cmd = args.command in ("pretrain", "stage1", "stage2", "sft-baseline")
    if training_cmd:
        paths = _run_dir(args)
        manifest_path = paths["manifest"]
        outputs = {k: v for k, v in paths.items() if k != "manifest"}
    else:
        out = resolve_out(args.out)
        if args.command == "diagnose":
            manifest_path = out / "manifest.json"
        else:
            manifest_path = out.with_name(f"{out.name}.manifest.json")
        outputs = {"out": out}
    manifest = Manifest(manifest_path, args, cfg, outputs)
    try:
        if args.command == "gen-data":
            extra = _cmd_gen_data(args, cfg)
        elif training_cmd:
            extra = _train(args, cfg, paths)
        elif args.command == "eval":
            extra = _cmd_eval(args, cfg)
        elif args.command == "diagnose":
            extra = _cmd_diagnose(args, cfg)
        else:
            extra = _cmd_export(args, cfg)
    except (UsageError, ConfigError) as e:
        manifest.finish("usage-error", str(e))
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        manifest.finish("interrupted")
        return 2
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to exit 2
        manifest.finish("failed", f"{type(e).__name__}: {e}")
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        return 2
    if isinstance(extra, dict) and "config" in extra:
        manifest.data["config"] = extra.pop("config")
    manifest.finish("ok", extra={"result": extra})
    return 0


if __name__ == "__main__":
    sys.exit(main())
