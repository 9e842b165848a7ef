"""Command-line entry point.

Every command writes a ``manifest.toml`` next to its outputs. Passing that
manifest back as ``--config`` (with the same command) reproduces the outputs.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

try:
    import tomllib
except ImportError:  # python < 3.11
    import tomli as tomllib
import tomli_w

from . import __version__
from .checkpoint import Checkpoint
from .checks import run_gradient_checks
from .config import RunConfig, load_config, output_root
from .experiments import (
    ScaleAblation,
    ablate_batching,
    ablate_scale,
    build_suite,
    code_digest,
    lowres_grid,
    probe_tasks,
    run_finetune,
    run_prefinetune,
)
from .metrics import read_metrics_csv, write_metrics_csv
from .model import Model
from .plotting import PLOT_KINDS, export_plot_data

log = logging.getLogger("prefinetune")


def _manifest_args(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, "rb") as f:
        data = tomllib.load(f)
    return data.get("manifest", {}).get("args", {})


def _resolve(args, name: str, saved: dict, default=None):
    val = getattr(args, name, None)
    if val is None:
        val = saved.get(name, default)
    return val


def _out_dir(args, config: RunConfig) -> Path:
    out = Path(args.out) if args.out else output_root(config) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, config: RunConfig, args: dict) -> Path:
    doc = {
        "manifest": {
            "command": command,
            "seed": config.seed,
            "seeds": list(config.ablation.seeds),
            "code_digest": code_digest(),
            "version": __version__,
            "args": {k: v for k, v in sorted(args.items()) if v is not None},
        },
        "config": config.to_dict(),
    }
    path = out / "manifest.toml"
    path.write_text(tomli_w.dumps(doc))
    return path


def _config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        config = config.with_seed(args.seed)
    return config


def cmd_prefinetune(args) -> int:
    config = _config(args)
    out = _out_dir(args, config)
    registry = build_suite(config.suite, config.model.vocab_size)
    ckpt, records = run_prefinetune(config, registry)
    ckpt.save(out / "checkpoint.bin")
    write_metrics_csv(records, out / "metrics.csv")
    _write_manifest(out, "prefinetune", config, {})
    log.info("wrote %s", out)
    return 0


def cmd_finetune(args) -> int:
    saved = _manifest_args(args.config)
    config = _config(args)
    out = _out_dir(args, config)
    registry = build_suite(config.suite, config.model.vocab_size)
    task_id = _resolve(args, "task", saved)
    ckpt_path = _resolve(args, "checkpoint", saved)
    reuse = _resolve(args, "reuse_head", saved, config.finetune.reuse_head)
    if task_id is None or ckpt_path is None:
        raise SystemExit("finetune needs --task and --checkpoint")
    ckpt = Checkpoint.load(ckpt_path, expected_config=config.model)
    res = run_finetune(ckpt, registry.get(task_id), config, bool(reuse))
    write_metrics_csv(res.records, out / "metrics.csv")
    _write_manifest(out, "finetune", config, {"task": task_id, "checkpoint": str(ckpt_path), "reuse_head": bool(reuse)})
    print(f"{task_id}: step0={res.step0} best={res.best} lr={res.best_lr} dropout={res.best_dropout}")
    return 0


def _save_scale(out: Path, scale: ScaleAblation) -> None:
    ckdir = out / "checkpoints"
    ckdir.mkdir(exist_ok=True)
    for (seed, n), model in sorted(scale.checkpoints.items()):
        Checkpoint(model.config, model.heads, model.params, None, 0, [seed]).save(ckdir / f"seed{seed}_n{n}.bin")


def _load_scale(path: Path, config: RunConfig) -> ScaleAblation:
    ckpts = {}
    for f in sorted((path / "checkpoints").glob("seed*_n*.bin")):
        seed, n = f.stem[len("seed"):].split("_n")
        c = Checkpoint.load(f, expected_config=config.model)
        ckpts[(int(seed), int(n))] = Model(c.config, c.heads, c.params)
    if not ckpts:
        raise SystemExit(f"no scale-ablation checkpoints under {path}")
    return ScaleAblation([], ckpts, {})


def cmd_ablate_scale(args) -> int:
    config = _config(args)
    out = _out_dir(args, config)
    registry = build_suite(config.suite, config.model.vocab_size)
    scale = ablate_scale(config, registry)
    write_metrics_csv(scale.records, out / "metrics.csv")
    _save_scale(out, scale)
    export_plot_data(scale.records, "scale", out)
    _write_manifest(out, "ablate-scale", config, {"probes": list(probe_tasks(config, registry))})
    return 0


def cmd_ablate_batching(args) -> int:
    config = _config(args)
    out = _out_dir(args, config)
    registry = build_suite(config.suite, config.model.vocab_size)
    result = ablate_batching(config, registry)
    write_metrics_csv(result.records, out / "metrics.csv")
    export_plot_data(result.records, "batching", out)
    _write_manifest(out, "ablate-batching", config, {"probes": list(probe_tasks(config, registry))})
    return 0


def cmd_lowres_grid(args) -> int:
    saved = _manifest_args(args.config)
    config = _config(args)
    out = _out_dir(args, config)
    registry = build_suite(config.suite, config.model.vocab_size)
    scale_dir = _resolve(args, "scale_dir", saved)
    scale = _load_scale(Path(scale_dir), config) if scale_dir else ablate_scale(config, registry)
    records = lowres_grid(config, registry, scale)
    write_metrics_csv(records, out / "metrics.csv")
    export_plot_data(records, "lowres", out)
    _write_manifest(out, "lowres-grid", config, {"scale_dir": scale_dir})
    return 0


def cmd_export_plots(args) -> int:
    records = read_metrics_csv(args.metrics)
    out = Path(args.out) if args.out else Path(args.metrics).parent
    for path in export_plot_data(records, args.kind, out):
        print(path)
    return 0


def cmd_grad_check(args) -> int:
    worst = 0.0
    for name, err in run_gradient_checks(args.seed or 0, args.eps).items():
        worst = max(worst, err)
        print(f"{'PASS' if err < args.tol else 'FAIL'} {name} rel_err={err:.3e}")
    print(f"max relative error {worst:.3e} (tolerance {args.tol:g})")
    return 0 if worst < args.tol else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prefinetune", description="multi-task pre-finetuning experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(fn=fn)
        p.add_argument("--config", help="TOML run config or a manifest.toml from an earlier run")
        p.add_argument("--out", help="output directory (default: $PREFINETUNE_OUTPUT_ROOT/<command>)")
        p.add_argument("--seed", type=int)
        return p

    add("prefinetune", cmd_prefinetune, "multi-task pre-finetuning; writes a checkpoint and metrics")
    p = add("finetune", cmd_finetune, "fine-tune one task from a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--task")
    p.add_argument("--reuse-head", dest="reuse_head", action=argparse.BooleanOptionalAction, default=None)
    add("ablate-scale", cmd_ablate_scale, "nested task-count ablation")
    add("ablate-batching", cmd_ablate_batching, "batching strategy ablation")
    p = add("lowres-grid", cmd_lowres_grid, "low-resource fine-tuning grid")
    p.add_argument("--scale-dir", dest="scale_dir", help="reuse checkpoints from an ablate-scale output directory")
    p = sub.add_parser("export-plots", help="CSV + SVG plot data from a metrics file")
    p.set_defaults(fn=cmd_export_plots)
    p.add_argument("--metrics", required=True)
    p.add_argument("--kind", choices=PLOT_KINDS, required=True)
    p.add_argument("--out")
    p = sub.add_parser("grad-check", help="finite-difference checks of every primitive and loss")
    p.set_defaults(fn=cmd_grad_check)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
