"""mole-lab: train runs, ablation matrices, routing reports, grad checks.

Exit codes: 0 ok, 1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from .experts import ConfigError
from .training import ExperimentConfig, micro_gradcheck, run_experiment


def _load_config(path: Path) -> ExperimentConfig:
    if not path.exists():
        raise click.exceptions.UsageError(f"config not found: {path}")
    try:
        cfg = ExperimentConfig.load(path)
    except (ConfigError, json.JSONDecodeError, TypeError) as exc:
        raise click.exceptions.UsageError(f"invalid config {path}: {exc}")
    seed_env = os.environ.get("MOLE_LAB_SEED")
    if seed_env is not None:
        cfg.seed = int(seed_env)
    return cfg


@click.group()
def main():
    """Desk-scale mixture-of-low-rank-experts lab."""


@main.command()
@click.argument("config_path", type=click.Path(path_type=Path))
@click.option("--out", "out_dir", type=click.Path(path_type=Path), default=None,
              help="Run directory (default: runs/<config stem>).")
@click.option("--dry-run", is_flag=True, help="Validate the config and exit without writing.")
@click.option("--force", is_flag=True, help="Overwrite a non-empty run directory.")
def train(config_path: Path, out_dir: Path, dry_run: bool, force: bool):
    """Train one experiment from a JSON config."""
    cfg = _load_config(config_path)
    if dry_run:
        click.echo(f"config ok: {config_path} (seed={cfg.seed}, steps={cfg.steps})")
        return
    out = out_dir if out_dir is not None else Path("runs") / config_path.stem
    try:
        run_dir = run_experiment(cfg, out, force=force)
    except FileExistsError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    summary = json.loads((run_dir / "summary.json").read_text())
    click.echo(
        f"done: {run_dir} final_task_loss={summary['final_task_loss']:.6g} "
        f"entropy_drop={summary['max_entropy_drop']:.3f}"
    )


@main.command()
@click.argument("matrix_path", type=click.Path(path_type=Path))
@click.option("--out", "out_dir", type=click.Path(path_type=Path), default=None,
              help="Directory for cell runs and the comparison CSV.")
@click.option("--force", is_flag=True, help="Overwrite existing cell run directories.")
def ablate(matrix_path: Path, out_dir: Path, force: bool):
    """Run an ablation matrix: cells varying one axis, shared seeds per cell."""
    if not matrix_path.exists():
        raise click.exceptions.UsageError(f"matrix spec not found: {matrix_path}")
    try:
        spec = json.loads(matrix_path.read_text())
    except json.JSONDecodeError as exc:
        raise click.exceptions.UsageError(f"invalid matrix spec: {exc}")
    cells = spec.get("cells", [])
    if not cells:
        raise click.exceptions.UsageError("matrix spec has no cells")
    base = spec.get("base", {})
    seeds = spec.get("seeds", [0])
    out = out_dir if out_dir is not None else Path("runs") / matrix_path.stem
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for cell in cells:
        name = cell["name"]
        merged = dict(base)
        merged.update(cell.get("overrides", {}))
        losses, grams, drops = [], [], []
        for seed in seeds:
            merged_seed = dict(merged)
            merged_seed["seed"] = seed
            try:
                cfg = ExperimentConfig.from_dict(merged_seed)
            except ConfigError as exc:
                raise click.exceptions.UsageError(f"cell {name!r}: {exc}")
            cell_dir = out / f"{name}_seed{seed}"
            if cell_dir.exists() and any(cell_dir.iterdir()) and not force:
                click.echo(f"error: {cell_dir} exists (use --force)", err=True)
                sys.exit(1)
            run_dir = run_experiment(cfg, cell_dir, force=True)
            summary = json.loads((run_dir / "summary.json").read_text())
            losses.append(summary["eval_task_loss"])
            gm = [g for g in summary["gram_offdiag_mean_per_layer"] if g == g]
            grams.append(float(np.mean(gm)) if gm else float("nan"))
            drops.append(summary["max_entropy_drop"])
        row = {
            "cell": name,
            "mean_task_loss": float(np.mean(losses)),
            "mean_gram_offdiag": float(np.mean(grams)),
            "mean_entropy_drop": float(np.mean(drops)),
        }
        for seed, loss in zip(seeds, losses):
            row[f"task_loss_seed{seed}"] = loss
        rows.append(row)

    header = ["cell", "mean_task_loss", "mean_gram_offdiag", "mean_entropy_drop"]
    header += [f"task_loss_seed{s}" for s in seeds]
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(row[h]) if h == "cell" else repr(float(row[h])) for h in header))
    table = out / "comparison.csv"
    table.write_text("\n".join(lines) + "\n")
    click.echo(f"wrote {table} ({len(rows)} cells x {len(seeds)} seeds)")


@main.command()
@click.argument("run_dir", type=click.Path(path_type=Path))
@click.option("--step", "step", type=int, required=True, help="Snapshot step to report.")
def report(run_dir: Path, step: int):
    """Print per-layer routing snapshots for a logged step."""
    routing = Path(run_dir) / "routing"
    if not routing.is_dir():
        raise click.exceptions.UsageError(f"{run_dir} has no routing logs")
    layers = sorted(int(p.name) for p in routing.iterdir() if p.is_dir())
    if not layers:
        raise click.exceptions.UsageError(f"{run_dir} has no routing logs")
    available = sorted({int(p.stem) for d in routing.iterdir() for p in d.glob("*.csv")})
    if step not in available:
        click.echo(f"error: step {step} not logged; available steps: {available}", err=True)
        sys.exit(1)
    from .analysis import read_routing_snapshot

    for li in layers:
        snap_path = routing / str(li) / f"{step}.csv"
        snap = read_routing_snapshot(snap_path)
        click.echo(f"layer {li} (step {step}): {snap_path}")
        click.echo(
            f"  entropy={['%.3f' % e for e in snap['entropy']]} log_n={snap['log_n']:.3f} "
            f"consistency={snap['consistency']:.3f} fragmentation={snap['fragmentation']:.3f}"
        )
        click.echo(f"  dominant experts per task: {snap['dominant']}")


@main.command()
@click.option("--size", type=click.Choice(["small", "full"]), default="full")
def gradcheck(size: str):
    """Finite-difference check of the composite loss gradient."""
    result = micro_gradcheck(size=size)
    status = "PASS" if result["passed"] else "FAIL"
    click.echo(f"{status} max relative error {result['max_rel_error']:.3e}")
    if not result["passed"]:
        sys.exit(1)


if __name__ == "__main__":
    main()
