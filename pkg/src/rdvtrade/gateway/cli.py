"""Command line over the pipeline: dataset builds through serving.

Exit codes follow one rule everywhere: 0 when the command did its work,
1 when the inputs were wrong (bad flags, malformed files, failed
validation), 2 when the work itself blew up. A refinement that stalls or
a sweep horizon that fails is a reported result, not a tool failure, so
those still exit 0 with the outcome in the output.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from rdvtrade import convex, dataset, ocp, scp, tradespace
from rdvtrade import uncertainty as unc
from rdvtrade.gateway import work
from rdvtrade.surrogate import (
    ModelConfig,
    load_checkpoint,
    save_checkpoint,
    sequences_from_records,
)
from rdvtrade.surrogate import training as sg_training
from rdvtrade.surrogate.inference import infer as model_infer


def _load_json(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise click.ClickException(f"cannot read {path}: {exc}") from exc


def _load_scenario(path: str) -> ocp.Scenario:
    data = _load_json(path)
    try:
        return ocp.scenario_from_dict(data)
    except (ValueError, KeyError, TypeError) as exc:
        raise click.ClickException(f"invalid scenario in {path}: {exc}") from exc


def _write_text(out: str | None, text: str) -> None:
    if out is None or out == "-":
        click.echo(text, nl=False)
    else:
        Path(out).write_text(text)


def _write_json(out: str | None, payload: dict) -> None:
    text = json.dumps(payload, indent=1, sort_keys=True) + "\n"
    _write_text(out, text)


@click.group(name="rdvtrade")
def cli() -> None:
    """Tradespace exploration for rendezvous trajectory design."""


@cli.command("gen-data")
@click.option("--seed", type=int, default=0, show_default=True, help="Suite sampling seed.")
@click.option("--count", type=int, default=50, show_default=True, help="Scenario count.")
@click.option(
    "--family",
    type=click.Choice(["leo", "elliptic"]),
    default="leo",
    show_default=True,
)
@click.option("--out", required=True, type=click.Path(), help="Record file to write.")
def gen_data(seed: int, count: int, family: str, out: str) -> None:
    """Sample a scenario suite, label it, and save the records."""
    if count < 1:
        raise click.ClickException("need --count >= 1")
    fam = dataset.LeoFamily() if family == "leo" else dataset.EllipticFamily()
    scenarios = dataset.sample_scenarios(fam, count, seed)
    records = dataset.build_dataset(scenarios)
    dataset.save_records(records, out)
    converged = sum(1 for r in records if r.scp_converged)
    click.echo(
        f"wrote {len(records)} records ({converged} refined) to {out}", err=True
    )


@cli.command("train")
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(), help="Checkpoint to write.")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--epochs", type=int, default=200, show_default=True)
def train_cmd(data_path: str, out: str, config_path: str | None, seed: int, epochs: int) -> None:
    """Train the sequence model on a record file.

    The optional config file is a JSON object of model settings (layers,
    heads, embed_dim, context_steps, dropout, learning_rate, grad_clip,
    batch_size, accumulation_steps). The loss curve lands next to the
    checkpoint with a .curve.csv suffix.
    """
    records = dataset.load_records(data_path)
    train_records = dataset.training_records(records)
    if not train_records:
        raise click.ClickException("no converged training records in the data file")
    val_records = dataset.validation_records(records)
    try:
        config = ModelConfig(**_load_json(config_path)) if config_path else ModelConfig()
        config.validate()
    except (TypeError, ValueError) as exc:
        raise click.ClickException(f"invalid model config: {exc}") from exc

    sequences = sequences_from_records(train_records)
    val_sequences = sequences_from_records(val_records) if val_records else None
    state, curve = sg_training.train(
        sequences, config, epochs=epochs, seed=seed, val_sequences=val_sequences
    )
    save_checkpoint(state, out)
    sg_training.export_loss_curve(curve, f"{out}.curve.csv")
    click.echo(
        f"trained {epochs} epochs on {len(sequences)} sequences, "
        f"final loss {curve[-1]['loss']:.6e}, checkpoint {out}",
        err=True,
    )


@cli.command("infer")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--config", "scenario_path", required=True, type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=None, help="Plan file (default stdout).")
def infer_cmd(model_path: str, scenario_path: str, out: str | None) -> None:
    """Roll out the model on a scenario file.

    The return initialization is the relaxed objective, so the relaxation
    is solved first; its failure is a runtime failure.
    """
    scenario = _load_scenario(scenario_path)
    state = load_checkpoint(model_path)
    bundle = ocp.dynamics_bundle(scenario)
    relaxed = convex.solve_relaxed(scenario, bundle)
    if relaxed.status != "OPTIMAL" or relaxed.traj is None:
        raise RuntimeError(f"relaxation failed: {relaxed.detail or relaxed.status}")
    traj = model_infer(state, scenario, -relaxed.objective)
    _write_json(
        out,
        {
            "scenario": scenario.to_dict(),
            "trajectory": traj.to_dict(),
            "cost": traj.cost,
            "rtg_init": -relaxed.objective,
        },
    )


@cli.command("sweep")
@click.option("--config", "scenario_path", required=True, type=click.Path(exists=True))
@click.option("--n", "n_values", type=int, multiple=True, help="One horizon; repeatable.")
@click.option("--n-range", "n_range", default=None, help="Horizons as start:stop:step.")
@click.option(
    "--method",
    "methods",
    multiple=True,
    default=("cvx",),
    show_default=True,
    help="cvx, art, cvx_scp, art_scp; repeatable.",
)
@click.option("--model", "model_path", type=click.Path(exists=True), default=None)
@click.option("--out", type=click.Path(), default=None, help="Point table (default stdout).")
def sweep_cmd(
    scenario_path: str,
    n_values: tuple[int, ...],
    n_range: str | None,
    methods: tuple[str, ...],
    model_path: str | None,
    out: str | None,
) -> None:
    """Sweep a scenario across horizons and write the point table.

    Per-horizon failures go to stderr and do not fail the command; the
    table holds whatever succeeded.
    """
    n_list = list(n_values)
    if n_range:
        try:
            n_list.extend(work.parse_n_range(n_range))
        except ValueError as exc:
            raise click.ClickException(str(exc)) from exc
    n_list = sorted(set(n_list))
    if not n_list:
        raise click.ClickException("need --n or --n-range")
    try:
        normalized = work.normalize_methods(methods, model_path is not None)
    except ValueError as exc:
        raise click.ClickException(str(exc)) from exc

    scenario = _load_scenario(scenario_path)
    state = load_checkpoint(model_path) if model_path else None
    result = tradespace.sweep(scenario, n_list, methods=normalized, model_state=state)
    for failure in result.failures:
        click.echo(
            f"failed n={failure['n']} method={failure['method']}: {failure['detail']}",
            err=True,
        )
    _write_text(out, tradespace.points_table(result.points))


@cli.command("refine")
@click.option("--config", "plan_path", required=True, type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=None, help="Result file (default stdout).")
def refine_cmd(plan_path: str, out: str | None) -> None:
    """Refine a plan file (the shape `infer` writes: scenario + trajectory).

    A stalled refinement is a reported outcome, exit 0; the result says
    whether it converged and how.
    """
    data = _load_json(plan_path)
    try:
        scenario = ocp.scenario_from_dict(data["scenario"])
        init = ocp.trajectory_from_dict(data["trajectory"])
    except (ValueError, KeyError, TypeError) as exc:
        raise click.ClickException(f"invalid plan file: {exc}") from exc
    params = unc.UncertaintyParams()
    bundle = ocp.dynamics_bundle(scenario)
    result = scp.run_scp(scenario, bundle, params, init, scp.ScpConfig())
    source = work.refined_source(init.source)
    payload = work.json_safe(
        {
            "converged": result.converged,
            "status": result.status,
            "objective": result.objective,
            "iterations": result.iterations,
            "history": result.history,
            "worst_margin": result.worst_margin,
            "terminal_residual_inf": result.terminal_residual_inf,
            "trajectory": (
                result.traj.with_source(source).to_dict() if result.traj else None
            ),
        }
    )
    _write_json(out, payload)
    if not result.converged:
        click.echo(f"refinement did not converge: {result.status}", err=True)


@cli.command("bench")
@click.option("--seed", type=int, required=True, help="Benchmark suite seed.")
@click.option("--count", type=int, default=50, show_default=True)
@click.option("--model", "model_path", type=click.Path(exists=True), default=None)
@click.option("--out", type=click.Path(), default=None, help="Report file (default stdout).")
def bench_cmd(seed: int, count: int, model_path: str | None, out: str | None) -> None:
    """Build the seeded suite and report refinement statistics.

    Output is deterministic for a given seed, count, and model: identical
    invocations produce identical bytes. With a model, inference-started
    refinements and the cost-offset table are included.
    """
    if count < 1:
        raise click.ClickException("need --count >= 1")
    records = work.desk_records(seed, count)
    evals = None
    if model_path:
        state = load_checkpoint(model_path)
        evals = tradespace.evaluate_instances(records, state)
    header = (
        f"# bench seed={seed} count={count} model={'yes' if model_path else 'no'}"
    )
    _write_text(out, work.bench_report(records, evals, header))


@cli.command("serve")
@click.option("--model", "model_path", type=click.Path(exists=True), default=None)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option(
    "--port", type=int, default=8000, show_default=True, envvar="RDVTRADE_PORT"
)
@click.option(
    "--data-dir",
    default="rdvtrade-data",
    show_default=True,
    envvar="RDVTRADE_DATA",
    help="Store directory (env RDVTRADE_DATA).",
)
@click.option("--catalog", "catalog_path", type=click.Path(exists=True), default=None)
@click.option("--workers", type=int, default=2, show_default=True)
def serve_cmd(
    model_path: str | None,
    host: str,
    port: int,
    data_dir: str,
    catalog_path: str | None,
    workers: int,
) -> None:
    """Run the HTTP job service."""
    import uvicorn

    from rdvtrade.gateway.service import create_app

    state = load_checkpoint(model_path) if model_path else None
    catalog = dataset.ingest_catalog(catalog_path) if catalog_path else None
    app = create_app(data_dir, model_state=state, catalog=catalog, workers=workers)
    uvicorn.run(app, host=host, port=port)


def main(argv: list[str] | None = None) -> int:
    """Dispatch with the documented exit codes instead of click's."""
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.UsageError as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        if exc.ctx is not None:
            click.echo(exc.ctx.get_usage(), err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except ValueError as exc:
        click.echo(f"validation error: {exc}", err=True)
        return 1
    except Exception as exc:  # noqa: BLE001 -- the documented catch-all
        click.echo(f"runtime failure: {type(exc).__name__}: {exc}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
