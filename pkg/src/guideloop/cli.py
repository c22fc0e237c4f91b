"""Command-line entry point for every workflow."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import engine
from .captioner import load_checkpoint, save_checkpoint
from .data import (
    ConfigError,
    DatasetError,
    FindingOntology,
    GeneratorConfig,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from .evaluate import emit_series, evaluate
from .judges import OracleJudge
from .labeler import info_score, label_text
from .metrics import bleu4


def _load_ontology(path: str | None) -> FindingOntology:
    return FindingOntology.from_json(path) if path else FindingOntology.default()


@click.group()
def main():
    """Guidance-captioner fine-tuning toolkit."""


@main.command("gen-data")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--seed", type=int, default=None, help="Overrides the config seed.")
@click.option("--ontology", "ontology_path", type=click.Path(exists=True), default=None)
def gen_data(config_path, out_path, seed, ontology_path):
    """Generate a synthetic dataset and write it as JSONL."""
    if config_path:
        cfg = GeneratorConfig.from_dict(json.loads(Path(config_path).read_text()))
    else:
        cfg = GeneratorConfig()
    ontology = _load_ontology(ontology_path)
    ds = generate_dataset(cfg, seed=seed, ontology=ontology)
    save_dataset(ds, out_path)
    click.echo(f"wrote {len(ds.scans)} scans to {out_path}")


@main.command()
@click.option("--data", "data_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--epochs", type=int, default=None)
@click.option("--seed", type=int, default=0)
@click.option("--ontology", "ontology_path", type=click.Path(exists=True), default=None)
def pretrain(data_path, out_dir, epochs, seed, ontology_path):
    """Pretrain the captioner on reference reports; writes a checkpoint."""
    ontology = _load_ontology(ontology_path)
    ds = load_dataset(data_path)
    cfg = engine.LoopConfig(seed=seed)
    if epochs is not None:
        cfg.pretrain_epochs = epochs
    params = engine.pretrain(ds, ontology, cfg)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "pretrained.json"
    save_checkpoint(params, path)
    click.echo(f"wrote {path}")


@main.command()
@click.option("--data", "data_path", type=click.Path(exists=True), required=True)
@click.option("--run", "run_dir", type=click.Path(), required=True)
@click.option("--judge", type=click.Choice(["fidelity", "informativeness", "human"]), default="fidelity")
@click.option("--lambda", "guide_weight", type=float, default=None)
@click.option("--rounds", type=int, default=None)
@click.option("--batch", type=int, default=None)
@click.option("--seed", type=int, default=0)
@click.option("--service-url", default=None, help="Annotation service URL (human judge).")
@click.option("--ontology", "ontology_path", type=click.Path(exists=True), default=None)
def loop(data_path, run_dir, judge, guide_weight, rounds, batch, seed, service_url, ontology_path):
    """Run (or resume) the iterative fine-tuning loop."""
    ontology = _load_ontology(ontology_path)
    ds = load_dataset(data_path)
    cfg = engine.LoopConfig(judge=judge, seed=seed)
    if guide_weight is not None:
        cfg.guide_weight = guide_weight
    if rounds is not None:
        cfg.rounds = rounds
    if batch is not None:
        cfg.batch_per_round = batch
    session_client = None
    if judge == "human":
        if service_url is None:
            raise click.UsageError("--service-url is required with --judge human")
        from .service import HttpSessionClient

        session_client = HttpSessionClient(service_url)
    engine.run_loop(ds, cfg, run_dir, ontology=ontology, session_client=session_client)
    click.echo(f"run complete: {run_dir}")


@main.command()
@click.option("--data", "data_path", type=click.Path(exists=True), required=True)
@click.option("--run", "run_dir", type=click.Path(), required=True)
@click.option("--seed", type=int, default=0)
@click.option("--ontology", "ontology_path", type=click.Path(exists=True), default=None)
def bootstrap(data_path, run_dir, seed, ontology_path):
    """Surrogate bootstrap experiment on reference reports."""
    ontology = _load_ontology(ontology_path)
    ds = load_dataset(data_path)
    cfg = engine.LoopConfig(seed=seed)
    result = engine.run_bootstrap(ds, cfg, ontology=ontology, run_dir=run_dir)
    click.echo(
        f"test RMSE {result.test_rmse:.4f} vs score std {result.test_score_std:.4f} "
        f"(ratio {result.test_rmse / result.test_score_std:.3f})"
    )


@main.command("eval")
@click.option("--data", "data_path", type=click.Path(exists=True), required=True)
@click.option("--run", "run_dir", type=click.Path(exists=True), required=True)
@click.option("--split", default="test")
@click.option("--judge", type=click.Choice(["fidelity", "informativeness"]), default="fidelity")
@click.option("--ontology", "ontology_path", type=click.Path(exists=True), default=None)
def eval_cmd(data_path, run_dir, split, judge, ontology_path):
    """Evaluate the latest checkpoint of a run and emit metric series."""
    ontology = _load_ontology(ontology_path)
    ds = load_dataset(data_path)
    run_dir = Path(run_dir)
    ckpts = sorted(
        (run_dir / "checkpoints").glob("round_*.json"),
        key=lambda p: int(p.stem.split("_")[1]),
    )
    if not ckpts:
        raise click.ClickException(f"no checkpoints in {run_dir}")
    params = load_checkpoint(ckpts[-1], expected_slots=ontology.size)
    result = evaluate(params, None, ds, split, OracleJudge(judge, ontology), ontology)
    click.echo(json.dumps({"checkpoint": ckpts[-1].name, **result}, indent=2))
    if (run_dir / "metrics.csv").exists():
        for path in emit_series(run_dir):
            click.echo(f"wrote {path}")


@main.command()
@click.option("--data", "data_path", type=click.Path(exists=True), required=True)
@click.option("--run", "run_dir", type=click.Path(), required=True)
@click.option("--port", type=int, default=8000)
@click.option("--host", default="127.0.0.1")
@click.option("--judge", type=click.Choice(["fidelity", "informativeness", "human"]), default="human")
@click.option("--rounds", type=int, default=None)
@click.option("--batch", type=int, default=None, help="items per scoring session")
@click.option("--seed", type=int, default=0)
@click.option("--ontology", "ontology_path", type=click.Path(exists=True), default=None)
def serve(data_path, run_dir, port, host, judge, rounds, batch, seed, ontology_path):
    """Serve the annotation API (and UI, when built) for a run directory."""
    import uvicorn

    from .service import LoopRunner, SessionStore, create_app

    ontology = _load_ontology(ontology_path)
    ds = load_dataset(data_path)
    run_dir = Path(run_dir)
    cfg = engine.LoopConfig(judge=judge, seed=seed)
    if rounds is not None:
        cfg.rounds = rounds
    if batch is not None:
        cfg.batch_per_round = batch
    store = SessionStore(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    ckpt0 = ckpt_dir / "round_0.json"
    if ckpt0.exists():
        ckpts = sorted(ckpt_dir.glob("round_*.json"), key=lambda p: int(p.stem.split("_")[1]))
        params = load_checkpoint(ckpts[-1], expected_slots=ontology.size)
        completed = int(ckpts[-1].stem.split("_")[1])
        feedback = engine._load_run_feedback(run_dir, params, ds, completed)
        state = engine.LoopState(params=params, feedback=feedback, round_index=completed)
    else:
        params = engine.pretrain(ds, ontology, cfg)
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(params, ckpt0)
        state = engine.LoopState(params=params)
    runner = LoopRunner(ds, cfg, state, store, ontology)
    static_dir = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    app = create_app(store, runner=runner, static_dir=static_dir)
    uvicorn.run(app, host=host, port=port)


@main.command()
@click.option("--text", required=True)
@click.option("--ontology", "ontology_path", type=click.Path(exists=True), default=None)
def label(text, ontology_path):
    """Label a report text and print per-finding states and the info score."""
    ontology = _load_ontology(ontology_path)
    result = label_text(text, ontology)
    for name, state in zip(ontology.labels, result.states):
        click.echo(f"{name}: {state:+d}")
    click.echo(f"score: {info_score(result.states)}")


@main.command()
@click.option("--candidate", required=True)
@click.option("--reference", required=True)
def bleu(candidate, reference):
    """Print the BLEU-4 similarity of candidate vs reference."""
    click.echo(f"{bleu4(candidate, reference)}")


def entrypoint(argv=None) -> int:
    """Dispatch with the documented exit codes: 0 ok, 1 usage, 2 runtime."""
    try:
        main.main(args=argv, standalone_mode=False)
        return 0
    except click.UsageError as e:
        e.show()
        return 1
    except click.exceptions.Exit as e:
        return int(e.exit_code)
    except click.ClickException as e:
        e.show()
        return 2
    except (ConfigError, DatasetError, engine.RunDirError) as e:
        click.echo(f"error: {e}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(entrypoint())
