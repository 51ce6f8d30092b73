"""Command-line entry points: ``prunepilot run`` and ``prunepilot report``.

Exit codes: 0 success (target reached or agent chose to stop), 1 ran
out of iterations, 2 configuration error, 3 agent failure, 4 I/O error.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .checkpoint import save_checkpoint, write_checkpoint_file
from .config import ConfigError, CorpusConfig, FileConfig, load_config
from .data import BYTE_VOCAB, load_text_corpus, synth_corpus
from .model import build_model
from .orchestrator import IterationLog, RunState, run
from .report import RunLogError, parse_run_log, render_figures, summarize, write_csv_series

RUN_LOG_FILE = "run_log.jsonl"
SUMMARY_FILE = "summary.json"
CHECKPOINT_FILE = "final_checkpoint.bin"
AUDIT_FILE = "agent_audit.jsonl"
REPORT_SUMMARY_FILE = "report_summary.json"

EXIT_OK = 0
EXIT_MAX_ITERATIONS = 1
EXIT_CONFIG = 2
EXIT_AGENT_FAILURE = 3
EXIT_IO = 4

_ACCOUNTING_FLAG = {"prunable": "prunable_only", "all": "all_params"}


def _build_corpus(cfg: FileConfig):
    corpus_cfg: CorpusConfig = cfg.corpus
    if corpus_cfg.source == "text_file":
        if cfg.model.vocab_size < BYTE_VOCAB:
            raise ConfigError(
                f"text corpora are byte-tokenized; model vocab_size must be >= {BYTE_VOCAB}"
            )
        return load_text_corpus(
            corpus_cfg.path, cfg.model.seq_len, corpus_cfg.n_samples, corpus_cfg.seed
        )
    return synth_corpus(
        corpus_cfg.seed, cfg.model.vocab_size, cfg.model.seq_len, corpus_cfg.n_samples
    )


def _write_run_outputs(
    out_dir: Path, state: RunState, logs: list[IterationLog], graph, target: float,
    accounting: str, agent_mode: str,
) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / RUN_LOG_FILE, "w", encoding="utf-8") as fh:
        for row in logs:
            fh.write(json.dumps(row.to_json_dict()) + "\n")

    rollback_rate = state.rollback_count / len(logs) if logs else 0.0
    summary = {
        "agent_mode": agent_mode,
        "accounting": accounting,
        "target_sparsity": target,
        "final_sparsity": state.global_sparsity,
        "target_achievement_pct": state.global_sparsity / target * 100.0,
        "ppl_baseline": state.ppl_baseline,
        "ppl_final": state.ppl_current,
        "ppl_degradation_pct": (state.ppl_current - state.ppl_baseline)
        / state.ppl_baseline * 100.0,
        "iterations": len(logs),
        "rollbacks": state.rollback_count,
        "rollback_rate": rollback_rate,
        "stop_reason": state.stop_reason,
        "error": state.error,
    }
    with open(out_dir / SUMMARY_FILE, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")

    checkpoint = save_checkpoint(graph, state.ppl_current, iteration=state.iteration)
    write_checkpoint_file(checkpoint, out_dir / CHECKPOINT_FILE)


def cmd_run(
    config_path: str | None,
    agent: str | None,
    target_sparsity: float | None,
    tau: float | None,
    max_iter: int | None,
    seed: int | None,
    out_dir: str,
    accounting: str | None,
) -> int:
    """Assemble configs, run the loop, write artifacts; returns exit code."""
    try:
        cfg = load_config(config_path)
        if agent is not None:
            cfg.run.agent_mode = agent
        if target_sparsity is not None:
            cfg.run.target_sparsity = target_sparsity
        if tau is not None:
            cfg.run.rollback_threshold = tau
        if max_iter is not None:
            cfg.run.max_iterations = max_iter
        if accounting is not None:
            cfg.run.accounting = _ACCOUNTING_FLAG[accounting]
        if seed is not None:
            cfg.model.rng_seed = seed
            cfg.corpus.seed = seed + 1
            cfg.run.split_seed = seed + 2
        cfg.model.validate()
        cfg.corpus.validate()
        cfg.run.validate()
    except (ConfigError, ValueError) as e:
        click.echo(f"config error: {e}", err=True)
        return EXIT_CONFIG

    try:
        corpus = _build_corpus(cfg)
        graph = build_model(cfg.model)
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        return EXIT_CONFIG
    except OSError as e:
        click.echo(f"I/O error: {e}", err=True)
        return EXIT_IO

    out_path = Path(out_dir)
    audit = None
    audit_fh = None
    if cfg.run.agent_mode == "llm":
        try:
            out_path.mkdir(parents=True, exist_ok=True)
            audit_fh = open(out_path / AUDIT_FILE, "w", encoding="utf-8")
        except OSError as e:
            click.echo(f"I/O error: {e}", err=True)
            return EXIT_IO

        def audit(event: dict) -> None:
            audit_fh.write(json.dumps(event) + "\n")
            audit_fh.flush()

    try:
        graph, state, logs = run(cfg.run, graph, corpus, audit=audit)
    finally:
        if audit_fh is not None:
            audit_fh.close()

    try:
        _write_run_outputs(
            out_path, state, logs, graph, cfg.run.target_sparsity,
            cfg.run.accounting, cfg.run.agent_mode,
        )
    except OSError as e:
        click.echo(f"I/O error: {e}", err=True)
        return EXIT_IO

    click.echo(
        f"stop_reason={state.stop_reason} iterations={len(logs)} "
        f"rollbacks={state.rollback_count} "
        f"final_sparsity={state.global_sparsity:.4f} "
        f"ppl {state.ppl_baseline:.4f} -> {state.ppl_current:.4f}"
    )
    if state.stop_reason == "agent_failure":
        click.echo(f"agent failure: {state.error}", err=True)
        return EXIT_AGENT_FAILURE
    if state.stop_reason == "max_iterations":
        return EXIT_MAX_ITERATIONS
    return EXIT_OK


def cmd_report(run_log: str, out_dir: str | None) -> int:
    """Render CSV series, summary, and figures from a run log."""
    log_path = Path(run_log)
    out_path = Path(out_dir) if out_dir else log_path.parent / "report"
    try:
        rows = parse_run_log(log_path)
        csv_paths = write_csv_series(rows, out_path)
        summary = summarize(rows)
        with open(out_path / REPORT_SUMMARY_FILE, "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2)
            fh.write("\n")
        figure_path = render_figures(rows, out_path)
    except RunLogError as e:
        click.echo(f"run log error: {e}", err=True)
        return EXIT_IO
    except OSError as e:
        click.echo(f"I/O error: {e}", err=True)
        return EXIT_IO

    click.echo(
        f"iterations={summary['iterations']} rollbacks={summary['rollbacks']} "
        f"rollback_rate={summary['rollback_rate'] * 100.0:.1f}% "
        f"final_sparsity={summary['sparsity_final']:.4f} "
        f"ppl {summary['ppl_baseline']:.4f} -> {summary['ppl_final']:.4f} "
        f"({summary['ppl_degradation_pct']:+.2f}%)"
    )
    for p in csv_paths:
        click.echo(f"wrote {p}")
    click.echo(f"wrote {out_path / REPORT_SUMMARY_FILE}")
    click.echo(f"wrote {figure_path}")
    return EXIT_OK


@click.group()
def main() -> None:
    """Agent-guided iterative pruning for small transformer models."""


@main.command(name="run")
@click.option("--config", "config_path", type=str, default=None, help="YAML config file.")
@click.option("--agent", type=click.Choice(["llm", "heuristic"]), default=None,
              help="Decision agent (default from config: heuristic).")
@click.option("--target-sparsity", type=float, default=None)
@click.option("--tau", type=float, default=None, help="Rollback threshold.")
@click.option("--max-iter", type=int, default=None)
@click.option("--seed", type=int, default=None,
              help="Master seed: model=N, corpus=N+1, split=N+2.")
@click.option("--out-dir", type=str, default="prunepilot-run", show_default=True)
@click.option("--accounting", type=click.Choice(["prunable", "all"]), default=None)
def run_command(config_path, agent, target_sparsity, tau, max_iter, seed, out_dir, accounting):
    """Run the pruning loop and write log, summary, and final checkpoint."""
    sys.exit(cmd_run(config_path, agent, target_sparsity, tau, max_iter, seed, out_dir, accounting))


@main.command(name="report")
@click.argument("run_log", type=str)
@click.option("--out-dir", type=str, default=None,
              help="Output directory (default: <run_log dir>/report).")
def report_command(run_log, out_dir):
    """Render CSV series, a summary, and figures from a run log."""
    sys.exit(cmd_report(run_log, out_dir))
