"""Candidate racing and stagewise stacking.

A race grows one base checkpoint with every operator in a design space,
trains each candidate the same number of steps under the identical batch
schedule, and selects the candidate with the lowest validation loss at the
race end. Racing with length 0 reduces to selection by loss immediately
after growing. Stacking iterates grow-then-train stages; the adaptive
variant runs a race at the start of every stage, the fixed variant always
duplicates the final block on top.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .analysis import LossTrace, smooth
from .checkpoint import Checkpoint, load_checkpoint, new_checkpoint, save_checkpoint
from .data import Corpus
from .errors import ConfigError, RaceError, StorageError
from .growth import (
    SCHEME_DUPLICATE,
    SCHEMES,
    DesignSpace,
    GrowthOperator,
    apply_growth,
    enumerate_operators,
    post_stack_operator,
)
from .model import ModelConfig
from .optim import AdamHyper
from .train import evaluate, train_steps


@dataclass
class RaceConfig:
    space: DesignSpace
    k_race: int  # steps each candidate trains before selection
    cadence: int  # validation measurement interval, in steps
    growth_seed: int  # shared by all random-scheme candidates in the race
    batch_size: int
    seq_len: int
    val_batches: int = 16
    smooth_window: int = 11  # applied at selection only when cadence == 1
    continue_budget: int = 0

    def validate(self):
        if self.k_race < 0:
            raise ConfigError(f"race length must be >= 0, got {self.k_race}")
        if self.cadence < 1:
            raise ConfigError(f"validation cadence must be >= 1, got {self.cadence}")


@dataclass
class CandidateResult:
    operator: GrowthOperator
    trace: LossTrace
    failed: bool
    checkpoint: Checkpoint | None
    batch_digests: list[tuple[int, int]]
    selection_loss: float | None


@dataclass
class SelectionReport:
    base_step: int
    k_race: int
    cadence: int
    candidates: list[CandidateResult]
    winner: GrowthOperator
    winner_checkpoint: Checkpoint | None
    winner_path: str | None = None
    oracle: dict | None = None  # filled post hoc when horizon losses exist

    def live_candidates(self) -> list[CandidateResult]:
        return [c for c in self.candidates if not c.failed]


def _tie_break_key(op: GrowthOperator):
    return (op.start_index, op.block_size, SCHEMES.index(op.scheme))


def select_winner(scored: list[tuple[GrowthOperator, float]]) -> GrowthOperator:
    """Lowest loss wins; ties break on (index, block size, duplicate first)."""
    if not scored:
        raise RaceError("no live candidates to select from")
    return min(scored, key=lambda pair: (pair[1], _tie_break_key(pair[0])))[0]


def _selection_loss(trace: LossTrace, selection_step: int, cadence: int,
                    smooth_window: int) -> float:
    # Smoothing mirrors dense-measurement analysis; coarse cadences use the
    # raw measurement.
    if cadence == 1 and smooth_window > 1:
        return smooth(trace, smooth_window).loss_at(selection_step)
    return trace.loss_at(selection_step)


def race(base: Checkpoint, corpus: Corpus, cfg: RaceConfig,
         out_dir=None, metrics=None) -> SelectionReport:
    """Run every candidate for k_race steps and pick the lowest-loss one.

    All candidates consume the training schedule starting at the base
    checkpoint's step, so their per-step batch digests must agree exactly;
    any mismatch aborts the race. Candidates that reach a non-finite loss
    are excluded from selection.
    """
    cfg.validate()
    ops = enumerate_operators(cfg.space, base.num_layers)
    selection_step = base.step + cfg.k_race

    results: list[CandidateResult] = []
    for op in ops:
        grown = apply_growth(base, op, cfg.growth_seed)
        res = train_steps(
            grown, corpus, cfg.k_race, cfg.batch_size, cfg.seq_len,
            cadence=cfg.cadence, val_batches=cfg.val_batches,
            candidate_id=op.to_string(), metrics=metrics,
        )
        sel = None
        if not res.failed:
            sel = _selection_loss(res.trace, selection_step, cfg.cadence,
                                  cfg.smooth_window)
        results.append(CandidateResult(
            operator=op,
            trace=res.trace,
            failed=res.failed,
            checkpoint=res.checkpoint,
            batch_digests=res.batch_digests,
            selection_loss=sel,
        ))

    _audit_data_identity(results)

    live = [(r.operator, r.selection_loss) for r in results if not r.failed]
    if not live:
        raise RaceError("all candidates diverged; nothing to select")
    winner_op = select_winner(live)
    winner = next(r for r in results if r.operator == winner_op)

    report = SelectionReport(
        base_step=base.step,
        k_race=cfg.k_race,
        cadence=cfg.cadence,
        candidates=results,
        winner=winner_op,
        winner_checkpoint=winner.checkpoint,
    )
    if out_dir is not None:
        report.winner_path = str(save_checkpoint(winner.checkpoint,
                                                 Path(out_dir) / "winner"))
    return report


def _audit_data_identity(results: list[CandidateResult]):
    """Hard assert: per-step batch digests are pairwise equal across candidates.

    Failed candidates participate for the steps they consumed before failing.
    """
    canonical: dict[int, tuple[int, str]] = {}
    for cand in results:
        for step, digest in cand.batch_digests:
            seen = canonical.get(step)
            if seen is None:
                canonical[step] = (digest, cand.operator.to_string())
            elif seen[0] != digest:
                raise RaceError(
                    f"data-identity audit failed at step {step}: candidate "
                    f"{cand.operator.to_string()} saw digest {digest:#x}, "
                    f"{seen[1]} saw {seen[0]:#x}"
                )


def continue_winner(report: SelectionReport, corpus: Corpus, budget: int,
                    batch_size: int, seq_len: int, *, cadence: int = 0,
                    val_batches: int = 16, metrics=None):
    """Resume the winner from its post-race state for ``budget`` more steps."""
    ckpt = report.winner_checkpoint
    if ckpt is None:
        if report.winner_path is None:
            raise StorageError("winner checkpoint is neither in memory nor on disk")
        ckpt = load_checkpoint(report.winner_path)
    if budget == 0:
        return ckpt, LossTrace(report.winner.to_string(), [], [])
    res = train_steps(
        ckpt, corpus, budget, batch_size, seq_len, cadence=cadence,
        val_batches=val_batches, candidate_id=report.winner.to_string(),
        metrics=metrics, measure_start=False,
    )
    if res.failed:
        raise RaceError("winner diverged during continued training")
    return res.checkpoint, res.trace


@dataclass
class StackingSchedule:
    """Stagewise plan: stage 1 trains from random init, later stages grow first."""

    stage_budgets: list[int]  # winner-path steps per stage, race included
    stage_spaces: list[DesignSpace | None]  # entry 0 must be None (bootstrap stage)
    k_race: int
    cadence: int

    @property
    def n_stages(self) -> int:
        return len(self.stage_budgets)

    def validate(self):
        if not self.stage_budgets:
            raise ConfigError("schedule needs at least one stage")
        if len(self.stage_spaces) != self.n_stages:
            raise ConfigError("need one design-space entry per stage (None for stage 1)")
        if self.stage_spaces[0] is not None:
            raise ConfigError("stage 1 trains from random init and takes no design space")
        if any(space is None for space in self.stage_spaces[1:]):
            raise ConfigError("every stage after the first needs a design space")
        if any(b < 1 for b in self.stage_budgets):
            raise ConfigError("stage budgets must be positive")
        for j, space in enumerate(self.stage_spaces[1:], start=2):
            if self.stage_budgets[j - 1] < self.k_race:
                raise ConfigError(
                    f"stage {j} budget {self.stage_budgets[j - 1]} is smaller "
                    f"than the race length {self.k_race}"
                )


@dataclass
class StackResult:
    checkpoint: Checkpoint
    reports: list[SelectionReport]
    overhead_steps: int  # sum over racing stages of (candidates x k_race)
    stage_depths: list[int]
    final_val_loss: float
    traces: list[LossTrace] = field(default_factory=list)


def adaptive_stack(config: ModelConfig, hyper: AdamHyper, schedule: StackingSchedule,
                   corpus: Corpus, seed: int, *, batch_size: int, seq_len: int,
                   val_batches: int = 16, growth_seed: int = 0,
                   smooth_window: int = 11, metrics=None) -> StackResult:
    """Stacking where each stage's operator is chosen by a race."""
    schedule.validate()
    ckpt = new_checkpoint(config, seed, hyper)
    reports: list[SelectionReport] = []
    traces: list[LossTrace] = []
    overhead = 0
    depths = [ckpt.num_layers]

    boot = train_steps(ckpt, corpus, schedule.stage_budgets[0], batch_size, seq_len,
                       cadence=schedule.cadence, val_batches=val_batches,
                       candidate_id="stage1", metrics=metrics)
    if boot.failed:
        raise RaceError("stage 1 bootstrap training diverged")
    ckpt = boot.checkpoint
    traces.append(boot.trace)

    for stage in range(2, schedule.n_stages + 1):
        space = schedule.stage_spaces[stage - 1]
        budget = schedule.stage_budgets[stage - 1]
        cfg = RaceConfig(
            space=space, k_race=schedule.k_race, cadence=schedule.cadence,
            growth_seed=growth_seed, batch_size=batch_size, seq_len=seq_len,
            val_batches=val_batches, smooth_window=smooth_window,
        )
        report = race(ckpt, corpus, cfg, metrics=metrics)
        overhead += len(report.candidates) * schedule.k_race
        reports.append(report)
        ckpt, trace = continue_winner(
            report, corpus, budget - schedule.k_race, batch_size, seq_len,
            cadence=schedule.cadence, val_batches=val_batches, metrics=metrics,
        )
        traces.append(trace)
        depths.append(ckpt.num_layers)

    final_loss = evaluate(ckpt, corpus, batch_size, seq_len, val_batches)
    return StackResult(ckpt, reports, overhead, depths, final_loss, traces)


def fixed_stack(config: ModelConfig, hyper: AdamHyper, schedule: StackingSchedule,
                corpus: Corpus, seed: int, block_size: int, *, batch_size: int,
                seq_len: int, val_batches: int = 16, metrics=None) -> StackResult:
    """Last-stacking baseline: every stage duplicates the final block on top."""
    schedule.validate()
    ckpt = new_checkpoint(config, seed, hyper)
    depths = [ckpt.num_layers]
    traces: list[LossTrace] = []

    boot = train_steps(ckpt, corpus, schedule.stage_budgets[0], batch_size, seq_len,
                       cadence=schedule.cadence, val_batches=val_batches,
                       candidate_id="stage1", metrics=metrics)
    if boot.failed:
        raise RaceError("stage 1 bootstrap training diverged")
    ckpt = boot.checkpoint
    traces.append(boot.trace)

    for stage in range(2, schedule.n_stages + 1):
        op = post_stack_operator(block_size, ckpt.num_layers)
        assert op.scheme == SCHEME_DUPLICATE
        ckpt = apply_growth(ckpt, op, seed)
        res = train_steps(ckpt, corpus, schedule.stage_budgets[stage - 1],
                          batch_size, seq_len, cadence=schedule.cadence,
                          val_batches=val_batches,
                          candidate_id=f"stage{stage}:{op.to_string()}",
                          metrics=metrics)
        if res.failed:
            raise RaceError(f"stage {stage} training diverged")
        ckpt = res.checkpoint
        traces.append(res.trace)
        depths.append(ckpt.num_layers)

    final_loss = evaluate(ckpt, corpus, batch_size, seq_len, val_batches)
    return StackResult(ckpt, [], 0, depths, final_loss, traces)


def report_to_json(report: SelectionReport) -> dict:
    """JSON-serializable form of the report (traces, audit digests, winner)."""
    return {
        "base_step": report.base_step,
        "k_race": report.k_race,
        "cadence": report.cadence,
        "winner": report.winner.to_string(),
        "winner_path": report.winner_path,
        "oracle": report.oracle,
        "candidates": [
            {
                "operator": c.operator.to_string(),
                "failed": c.failed,
                "selection_loss": c.selection_loss,
                "steps": c.trace.steps,
                "losses": c.trace.losses,
                "batch_digests": [[s, format(d, "016x")] for s, d in c.batch_digests],
            }
            for c in report.candidates
        ],
    }


def reselect_from_json(payload: dict) -> str:
    """Recompute the winner from a serialized report's losses (consistency check)."""
    scored = []
    from .growth import parse_operator

    for cand in payload["candidates"]:
        if cand["failed"] or cand["selection_loss"] is None:
            continue
        scored.append((parse_operator(cand["operator"]), cand["selection_loss"]))
    return select_winner(scored).to_string()


def write_report(report: SelectionReport, directory) -> tuple[Path, Path]:
    """Persist report JSON plus a long-format traces CSV (step, operator, loss)."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        report_path = directory / "report.json"
        report_path.write_text(
            json.dumps(report_to_json(report), indent=1, sort_keys=True) + "\n"
        )
        traces_path = directory / "traces.csv"
        lines = ["step,operator,loss"]
        for c in report.candidates:
            for s, l in zip(c.trace.steps, c.trace.losses):
                lines.append(f"{s},{c.operator.to_string()},{format(l, '.17g')}")
        traces_path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise StorageError(f"cannot write race report to {directory}: {exc}") from exc
    return report_path, traces_path
