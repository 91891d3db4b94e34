"""Landscape analysis over candidate loss traces.

Everything here operates on a rectangular trace matrix: one row per growth
operator, one column per measurement step, entries in nats, plus a final-loss
vector taken at the horizon step. The toolkit covers Pearson and Spearman
correlation (average ranks on ties), trace smoothing, step-by-step
self-correlation, correlation with final loss, recall@k of the hindsight-best
operator, regret and relative regret of step-wise selection, and detection of
the step where candidate ordering stabilizes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DegenerateDataError, StorageError

UNDEFINED_CELL = "undefined"  # CSV sentinel for zero-variance correlation cells


@dataclass
class LossTrace:
    """Ordered (global step, validation loss) measurements for one candidate."""

    operator: str
    steps: list[int]
    losses: list[float]

    def validate(self):
        if len(self.steps) != len(self.losses):
            raise DataError(f"trace {self.operator}: steps and losses differ in length")
        if any(b <= a for a, b in zip(self.steps, self.steps[1:])):
            raise DataError(f"trace {self.operator}: steps must be strictly increasing")

    def loss_at(self, step: int) -> float:
        try:
            return self.losses[self.steps.index(step)]
        except ValueError:
            raise DataError(f"trace {self.operator} has no measurement at step {step}")


def pearson(x, y) -> float:
    """Sample Pearson correlation of two equal-length vectors."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or x.size != y.size:
        raise ConfigError("pearson requires two 1-d vectors of equal length")
    if x.size < 2:
        raise ConfigError(f"pearson requires at least 2 points, got {x.size}")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = float(np.sqrt((dx * dx).sum()))
    sy = float(np.sqrt((dy * dy).sum()))
    if sx == 0.0 or sy == 0.0:
        raise DegenerateDataError("correlation undefined: an input has zero variance")
    return float((dx * dy).sum() / (sx * sy))


def rank_average(x) -> np.ndarray:
    """Ranks 1..n with ties assigned the average of their covered ranks."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    """Spearman rank correlation: Pearson of the average-rank vectors."""
    return pearson(rank_average(x), rank_average(y))


def smooth(trace: LossTrace, window: int = 11) -> LossTrace:
    """Centered moving average; the window truncates at the trace boundaries."""
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"smoothing window must be odd and >= 1, got {window}")
    trace.validate()
    if not trace.steps:
        raise DataError(f"trace {trace.operator} is empty")
    half = window // 2
    vals = np.asarray(trace.losses, dtype=np.float64)
    out = [
        float(vals[max(0, i - half):i + half + 1].mean())
        for i in range(vals.size)
    ]
    return LossTrace(operator=trace.operator, steps=list(trace.steps), losses=out)


@dataclass
class TraceMatrix:
    """Rectangular losses: operators (rows) x measurement steps (columns)."""

    operators: list[str]
    steps: list[int]
    losses: np.ndarray  # (n_ops, n_steps) float64
    horizon_step: int
    final_losses: np.ndarray  # (n_ops,) float64

    def validate(self):
        if self.losses.shape != (len(self.operators), len(self.steps)):
            raise DataError("trace matrix shape does not match operators x steps")
        if any(b <= a for a, b in zip(self.steps, self.steps[1:])):
            raise DataError("trace matrix steps must be strictly increasing")
        if not np.isfinite(self.losses).all() or not np.isfinite(self.final_losses).all():
            raise DataError("trace matrix contains non-finite losses")

    def step_column(self, step: int) -> np.ndarray:
        try:
            return self.losses[:, self.steps.index(step)]
        except ValueError:
            raise DataError(f"no measurement column at step {step}")


def trace_matrix(traces: list[LossTrace], horizon_step: int,
                 smooth_window: int = 0) -> TraceMatrix:
    """Assemble traces into a matrix; all traces must share the same steps.

    The final-loss vector is the column at ``horizon_step``. When
    ``smooth_window`` > 1 each trace is smoothed first (the final vector is
    taken from the smoothed traces as well).
    """
    if not traces:
        raise DataError("no traces given")
    if smooth_window > 1:
        traces = [smooth(t, smooth_window) for t in traces]
    ref = traces[0].steps
    for t in traces:
        t.validate()
        if t.steps != ref:
            raise DataError(
                f"candidate {t.operator!r} has ragged measurement steps "
                f"({len(t.steps)} points vs {len(ref)})"
            )
    if horizon_step not in ref:
        raise DataError(f"horizon step {horizon_step} is not a measured step")
    losses = np.array([t.losses for t in traces], dtype=np.float64)
    tm = TraceMatrix(
        operators=[t.operator for t in traces],
        steps=list(ref),
        losses=losses,
        horizon_step=horizon_step,
        final_losses=losses[:, ref.index(horizon_step)].copy(),
    )
    tm.validate()
    return tm


def self_correlation(tm: TraceMatrix) -> np.ndarray:
    """Spearman correlation between the loss columns of every pair of steps.

    Zero-variance columns yield NaN cells (emitted as an explicit sentinel in
    CSV form, never silently zero).
    """
    tm.validate()
    if len(tm.operators) < 3:
        raise ConfigError(
            f"self-correlation needs >= 3 operators, got {len(tm.operators)}"
        )
    n = len(tm.steps)
    out = np.full((n, n), np.nan)
    for i in range(n):
        for j in range(i, n):
            try:
                r = spearman(tm.losses[:, i], tm.losses[:, j])
            except DegenerateDataError:
                r = np.nan
            out[i, j] = out[j, i] = r
    return out


def correlation_with_final(tm: TraceMatrix) -> np.ndarray:
    """Spearman(losses at step i, final losses) for every measured step."""
    tm.validate()
    out = np.full(len(tm.steps), np.nan)
    for i in range(len(tm.steps)):
        try:
            out[i] = spearman(tm.losses[:, i], tm.final_losses)
        except DegenerateDataError:
            pass
    return out


def _best_operator_index(tm: TraceMatrix) -> int:
    # Hindsight-best operator; ties broken by row order for determinism.
    return int(np.argmin(tm.final_losses))


def recall_at_k(tm: TraceMatrix, k: int) -> np.ndarray:
    """Per-step indicator: is the hindsight-best operator within the k
    lowest-loss operators at that step?"""
    tm.validate()
    n_ops = len(tm.operators)
    if not 1 <= k <= n_ops:
        raise ConfigError(f"k must lie in 1..{n_ops}, got {k}")
    star = _best_operator_index(tm)
    out = np.zeros(len(tm.steps), dtype=np.int64)
    for i in range(len(tm.steps)):
        top = np.argsort(tm.losses[:, i], kind="stable")[:k]
        out[i] = int(star in top)
    return out


@dataclass
class RegretInputs:
    """Final losses plus the per-step selection they would induce."""

    final_losses: np.ndarray  # (n_ops,), loss at the horizon step
    steps: list[int]
    argmin_ops: list[int]  # per-step index of the lowest-loss operator

    def __post_init__(self):
        self.final_losses = np.asarray(self.final_losses, dtype=np.float64)
        if len(self.steps) != len(self.argmin_ops):
            raise DataError("steps and argmin_ops must have equal length")

    @property
    def loss_min(self) -> float:
        return float(self.final_losses.min())

    @property
    def loss_max(self) -> float:
        return float(self.final_losses.max())

    def _chosen(self, step: int) -> int:
        try:
            return self.argmin_ops[self.steps.index(step)]
        except ValueError:
            raise DataError(f"no selection is defined at step {step}")


def regret_inputs(tm: TraceMatrix) -> RegretInputs:
    tm.validate()
    argmins = [int(np.argmin(tm.losses[:, i])) for i in range(len(tm.steps))]
    return RegretInputs(
        final_losses=tm.final_losses, steps=list(tm.steps), argmin_ops=argmins
    )


def regret(inputs: RegretInputs, step: int) -> float:
    """Final-loss penalty of selecting by step-``step`` loss: l(G_i) - l_min."""
    return float(inputs.final_losses[inputs._chosen(step)] - inputs.loss_min)


def relative_regret(inputs: RegretInputs, step: int) -> float:
    """Regret normalized by the final-loss range across the space, in [0, 1]."""
    spread = inputs.loss_max - inputs.loss_min
    if spread <= 0.0:
        raise DegenerateDataError(
            "relative regret undefined: all final losses are equal"
        )
    return regret(inputs, step) / spread


def detect_phase_transition(tm: TraceMatrix, tau: float = 0.8):
    """Earliest measured step t* such that correlation-with-final stays >= tau
    from t* onward; None when no such step exists."""
    tm.validate()
    if len(tm.steps) < 3:
        raise ConfigError(f"need >= 3 measured steps, got {len(tm.steps)}")
    cwf = correlation_with_final(tm)
    ok = np.where(np.isnan(cwf), False, cwf >= tau)
    idx = None
    for i in range(len(ok) - 1, -1, -1):
        if not ok[i]:
            break
        idx = i
    return tm.steps[idx] if idx is not None else None


def recommended_race_length(tm: TraceMatrix, tau: float = 0.8, margin: int = 4):
    """Race length with post-transition margin: margin x (t* - first step).

    Returns None when no transition is detected; when the transition sits at
    the very first step, one measurement interval is recommended instead.
    """
    t_star = detect_phase_transition(tm, tau)
    if t_star is None:
        return None
    offset = t_star - tm.steps[0]
    if offset == 0:
        return tm.steps[1] - tm.steps[0] if len(tm.steps) > 1 else 1
    return margin * offset


def _color_map(value: float) -> tuple[int, int, int]:
    # Blue (-1) -> white (0) -> red (+1); NaN renders gray.
    if np.isnan(value):
        return (128, 128, 128)
    v = float(np.clip(value, -1.0, 1.0))
    if v < 0:
        frac = 1.0 + v
        return (int(round(255 * frac)), int(round(255 * frac)), 255)
    frac = 1.0 - v
    return (255, int(round(255 * frac)), int(round(255 * frac)))


def write_matrix_csv(matrix: np.ndarray, path, labels=None):
    """Full-precision CSV; undefined cells carry an explicit sentinel."""
    matrix = np.asarray(matrix, dtype=np.float64)
    path = Path(path)
    lines = []
    if labels is not None:
        lines.append(",".join(str(x) for x in labels))
    for row in np.atleast_2d(matrix):
        lines.append(",".join(
            UNDEFINED_CELL if np.isnan(v) else format(v, ".17g") for v in row
        ))
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc
    return path


def read_matrix_csv(path, has_labels=False) -> np.ndarray:
    lines = Path(path).read_text().strip().splitlines()
    if has_labels:
        lines = lines[1:]
    rows = [
        [np.nan if cell == UNDEFINED_CELL else float(cell) for cell in line.split(",")]
        for line in lines
    ]
    return np.array(rows, dtype=np.float64)


def emit_heatmap(matrix: np.ndarray, path_base) -> tuple[Path, Path]:
    """Write a square correlation matrix as CSV plus a binary portable pixmap.

    The pixmap maps [-1, 1] linearly from blue through white to red, one
    pixel per matrix cell; undefined cells render gray.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ConfigError(f"heatmap requires a square matrix, got shape {matrix.shape}")
    base = Path(path_base)
    csv_path = write_matrix_csv(matrix, base.with_suffix(".csv"))

    n = matrix.shape[0]
    body = bytearray()
    for i in range(n):
        for j in range(n):
            body.extend(_color_map(matrix[i, j]))
    ppm_path = base.with_suffix(".ppm")
    try:
        with open(ppm_path, "wb") as fh:
            fh.write(f"P6\n{n} {n}\n255\n".encode())
            fh.write(bytes(body))
    except OSError as exc:
        raise StorageError(f"cannot write {ppm_path}: {exc}") from exc
    return csv_path, ppm_path
