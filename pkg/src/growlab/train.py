"""Single-candidate training loop.

The loop is a pure function of (checkpoint, corpus, data seed): the batch at
global step t is always ``batch_at(corpus, "train", t, seed)``, so training
k then m steps in two calls is bit-identical to training k+m steps in one.
Validation measurements never touch optimizer or parameter state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .analysis import LossTrace
from .checkpoint import Checkpoint
from .data import Corpus, batch_at, validation_set
from .model import backward, forward_loss
from .optim import adamw_step


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    trace: LossTrace
    batch_digests: list[tuple[int, int]] = field(default_factory=list)
    failed: bool = False  # non-finite loss encountered; trace ends at the last finite point


def evaluate(ckpt: Checkpoint, corpus: Corpus, batch_size: int, seq_len: int,
             n_batches: int = 16) -> float:
    """Mean loss over the fixed validation set (keyed by the checkpoint's seed)."""
    batches = validation_set(corpus, ckpt.seed, n_batches, batch_size, seq_len)
    with np.errstate(all="ignore"):
        total = 0.0
        for b in batches:
            total += forward_loss(ckpt.params, b.tokens)
    return total / n_batches


def train_steps(ckpt: Checkpoint, corpus: Corpus, n_steps: int, batch_size: int,
                seq_len: int, *, cadence: int = 0, val_batches: int = 16,
                candidate_id: str = "base", metrics=None,
                measure_start: bool = True) -> TrainResult:
    """Train for exactly ``n_steps``, measuring validation loss on a cadence.

    Measurements happen after j steps for j = 0, every ``cadence`` steps, and
    at j = n_steps (cadence <= 0 measures only the endpoints); resumed runs
    pass ``measure_start=False`` to skip the boundary point they already
    measured. Returns a new checkpoint; the input is not mutated. On a
    non-finite training or validation loss the candidate stops early and is
    flagged failed.
    """
    steps_list: list[int] = []
    losses: list[float] = []
    digests: list[tuple[int, int]] = []
    failed = False

    def measure(current_ckpt) -> bool:
        val = evaluate(current_ckpt, corpus, batch_size, seq_len, val_batches)
        if not np.isfinite(val):
            return False
        steps_list.append(current_ckpt.step)
        losses.append(val)
        if metrics is not None:
            metrics.log(candidate_id, current_ckpt.step, "validation", val)
        return True

    current = Checkpoint(ckpt.params, ckpt.opt, ckpt.step, ckpt.seed,
                         list(ckpt.provenance))
    if measure_start and not measure(current):
        return TrainResult(current, LossTrace(candidate_id, steps_list, losses),
                           digests, failed=True)

    for j in range(1, n_steps + 1):
        batch = batch_at(corpus, "train", current.step, current.seed,
                         batch_size, seq_len)
        digests.append((current.step, batch.digest))
        with np.errstate(all="ignore"):
            loss, grads = backward(current.params, batch.tokens)
        if not np.isfinite(loss):
            failed = True
            break
        if metrics is not None:
            metrics.log(candidate_id, current.step, "train", loss)
        new_params, new_opt = adamw_step(current.params, grads, current.opt)
        current = Checkpoint(new_params, new_opt, current.step + 1,
                             current.seed, current.provenance)
        at_cadence = cadence > 0 and j % cadence == 0
        if (at_cadence or j == n_steps) and current.step not in steps_list:
            if not measure(current):
                failed = True
                break

    return TrainResult(
        checkpoint=current,
        trace=LossTrace(operator=candidate_id, steps=steps_list, losses=losses),
        batch_digests=digests,
        failed=failed,
    )
