"""Append-only JSONL metrics log.

One record per (candidate, step, split). Records carry no wall-clock data
unless timing is explicitly enabled, so reruns of the same config produce
byte-identical logs.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

from .errors import DataError, StorageError


class MetricsLogger:
    def __init__(self, path, run_id: str, timing: bool = False):
        self.path = Path(path)
        self.run_id = run_id
        self.timing = timing
        self._last_step: dict[tuple[str, str], int] = {}
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "a")
        except OSError as exc:
            raise StorageError(f"cannot open metrics log {path}: {exc}") from exc

    def log(self, candidate_id: str, step: int, split: str, loss: float):
        key = (candidate_id, split)
        last = self._last_step.get(key)
        if last is not None and step < last:
            raise DataError(
                f"metrics steps must be non-decreasing per candidate/split; "
                f"{key} went {last} -> {step}"
            )
        if last is not None and step == last:
            raise DataError(f"duplicate metrics record for {key} at step {step}")
        self._last_step[key] = step
        record = {
            "run_id": self.run_id,
            "candidate_id": candidate_id,
            "step": step,
            "split": split,
            "loss": loss,
        }
        if self.timing:
            record["wall_ms"] = int(time.monotonic() * 1000)
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[dict]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise StorageError(f"cannot read metrics log {path}: {exc}") from exc
    return [json.loads(line) for line in lines if line.strip()]
