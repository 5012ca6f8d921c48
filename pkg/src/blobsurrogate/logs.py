"""Training log serialization: (step, loss, seconds) rows as CSV."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

from .errors import FormatError

_HEADER = "step,loss,seconds"


def training_log_to_csv(rows: Sequence[tuple[int, float, float]]) -> str:
    lines = [_HEADER]
    for step, loss, seconds in rows:
        lines.append(f"{int(step)},{float(loss)!r},{float(seconds)!r}")
    return "\n".join(lines) + "\n"


def training_log_from_csv(text: str) -> list[tuple[int, float, float]]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != _HEADER:
        raise FormatError(f"training log CSV must start with header {_HEADER}")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 3:
            raise FormatError(f"training log row must have 3 fields: {ln!r}")
        try:
            rows.append((int(parts[0]), float(parts[1]), float(parts[2])))
        except ValueError as exc:
            raise FormatError(f"training log has malformed row: {ln!r}") from exc
    return rows


def save_training_log(rows: Sequence[tuple[int, float, float]], path: str | Path) -> None:
    Path(path).write_text(training_log_to_csv(rows))
