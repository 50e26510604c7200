"""Append-only metrics log: one JSON record per line, fields in a fixed order."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

FIELD_ORDER = ("timestamp", "experiment-id", "kind", "payload")


@dataclass(frozen=True)
class MetricsRecord:
    timestamp: float  # simulated cost at which the measurement applies
    experiment_id: str
    kind: str
    payload: dict = field(default_factory=dict)

    def to_line(self) -> str:
        # payload keys are sorted so equal records serialize to equal bytes
        payload = json.loads(json.dumps(self.payload, sort_keys=True, allow_nan=False))
        obj = {"timestamp": float(self.timestamp), "experiment-id": self.experiment_id,
               "kind": self.kind, "payload": payload}
        return json.dumps(obj, separators=(",", ":"), allow_nan=False)

    @classmethod
    def from_line(cls, line: str) -> "MetricsRecord":
        obj = json.loads(line)
        if tuple(obj) != FIELD_ORDER:
            raise ValueError(f"metrics record fields {tuple(obj)} != {FIELD_ORDER}")
        return cls(obj["timestamp"], obj["experiment-id"], obj["kind"], obj["payload"])


def append_records(path, records: Iterable[MetricsRecord]) -> int:
    lines = [r.to_line() + "\n" for r in records]
    with open(path, "a", encoding="utf-8") as fh:
        fh.writelines(lines)
    return len(lines)


def read_records(path) -> list[MetricsRecord]:
    text = Path(path).read_text(encoding="utf-8")
    return [MetricsRecord.from_line(line) for line in text.splitlines() if line.strip()]
