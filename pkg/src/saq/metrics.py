"""Time-indexed scalar traces, written as CSV.

Floats are formatted with repr(), which is the shortest round-trip
representation for 64-bit reals, so a reloaded trace is bit-exact and the
output is locale-independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class MetricTrace:
    columns: list[str]
    rows: list[list[float]] = field(default_factory=list)

    def log(self, *values: float):
        if len(values) != len(self.columns):
            raise ValueError(f"expected {len(self.columns)} values, got {len(values)}")
        self.rows.append([float(v) for v in values])

    def column(self, name: str) -> list[float]:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def last(self, name: str) -> float:
        return self.column(name)[-1]

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(",".join(self.columns) + "\n")
            for row in self.rows:
                f.write(",".join(repr(v) for v in row) + "\n")

    @classmethod
    def from_csv(cls, path) -> "MetricTrace":
        with open(path, "r", encoding="utf-8") as f:
            header = f.readline().rstrip("\n")
            trace = cls(columns=header.split(","))
            for line in f:
                line = line.strip()
                if line:
                    trace.rows.append([float(x) for x in line.split(",")])
        return trace
