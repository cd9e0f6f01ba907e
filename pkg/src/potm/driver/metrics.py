"""Timing logs and the strong-scaling table."""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

CSV_FIELDS = ("step", "phase", "rank", "seconds", "halo_nodes", "halo_mps")


@dataclass
class TimingLog:
    """Per-step, per-phase, per-rank wallclock durations and halo sizes.

    The phase named ``total`` holds the full step duration; every other
    phase is a part of it.
    """
    rows: list[tuple[int, str, int, float, int, int]] = field(default_factory=list)
    setup_seconds: float = 0.0

    def add(self, report, rank: int) -> None:
        for phase, sec in report.timings.items():
            self.rows.append((report.step, phase, rank, float(sec), report.halo_nodes,
                              report.halo_mps))

    def extend(self, other: "TimingLog") -> None:
        self.rows.extend(other.rows)
        self.setup_seconds = max(self.setup_seconds, other.setup_seconds)

    def sorted(self) -> "TimingLog":
        return TimingLog(sorted(self.rows, key=lambda r: (r[0], r[2], r[1])), self.setup_seconds)

    @property
    def steps(self) -> list[int]:
        return sorted({r[0] for r in self.rows})

    def step_times(self) -> dict[int, float]:
        """Slowest rank's duration of each step."""
        out: dict[int, float] = defaultdict(float)
        for step, phase, _, sec, _, _ in self.rows:
            if phase == "total":
                out[step] = max(out[step], sec)
        return dict(out)

    def wallclock(self) -> float:
        """Sum over steps of the slowest rank's step time."""
        return sum(self.step_times().values())

    def phase_totals(self) -> dict[str, float]:
        per: dict[tuple[str, int], float] = defaultdict(float)
        for _, phase, rank, sec, _, _ in self.rows:
            per[phase, rank] += sec
        out: dict[str, float] = defaultdict(float)
        for (phase, _), sec in per.items():
            out[phase] = max(out[phase], sec)
        return dict(out)

    def halo_sizes(self) -> dict[int, tuple[float, float]]:
        """Mean (nodes, MPs) halo size over ranks, per step."""
        acc: dict[int, list] = defaultdict(lambda: [0, 0, 0])
        for step, phase, _, _, hn, hm in self.rows:
            if phase == "total":
                a = acc[step]
                a[0] += hn
                a[1] += hm
                a[2] += 1
        return {s: (a[0] / a[2], a[1] / a[2]) for s, a in acc.items()}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_FIELDS)
            for r in self.rows:
                w.writerow([r[0], r[1], r[2], repr(r[3]), r[4], r[5]])

    @classmethod
    def read_csv(cls, path) -> "TimingLog":
        with open(path, newline="") as fh:
            rd = csv.DictReader(fh)
            if tuple(rd.fieldnames or ()) != CSV_FIELDS:
                raise ValueError(f"{path}: not a timing log (header {rd.fieldnames})")
            rows = [(int(r["step"]), r["phase"], int(r["rank"]), float(r["seconds"]),
                     int(r["halo_nodes"]), int(r["halo_mps"])) for r in rd]
        return cls(rows)


@dataclass(frozen=True)
class ScalingRow:
    workers: int
    wallclock: float
    speedup: float
    efficiency: float


def metrics(times, baseline: int = 1) -> list[ScalingRow]:
    """Speedup ``t_n / t_p`` and efficiency ``n t_n / (p t_p)`` per worker count.

    ``times`` maps a worker count to either a wallclock time or a
    :class:`TimingLog`. ``baseline`` is the reference worker count ``n``.
    """
    t = {int(p): (v.wallclock() if isinstance(v, TimingLog) else float(v))
         for p, v in dict(times).items()}
    if baseline not in t:
        raise KeyError(f"missing baseline run with {baseline} worker(s)")
    tn = t[baseline]
    rows = []
    for p in sorted(t):
        s = tn / t[p]
        rows.append(ScalingRow(p, t[p], s, s * baseline / p))
    return rows


def format_table(rows: list[ScalingRow]) -> str:
    head = ("workers", "wallclock_s", "speedup", "efficiency_pct")
    body = [(str(r.workers), f"{r.wallclock:.4f}", f"{r.speedup:.4f}", f"{100 * r.efficiency:.2f}")
            for r in rows]
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(line, widths)) for line in [head, *body]]
    return "\n".join(lines) + "\n"


def write_table(rows: list[ScalingRow], text_path=None, csv_path=None) -> str:
    text = format_table(rows)
    if text_path is not None:
        Path(text_path).write_text(text)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("workers", "wallclock_s", "speedup", "efficiency"))
            for r in rows:
                w.writerow((r.workers, repr(r.wallclock), repr(r.speedup), repr(r.efficiency)))
    return text
