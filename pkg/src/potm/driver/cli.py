"""Command-line entry point.

Examples::

    potm --config decks/taylor_rod.cfg --workers 4 --out runs/rod
    potm --config decks/taylor_rod.cfg --scaling 1,2,4,8 --steps 50
    potm --metrics runs/rod/timing_p1.csv runs/rod4/timing_p4.csv --out runs
    mpirun -n 4 potm --config decks/taylor_rod.cfg --backend cluster
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .deck import DeckError, ProblemDeck
from .metrics import TimingLog, metrics, write_table
from .run import RunReport, build_problem, run

logger = logging.getLogger("potm")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="potm", description="Parallel OTM solver driver")
    ap.add_argument("--config", type=Path, help="problem deck (key = value file)")
    ap.add_argument("--workers", type=int, help="number of workers (overrides the deck)")
    ap.add_argument("--backend", choices=("inproc", "cluster"), help="worker backend")
    ap.add_argument("--steps", type=int, help="number of steps (overrides the deck)")
    ap.add_argument("--out", type=Path, help="output directory (overrides the deck)")
    ap.add_argument("--write-interval", type=int, help="VTK output every K steps (0: none)")
    ap.add_argument("--seed", type=int, help="seed for synthetic deck generators")
    ap.add_argument("--binary", action="store_true", help="binary VTK output")
    ap.add_argument("--metrics", nargs="+", type=Path, metavar="TIMING_CSV",
                    help="aggregate timing logs into the speedup table and exit")
    ap.add_argument("--scaling", type=str, metavar="P1,P2,...",
                    help="run the deck once per worker count and write the speedup table")
    ap.add_argument("--log-level", default="INFO", help="logging level")
    return ap


def _apply_overrides(deck: ProblemDeck, args) -> ProblemDeck:
    changes = {}
    for attr, key in (("workers", "workers"), ("backend", "backend"), ("steps", "n_steps"),
                      ("write_interval", "write_interval"), ("seed", "seed")):
        v = getattr(args, attr)
        if v is not None:
            changes[key] = v
    if args.out is not None:
        changes["out"] = str(args.out.resolve())
    if args.binary:
        changes["vtk_binary"] = True
    return replace(deck, **changes)


def _out_dir(deck: ProblemDeck) -> Path:
    out = Path(deck.out)
    out = out if out.is_absolute() else deck.base_dir / out
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_run_outputs(report: RunReport, out: Path) -> dict[str, Path]:
    """Timing log and conservation diagnostics of a finished run (rank 0 only)."""
    paths = {"timing": out / f"timing_p{report.workers}.csv",
             "diagnostics": out / f"diagnostics_p{report.workers}.csv"}
    report.timing.write_csv(paths["timing"])
    with open(paths["diagnostics"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("step", "mp_mass", "node_mass", "px", "py", "pz"))
        for d in report.diagnostics:
            w.writerow((d.step, repr(d.mp_mass), repr(d.node_mass), *map(repr, d.momentum)))
    return paths


def _workers_of(log: TimingLog) -> int:
    return 1 + max((r[2] for r in log.rows), default=0)


def cmd_metrics(paths, out: Path) -> str:
    times = {}
    for p in paths:
        log = TimingLog.read_csv(p)
        times[_workers_of(log)] = log
    rows = metrics(times)
    out.mkdir(parents=True, exist_ok=True)
    return write_table(rows, out / "metrics.txt", out / "metrics.csv")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.metrics:
            print(cmd_metrics(args.metrics, args.out or Path.cwd()), end="")
            return 0
        if args.config is None:
            build_parser().error("--config is required unless --metrics is given")
        deck = _apply_overrides(ProblemDeck.from_file(args.config), args)
        deck.validate()
        out = _out_dir(deck)
        problem = build_problem(deck)
        if args.scaling:
            counts = [int(c) for c in args.scaling.split(",") if c.strip()]
            times = {}
            for p in counts:
                rep = run(deck, workers=p, problem=problem, collect=False)
                write_run_outputs(rep, out)
                times[p] = rep.timing
                logger.info("workers %d: %.3f s", p, rep.timing.wallclock())
            print(write_table(metrics(times, baseline=min(counts)), out / "metrics.txt",
                              out / "metrics.csv"), end="")
            return 0
        rep = run(deck, problem=problem, collect=False)
        if rep is not None:
            paths = write_run_outputs(rep, out)
            logger.info("%d steps on %d workers: %.3f s wallclock; timing log %s",
                        rep.steps, rep.workers, rep.timing.wallclock(), paths["timing"])
        return 0
    except (DeckError, OSError, KeyError, ValueError) as exc:
        logger.error("%s", exc)
        return 2
    except RuntimeError as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
