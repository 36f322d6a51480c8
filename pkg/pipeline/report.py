"""Comparison tables across client modes (CSV)."""

import csv
import logging
from dataclasses import dataclass, field
from itertools import permutations
from pathlib import Path

from pipeline.timing import ClientMode, dominance_probability, summarize_mode

logger = logging.getLogger(__name__)

TABLE_COLUMNS = ["mode", "ttfa_ms", "smin", "expected_react_ms", "lo_ms", "hi_ms", "stall_fraction"]
MATRIX_COLUMNS = ["mode_a", "mode_b", "p_faster"]
SPEEDUP_COLUMNS = ["preset", "ttfa_speedup", "smin_speedup", "react_speedup"]

DEFAULT_MODES = (ClientMode.SYNC, ClientMode.ASYNC_NAIVE, ClientMode.ASYNC_PREFIX, ClientMode.FASTER)


@dataclass
class Comparison:
    name: str
    summaries: dict = field(default_factory=dict)
    dominance: list = field(default_factory=list)

    def speedups(self, baseline=ClientMode.ASYNC_NAIVE, candidate=ClientMode.FASTER):
        """Baseline/candidate ratios of latency, s_min and expected reaction."""
        if baseline not in self.summaries or candidate not in self.summaries:
            return None
        base, cand = self.summaries[baseline], self.summaries[candidate]
        return {
            "ttfa": base.latency / cand.latency,
            "smin": base.s_min / cand.s_min,
            "react": base.reaction.mean / cand.reaction.mean,
        }

    def table_rows(self):
        rows = []
        for mode, summary in self.summaries.items():
            rows.append(
                {
                    "mode": mode.value,
                    "ttfa_ms": f"{summary.latency * 1000:.1f}",
                    "smin": summary.s_min,
                    "expected_react_ms": f"{summary.reaction.mean * 1000:.1f}",
                    "lo_ms": f"{summary.reaction.lo * 1000:.1f}",
                    "hi_ms": f"{summary.reaction.hi * 1000:.1f}",
                    "stall_fraction": f"{summary.stall_fraction:.4f}",
                }
            )
        return rows

    def matrix_rows(self):
        return [{"mode_a": a.value, "mode_b": b.value, "p_faster": f"{p:.4f}"} for a, b, p in self.dominance]


def compare_modes(timing, name="timing", modes=DEFAULT_MODES, horizons=None):
    """
    Summaries for every mode at its s_min (or `horizons[mode]`) plus
    P(react_a < react_b) for all ordered mode pairs.
    """
    horizons = horizons or {}
    comparison = Comparison(name)
    for mode in modes:
        mode = ClientMode(mode)
        comparison.summaries[mode] = summarize_mode(timing, mode, horizons.get(mode))
    for a, b in permutations(comparison.summaries, 2):
        p = dominance_probability(comparison.summaries[a].reaction, comparison.summaries[b].reaction)
        comparison.dominance.append((a, b, p))
    return comparison


def _write(path, columns, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    return path


def write_comparison(comparison, out_dir):
    """Writes table_<name>.csv and dominance_<name>.csv; returns both paths."""
    out_dir = Path(out_dir)
    table = _write(out_dir / f"table_{comparison.name}.csv", TABLE_COLUMNS, comparison.table_rows())
    matrix = _write(out_dir / f"dominance_{comparison.name}.csv", MATRIX_COLUMNS, comparison.matrix_rows())
    logger.info("comparison %s written to %s", comparison.name, out_dir)
    return table, matrix


def write_speedups(comparisons, path):
    rows = []
    for comparison in comparisons:
        ratios = comparison.speedups()
        if ratios is None:
            continue
        rows.append(
            {
                "preset": comparison.name,
                "ttfa_speedup": f"{ratios['ttfa']:.2f}",
                "smin_speedup": f"{ratios['smin']:.2f}",
                "react_speedup": f"{ratios['react']:.2f}",
            }
        )
    return _write(path, SPEEDUP_COLUMNS, rows)


def write_timeline(timeline, path):
    rows = [
        {
            "index": p.index,
            "required_ms": f"{p.required * 1000:.1f}",
            "received_ms": f"{p.received * 1000:.1f}",
            "slack_ms": f"{p.slack * 1000:.1f}",
        }
        for p in timeline
    ]
    return _write(path, ["index", "required_ms", "received_ms", "slack_ms"], rows)
