"""Cost model, recall metrics, parameter sweeps and result files."""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .clustering import ClusterConfig
from .core import ParameterError, SubspaceLayout
from .counters import CostCounters, recall_at_k
from .index import payload_bytes
from .retrieval import RetrievalConfig
from .sim import Workload, prefill, run_decode

log = logging.getLogger(__name__)

__all__ = [
    "CostCounters",
    "recall_at_k",
    "h2d_bytes",
    "table_bytes",
    "SweepResult",
    "expand_grid",
    "sweep",
    "write_results",
    "write_series",
]


def _exact(x) -> Fraction:
    return Fraction(repr(x)) if isinstance(x, float) else Fraction(x)


def _number(fr: Fraction) -> Union[int, float]:
    return int(fr) if fr.denominator == 1 else float(fr)


def h2d_bytes(rho: float, n: int, d: int, bytes_per_elem: int = 2, period: int = 1) -> Union[int, float]:
    """Modeled host-to-device bytes per step, ``2 * rho * N * d * B / P`` (keys and values)."""
    if rho <= 0 or n <= 0 or d <= 0 or bytes_per_elem <= 0 or period <= 0:
        raise ParameterError("h2d_bytes needs positive arguments")
    return _number(2 * _exact(rho) * n * d * bytes_per_elem / period)


def table_bytes(m: int, C: int, L: int, d: int, bytes_per_score: int = 2) -> int:
    """Index size: ``m*C*L`` list entries of (int32 index + score) plus ``C*d`` centroid values.

    With 16-bit scores this is ``6*m*C*L + 2*m*C*(d/m)``.
    """
    if m <= 0 or C <= 0 or L < 0 or d <= 0 or bytes_per_score not in (2, 4):
        raise ParameterError("table_bytes needs positive m, C, d, L >= 0 and 2- or 4-byte scores")
    return m * C * L * (4 + bytes_per_score) + C * d * bytes_per_score


def kv_bytes(n: int, d: int, bytes_per_elem: int = 2) -> int:
    return 2 * d * bytes_per_elem * n


# --------------------------------------------------------------------- sweeps

GRID_KEYS = ("m", "centroids", "alpha", "rho", "period", "tau", "window", "backoff_threshold", "passthrough")


@dataclass
class SweepResult:
    config_id: str
    params: dict
    seeds: int
    mean_recall: float
    mean_output_error: float
    mean_cost: float
    p50_cost: float
    p90_cost: float
    p99_cost: float
    index_bytes: int
    searches: int

    FIELDS = (
        "config_id", "m", "centroids", "alpha", "rho", "period", "tau", "seeds", "mean_recall",
        "mean_output_error", "mean_cost", "p50_cost", "p90_cost", "p99_cost", "index_bytes", "searches",
    )

    def row(self) -> dict:
        out = {k: self.params.get(k) for k in ("m", "centroids", "alpha", "rho", "period", "tau")}
        out.update({k: v for k, v in asdict(self).items() if k != "params"})
        return out

    def percentiles_ordered(self) -> bool:
        return self.p50_cost <= self.p90_cost <= self.p99_cost


DEFAULT_CELL = dict(
    m=8, centroids=64, alpha=0.2, rho=0.05, period=1, tau=1, window=32,
    backoff_threshold=float("-inf"), passthrough=True, iterations=10, steps=32,
)


def expand_grid(grid: dict, base: Optional[dict] = None) -> list[dict]:
    """Cells of a grid: ``{"cells": [...]}`` is taken literally, otherwise the cartesian product of list values.

    Unset parameters come from ``base`` and then ``DEFAULT_CELL``.  An empty
    mapping yields no cells.
    """
    if not grid:
        return []
    defaults = {**DEFAULT_CELL, **(base or {})}
    if "cells" in grid:
        shared = {k: v for k, v in grid.items() if k != "cells"}
        return [{**defaults, **shared, **c} for c in grid["cells"]]
    axes = {k: (v if isinstance(v, list) else [v]) for k, v in grid.items()}
    names = list(axes)
    return [{**defaults, **dict(zip(names, combo))} for combo in itertools.product(*axes.values())]


def cell_id(cell: dict) -> str:
    return "m{m}-C{centroids}-a{alpha}-r{rho}-P{period}-t{tau}".format(**cell)


def infeasible_reason(cell: dict, workload: Workload) -> Optional[str]:
    if not 0 < cell["rho"] <= 1:
        return f"rho={cell['rho']} outside (0, 1]"
    if not 0 < cell["alpha"] <= 1:
        return f"alpha={cell['alpha']} outside (0, 1]"
    if cell["m"] < 1 or cell["m"] > workload.d:
        return f"m={cell['m']} cannot split d={workload.d}"
    if cell["centroids"] < 1 or cell["period"] < 1 or cell["tau"] < 1:
        return "centroids, period and tau must be >= 1"
    if cell["steps"] > workload.decode_q.shape[0]:
        return f"{cell['steps']} steps but only {workload.decode_q.shape[0]} decode tokens"
    return None


def run_cell(cell: dict, workload: Workload, seed: int):
    """Run one (config, seed) pair; returns per-step recall, error and modeled overhead."""
    layout = SubspaceLayout.uniform(workload.d, cell["m"])
    ccfg = ClusterConfig(n_centroids=cell["centroids"], iterations=cell["iterations"], seed=seed)
    rcfg = RetrievalConfig(
        keep_ratio=cell["rho"], search_period=cell["period"], recent_window=cell["window"],
        backoff_tau=cell["tau"], backoff_threshold=cell["backoff_threshold"],
        recent_passthrough=cell["passthrough"],
    )
    session = prefill(workload.prefill_q, workload.prefill_k, workload.prefill_v, layout, ccfg, cell["alpha"], rcfg)
    steps = cell["steps"]
    reports = run_decode(session, workload.decode_q, workload.decode_k, workload.decode_v, steps, compare_dense=True)
    recall = np.array([r.recall_at_k for r in reports])
    err = np.array([r.output_error for r in reports])
    cost = np.array([r.counters.modeled_overhead() for r in reports], dtype=float)
    searches = sum(r.counters.searches for r in reports)
    nbytes = payload_bytes(session.index, 16)["payload"]
    return recall, err, cost, searches, nbytes


def _run_cell_seeds(args):
    cell, workload, seeds = args
    try:
        return [run_cell(cell, workload, s) for s in seeds]
    except (ValueError, ArithmeticError) as e:
        return f"{type(e).__name__}: {e}"


def sweep(
    grid: Union[dict, Sequence[dict]],
    workload: Workload,
    seeds: Sequence[int] = (0,),
    jobs: int = 1,
    skipped: Optional[list] = None,
) -> list[SweepResult]:
    """Run every feasible cell for every seed with the dense oracle on and aggregate.

    Infeasible or failing cells are logged and, if ``skipped`` is a list,
    recorded there as ``(config_id, reason)``; the other cells still run.  Costs are normalized so their mean is 1.0.
    """
    cells = expand_grid(grid) if isinstance(grid, dict) else [{**DEFAULT_CELL, **c} for c in grid]
    if not seeds:
        raise ParameterError("sweep needs at least one seed")
    feasible = []
    for cell in cells:
        reason = infeasible_reason(cell, workload)
        if reason:
            log.warning("skipping %s: %s", cell_id(cell), reason)
            if skipped is not None:
                skipped.append((cell_id(cell), reason))
        else:
            feasible.append(cell)
    tasks = [(cell, workload, list(seeds)) for cell in feasible]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_cell_seeds, tasks))
    else:
        outcomes = [_run_cell_seeds(t) for t in tasks]

    results = []
    for cell, per_seed in zip(feasible, outcomes):
        if isinstance(per_seed, str):
            log.warning("cell %s failed: %s", cell_id(cell), per_seed)
            if skipped is not None:
                skipped.append((cell_id(cell), per_seed))
            continue
        recall = np.concatenate([o[0] for o in per_seed])
        err = np.concatenate([o[1] for o in per_seed])
        cost = np.concatenate([o[2] for o in per_seed])
        mean_cost = float(cost.mean())
        norm = cost / mean_cost if mean_cost > 0 else cost
        p50, p90, p99 = (float(x) for x in np.percentile(norm, [50, 90, 99]))
        results.append(
            SweepResult(
                config_id=cell_id(cell),
                params={k: cell[k] for k in cell},
                seeds=len(seeds),
                mean_recall=float(recall.mean()),
                mean_output_error=float(err.mean()),
                mean_cost=mean_cost,
                p50_cost=p50,
                p90_cost=p90,
                p99_cost=p99,
                index_bytes=int(per_seed[0][4]),
                searches=int(sum(o[3] for o in per_seed)),
            )
        )
    return results


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(round(v, 10))
    return str(v)


def write_results(path, results: Sequence[SweepResult]) -> None:
    """Tab-separated: a header line of field names, then one record per result."""
    lines = ["\t".join(SweepResult.FIELDS)]
    for r in results:
        row = r.row()
        lines.append("\t".join(_fmt(row[f]) for f in SweepResult.FIELDS))
    Path(path).write_text("\n".join(lines) + "\n")


SERIES_METRICS = ("mean_recall", "mean_output_error", "mean_cost", "p99_cost")


def write_series(out_dir, results: Sequence[SweepResult], x_param: Optional[str] = None) -> list[Path]:
    """One ``<metric>.tsv`` per metric with ``x<TAB>y`` pairs.

    ``x`` is ``x_param`` of each cell; by default the first grid parameter that
    varies, or the row number when none does.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if x_param is None:
        for key in GRID_KEYS:
            if len({repr(r.params.get(key)) for r in results}) > 1:
                x_param = key
                break
    written = []
    for metric in SERIES_METRICS:
        path = out_dir / f"{metric}.tsv"
        lines = [f"{x_param or 'row'}\t{metric}"]
        for i, r in enumerate(results):
            x = r.params[x_param] if x_param else i
            lines.append(f"{_fmt(x)}\t{_fmt(getattr(r, metric))}")
        path.write_text("\n".join(lines) + "\n")
        written.append(path)
    return written


def non_decreasing(values: Sequence[float], tol: float = 0.0) -> bool:
    return all(b >= a - tol for a, b in zip(values, values[1:]))
