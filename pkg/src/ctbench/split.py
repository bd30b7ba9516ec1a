"""Label-balanced subset selection.

Two ways to pick ``N`` items whose share of every defect class is close to a
target fraction:

* :func:`empirical_split` draws random permutations and keeps prefixes that
  hit the target on one primary defect;
* :func:`miqp_split` solves the cardinality-constrained 0-1 least-squares
  problem ``min ||C^T x - b||^2, sum(x) = N`` exactly by branch and bound.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from ctbench.errors import DataError
from ctbench.gridio import DefectTable

DEFAULT_GAP = 2.22e-8
DEFAULT_TOLERANCE = 0.005
DEFAULT_PRIMARY = "browning"
DEFAULT_NODE_LIMIT = 10**7
_CHUNK = 4096


@dataclass(frozen=True, eq=False)
class PercentMatrix:
    """Per-item share of each defect class; every column sums to one.

    ``totals`` optionally keeps the integer column totals the shares were
    divided by; the exact solver uses them for a count-lattice bound.
    """

    item_ids: tuple[str, ...]
    defect_names: tuple[str, ...]
    values: np.ndarray
    totals: np.ndarray | None = None

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64, copy=True)
        if vals.ndim != 2 or vals.shape != (len(self.item_ids), len(self.defect_names)):
            raise DataError("percent matrix shape does not match its labels")
        if np.any(vals < 0) or np.any(vals > 1):
            raise DataError("shares must lie in [0, 1]")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "item_ids", tuple(self.item_ids))
        object.__setattr__(self, "defect_names", tuple(self.defect_names))
        if self.totals is not None:
            tot = np.array(self.totals, dtype=np.int64, copy=True).ravel()
            if tot.shape != (vals.shape[1],) or np.any(tot <= 0):
                raise DataError("column totals must be positive, one per defect")
            tot.flags.writeable = False
            object.__setattr__(self, "totals", tot)

    @property
    def n_items(self) -> int:
        return self.values.shape[0]

    @property
    def n_defects(self) -> int:
        return self.values.shape[1]


def normalize_table(table: DefectTable, defect_subset: Sequence[str] | None = None) -> PercentMatrix:
    """Divide every defect column by its collection-wide total."""
    names = list(table.defect_names if defect_subset is None else defect_subset)
    counts = np.column_stack([table.column(n) for n in names]).astype(np.float64)
    totals = counts.sum(axis=0)
    zero = [n for n, t in zip(names, totals) if t <= 0]
    if zero:
        raise DataError(f"defect column(s) with zero total: {', '.join(zero)}")
    return PercentMatrix(table.item_ids, names, counts / totals, totals.astype(np.int64))


def lattice_floor(matrix: PercentMatrix, targets) -> float:
    """Lower bound on the split objective from integer pixel counts.

    With column totals ``T_j`` every achievable share is ``n / T_j`` for an
    integer ``n``, so defect ``j`` misses ``b_j`` by at least the distance
    from ``b_j T_j`` to the nearest integer, divided by ``T_j``.
    """
    if matrix.totals is None:
        return 0.0
    b = _targets(targets, matrix.n_defects)
    T = matrix.totals.astype(np.float64)
    bt = b * T
    lo = np.clip(np.floor(bt), 0, T)
    hi = np.clip(np.ceil(bt), 0, T)
    miss = np.minimum(np.abs(lo / T - b), np.abs(hi / T - b))
    return float(np.dot(miss, miss))


def as_percent_matrix(matrix) -> PercentMatrix:
    if isinstance(matrix, PercentMatrix):
        return matrix
    vals = np.asarray(matrix, dtype=np.float64)
    if vals.ndim != 2:
        raise DataError("percent matrix must be 2-D")
    return PercentMatrix(
        [str(i + 1) for i in range(vals.shape[0])],
        [f"defect{j + 1}" for j in range(vals.shape[1])],
        vals,
    )


def achieved_shares(values: np.ndarray, selection) -> np.ndarray:
    """Summed shares of the selected rows, added in row order."""
    idx = np.flatnonzero(np.asarray(selection))
    return np.asarray(values)[idx].sum(axis=0) if idx.size else np.zeros(values.shape[1])


def _objective(shares: np.ndarray, targets: np.ndarray) -> float:
    d = shares - targets
    return float(np.dot(d, d))


@dataclass(frozen=True, eq=False)
class SplitResult:
    matrix: PercentMatrix
    selection: np.ndarray
    targets: np.ndarray
    achieved: np.ndarray
    objective: float
    method: str
    stats: dict = field(default_factory=dict)

    @property
    def n_subset(self) -> int:
        return int(self.selection.sum())

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.selection)

    @property
    def item_ids(self) -> list[str]:
        return [self.matrix.item_ids[i] for i in self.indices]

    @property
    def lower_bound(self) -> float | None:
        return self.stats.get("lower_bound")

    @property
    def certified_gap(self) -> float | None:
        return self.stats.get("gap")


def _make_result(matrix: PercentMatrix, selection, targets, method, stats) -> SplitResult:
    sel = np.asarray(selection).astype(np.int8)
    sel.flags.writeable = False
    shares = achieved_shares(matrix.values, sel)
    return SplitResult(matrix, sel, np.asarray(targets, dtype=np.float64), shares,
                       _objective(shares, targets), method, dict(stats))


def _targets(targets, n_defects: int) -> np.ndarray:
    b = np.asarray(targets, dtype=np.float64)
    if b.ndim == 0:
        b = np.full(n_defects, float(b))
    if b.shape != (n_defects,):
        raise DataError(f"need {n_defects} targets, got {b.size}")
    return b


def complement(result: SplitResult) -> SplitResult:
    """The unselected items, with targets ``1 - b``."""
    stats = dict(result.stats)
    return _make_result(result.matrix, 1 - result.selection, 1.0 - result.targets,
                        result.method, stats)


# --------------------------------------------------------------------------
# empirical permutation sampling


class NoSuccessfulSplit(DataError):
    def __init__(self, message, stats):
        super().__init__(message)
        self.stats = stats


def _chunk_rng(seed: int, chunk: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) & 0xFFFF_FFFF_FFFF_FFFF, spawn_key=(chunk,))
    return np.random.Generator(np.random.Philox(ss))


def sample_prefixes(n_items: int, n_subset: int, samples: int, seed: int) -> np.ndarray:
    """First ``n_subset`` entries of ``samples`` random permutations.

    Permutations are drawn in fixed blocks of 4096, block ``c`` from its own
    Philox stream keyed by ``(seed, c)``, so any block can be produced
    independently of the others.
    """
    out = np.empty((samples, n_subset), dtype=np.int64)
    for c, start in enumerate(range(0, samples, _CHUNK)):
        size = min(_CHUNK, samples - start)
        out[start : start + size] = _prefix_block(n_items, n_subset, size, seed, c)
    return out


def empirical_split(
    matrix,
    target: float = 0.2,
    n_subset: int = 20,
    samples: int = 10_000,
    tolerance: float = DEFAULT_TOLERANCE,
    primary_defect: str | int = DEFAULT_PRIMARY,
    seed: int = 0,
    keep_successes: bool = False,
) -> SplitResult:
    """Random-permutation search for a subset hitting ``target`` on one defect.

    A permutation's first ``n_subset`` items succeed when their share of
    ``primary_defect`` is within ``tolerance`` of ``target``. Among the
    successes the one with the smallest summed absolute deviation over all
    defects is returned (earliest sample wins ties). ``stats['successes']``
    holds the number of successful samples.
    """
    matrix = as_percent_matrix(matrix)
    m, J = matrix.values.shape
    if not 1 <= n_subset <= m:
        raise DataError(f"n_subset must lie in 1..{m}")
    if samples < 1:
        raise DataError("samples must be >= 1")
    if isinstance(primary_defect, str):
        if primary_defect not in matrix.defect_names:
            raise DataError(f"unknown primary defect {primary_defect!r}")
        primary = matrix.defect_names.index(primary_defect)
    else:
        primary = int(primary_defect)
    t0 = time.perf_counter()
    successes = 0
    best_score, best_set = np.inf, None
    success_sets = []
    for start in range(0, samples, _CHUNK):
        size = min(_CHUNK, samples - start)
        c = start // _CHUNK
        prefix = _prefix_block(m, n_subset, size, seed, c)
        prefix.sort(axis=1)
        shares = matrix.values[prefix].sum(axis=1)
        ok = np.abs(shares[:, primary] - target) <= tolerance
        successes += int(ok.sum())
        if not ok.any():
            continue
        if keep_successes:
            success_sets.extend(frozenset(r.tolist()) for r in prefix[ok])
        score = np.abs(shares - target).sum(axis=1)
        score[~ok] = np.inf
        k = int(np.argmin(score))
        if score[k] < best_score:
            best_score, best_set = float(score[k]), prefix[k].copy()
    stats = {
        "samples": samples,
        "successes": successes,
        "success_rate": successes / samples,
        "tolerance": tolerance,
        "primary_defect": matrix.defect_names[primary],
        "seed": seed,
        "wall_time": time.perf_counter() - t0,
    }
    if keep_successes:
        stats["success_sets"] = success_sets
    if best_set is None:
        raise NoSuccessfulSplit(
            f"no successful sequence in {samples} samples "
            f"(target {target}, tolerance {tolerance}, n={n_subset})",
            stats,
        )
    sel = np.zeros(m, dtype=np.int8)
    sel[best_set] = 1
    return _make_result(matrix, sel, _targets(target, J), "empirical", stats)


def _prefix_block(n_items: int, n_subset: int, size: int, seed: int, block: int) -> np.ndarray:
    perms = _chunk_rng(seed, block).permuted(np.tile(np.arange(n_items), (size, 1)), axis=1)
    return np.ascontiguousarray(perms[:, :n_subset])


def is_successful(matrix, subset, target: float, tolerance: float, primary: int) -> bool:
    """Success test for one unordered subset of row indices."""
    values = as_percent_matrix(matrix).values
    idx = np.sort(np.asarray(list(subset), dtype=np.int64))
    share = values[idx].sum(axis=0)[primary]
    return bool(abs(share - target) <= tolerance)


# --------------------------------------------------------------------------
# exact branch and bound


class _Relaxation:
    """Continuous relaxation over ``{lo <= x <= hi, sum x = N}``.

    The image of that polytope under ``x -> C^T x - b`` is searched for its
    minimum-norm point with Wolfe's algorithm; the linear minimisation
    oracle just picks the ``k`` free items with the smallest scores. Any
    oracle call also certifies a lower bound: the whole image lies in the
    half-space ``{q : w.q >= w.q*}``, whose squared distance from the
    origin bounds the relaxation from below.
    """

    def __init__(self, C: np.ndarray, b: np.ndarray, N: int):
        self.C = C
        self.b = b
        self.N = N

    def vertex(self, lo, free, k, direction):
        scores = self.C[free] @ direction
        order = np.argsort(scores, kind="stable")[:k]
        x = lo.astype(np.int8).copy()
        x[free[order]] = 1
        return x, achieved_shares(self.C, x) - self.b

    def solve(self, lo, hi, cutoff=np.inf, tol=1e-13, max_iter=500):
        """Return ``(lower_bound, x_fractional, value)`` or ``None`` if the
        node is infeasible. Stops early once the bound reaches ``cutoff``."""
        free = np.flatnonzero(hi > lo)
        k = self.N - int(lo.sum())
        if k < 0 or k > free.size:
            return None
        x0, q0 = self.vertex(lo, free, k, np.zeros(self.C.shape[1]))
        if k == 0 or k == free.size:
            val = float(q0 @ q0)
            return val, x0.astype(np.float64), val
        pts, xs, lam = [q0], [x0], np.array([1.0])
        z = q0.copy()
        lb = 0.0
        zz_prev = np.inf
        for _ in range(max_iter):
            zz = float(z @ z)
            if zz >= zz_prev:
                break
            zz_prev = zz
            xv, qv = self.vertex(lo, free, k, z)
            c = float(z @ qv)
            if zz > 0:
                lb = max(lb, (max(c, 0.0) ** 2) / zz)
            else:
                lb = 0.0
                break
            if lb >= cutoff or zz - c <= tol * max(zz, 1e-300) or zz <= 1e-30:
                break
            if any(np.array_equal(xv, xo) for xo in xs):
                break
            pts.append(qv)
            xs.append(xv)
            lam = np.append(lam, 0.0)
            # minor cycle: move to the affine minimiser while it leaves the corral
            for _minor in range(len(pts) + 2):
                S = np.array(pts)
                mu = _affine_min_norm(S)
                if np.all(mu > 1e-15):
                    lam = mu
                    break
                neg = mu <= 1e-15
                with np.errstate(divide="ignore", invalid="ignore"):
                    ratios = np.where(neg, lam / (lam - mu), np.inf)
                theta = float(np.clip(np.min(ratios), 0.0, 1.0))
                lam = (1 - theta) * lam + theta * mu
                keep = lam > 1e-15
                if keep.all():
                    keep[int(np.argmin(lam))] = False
                pts = [p for p, kp in zip(pts, keep) if kp]
                xs = [x for x, kp in zip(xs, keep) if kp]
                lam = lam[keep]
                lam = lam / lam.sum()
            z = np.array(pts).T @ lam
        xfrac = np.array(xs, dtype=np.float64).T @ lam
        return min(lb, float(z @ z)), xfrac, float(z @ z)


def _affine_min_norm(S: np.ndarray) -> np.ndarray:
    k = S.shape[0]
    K = np.zeros((k + 1, k + 1))
    K[:k, :k] = S @ S.T
    K[:k, k] = 1.0
    K[k, :k] = 1.0
    rhs = np.zeros(k + 1)
    rhs[k] = 1.0
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:k]


def _swap_sets(C, idx, k):
    combos = np.array(list(itertools.combinations(idx, k)), dtype=np.int64).reshape(-1, k)
    return combos, C[combos].sum(axis=1)


def _best_kswap(C, r, inside, outside, k, max_pool=1_500_000):
    """Best exchange of ``k`` selected for ``k`` unselected items.

    Minimises ``||r - sum C[out] + sum C[in]||`` by a nearest-neighbour query
    of the shifted outgoing sums against a KD-tree of incoming sums.
    """
    if inside.size < k or outside.size < k:
        return None
    if math.comb(int(inside.size), k) > max_pool or math.comb(int(outside.size), k) > max_pool:
        return None
    out_sets, out_sums = _swap_sets(C, inside, k)
    in_sets, in_sums = _swap_sets(C, outside, k)
    dist, pos = cKDTree(in_sums).query(out_sums - r)
    best = int(np.argmin(dist))
    return float(dist[best]) ** 2, out_sets[best], in_sets[pos[best]]


def _descend(C, b, x, movable, max_k, stop_at):
    best = _objective(achieved_shares(C, x), b)
    while best > stop_at:
        r = achieved_shares(C, x) - b
        inside = np.flatnonzero((x == 1) & movable)
        outside = np.flatnonzero((x == 0) & movable)
        moved = False
        for k in range(1, max_k + 1):
            cand = _best_kswap(C, r, inside, outside, k)
            if cand is None:
                continue
            trial = x.copy()
            trial[cand[1]] = 0
            trial[cand[2]] = 1
            val = _objective(achieved_shares(C, trial), b)
            if val < best:
                x, best, moved = trial, val, True
                break
        if not moved:
            break
    return x, best


def _local_search(C, b, x, movable, stop_at=0.0, max_k=2, restarts=0, seed=0, patience=None):
    """Swap-neighbourhood descent with optional seeded random restarts.

    Each restart kicks the best selection with a random 3-exchange and
    descends again with exchanges of up to ``max_k`` items.
    """
    x, best = _descend(C, b, x, movable, max_k, stop_at)
    rng = np.random.Generator(np.random.Philox(seed))
    stale = 0
    for _ in range(restarts):
        if best <= stop_at or (patience is not None and stale >= patience):
            break
        inside = np.flatnonzero((x == 1) & movable)
        outside = np.flatnonzero((x == 0) & movable)
        k = min(3, inside.size, outside.size)
        if k == 0:
            break
        trial = x.copy()
        trial[rng.choice(inside, k, replace=False)] = 0
        trial[rng.choice(outside, k, replace=False)] = 1
        trial, val = _descend(C, b, trial, movable, max_k, stop_at)
        if val < best:
            x, best, stale = trial, val, 0
        else:
            stale += 1
    return x, best


def _round(xfrac, lo, hi, N):
    free = np.flatnonzero(hi > lo)
    k = N - int(lo.sum())
    x = lo.astype(np.int8).copy()
    order = np.argsort(-xfrac[free], kind="stable")[:k]
    x[free[order]] = 1
    return x


def miqp_split(
    matrix,
    targets=0.2,
    n_subset: int = 20,
    gap: float = DEFAULT_GAP,
    node_limit: int = DEFAULT_NODE_LIMIT,
    time_limit: float | None = None,
    local_search: bool = True,
    restarts: int = 500,
    patience: int = 100,
) -> SplitResult:
    """Exact cardinality-constrained split by branch and bound.

    Minimises ``||sum_i c_ij x_i - b_j||^2`` over binary ``x`` with
    ``sum(x) = n_subset``. Nodes are explored depth first; of two children
    the one with the smaller relaxation bound is visited first. Branching is
    on the most fractional item. Nodes whose bound is within ``gap`` of the
    incumbent are pruned, so on normal termination
    ``stats['gap'] <= gap`` certifies the objective.

    If ``node_limit`` or ``time_limit`` is hit, the best incumbent is
    returned with ``stats['status'] == 'limit'`` and the gap that could be
    certified so far.

    Every node bound is also raised to the count-lattice floor when the
    matrix carries integer column totals (see ``lattice_floor``).

    The root incumbent comes from rounding the relaxation followed by a
    swap local search with up to ``restarts`` seeded random kicks, giving up
    after ``patience`` kicks without improvement; it stops as soon as the
    incumbent is within ``gap`` of the root bound.
    """
    matrix = as_percent_matrix(matrix)
    C = matrix.values
    m, J = C.shape
    b = _targets(targets, J)
    if not 0 <= n_subset <= m:
        raise DataError(f"infeasible: n_subset={n_subset} with {m} items")
    if gap < 0:
        raise DataError("gap must be non-negative")
    t0 = time.perf_counter()
    relax = _Relaxation(C, b, n_subset)
    floor = lattice_floor(matrix, b)

    best_x, best_val = None, np.inf

    def offer(x):
        nonlocal best_x, best_val
        val = _objective(achieved_shares(C, x), b)
        if val < best_val or (val == best_val and tuple(x) < tuple(best_x)):
            best_x, best_val = x.copy(), val
            return True
        return False

    lo = np.zeros(m, dtype=np.int8)
    hi = np.ones(m, dtype=np.int8)
    root = relax.solve(lo, hi)
    root_lb, root_x, _ = root
    root_lb = max(root_lb, floor)
    x0 = _round(root_x, lo, hi, n_subset)
    offer(x0)
    if local_search:
        offer(_local_search(C, b, x0, np.ones(m, bool), stop_at=root_lb + gap,
                            max_k=3, restarts=restarts, patience=patience)[0])

    stack = [(root_lb, lo, hi, root_x)]
    pruned_lb = np.inf
    nodes = 1
    status = "optimal"
    while stack:
        lb, lo, hi, xf = stack.pop()
        if lb >= best_val - gap:
            pruned_lb = min(pruned_lb, lb)
            continue
        if nodes >= node_limit or (time_limit is not None and time.perf_counter() - t0 > time_limit):
            stack.append((lb, lo, hi, xf))
            status = "limit"
            break
        free = np.flatnonzero(hi > lo)
        if free.size == 0:
            offer(lo)
            continue
        xr = _round(xf, lo, hi, n_subset)
        if offer(xr) and local_search:
            offer(_local_search(C, b, xr, hi > lo)[0])
        if lb >= best_val - gap:
            pruned_lb = min(pruned_lb, lb)
            continue
        frac = np.abs(xf[free] - 0.5)
        j = int(free[int(np.argmin(frac))])
        children = []
        for v in (0, 1):
            clo, chi = lo.copy(), hi.copy()
            clo[j] = chi[j] = v
            nodes += 1
            sol = relax.solve(clo, chi, cutoff=best_val - gap)
            if sol is None:
                continue
            clb, cx, _ = sol
            clb = max(clb, floor)
            if clb >= best_val - gap:
                pruned_lb = min(pruned_lb, clb)
                continue
            children.append((clb, clo, chi, cx))
        # push the worse child first so the better one is explored next
        children.sort(key=lambda c: -c[0])
        stack.extend(children)

    open_lb = min((n[0] for n in stack), default=np.inf)
    lower = min(pruned_lb, open_lb, best_val)
    stats = {
        "nodes": nodes,
        "status": status,
        "lower_bound": float(lower),
        "root_bound": float(root_lb),
        "lattice_floor": floor,
        "gap": float(max(best_val - lower, 0.0)),
        "gap_tolerance": gap,
        "wall_time": time.perf_counter() - t0,
    }
    return _make_result(matrix, best_x, b, "branch-and-bound", stats)


# --------------------------------------------------------------------------
# output files


def _subset_csv(table: DefectTable, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["item_id", *table.defect_names, *table.extra])
    for i in rows:
        w.writerow([table.item_ids[i], *map(int, table.counts[i]),
                    *(int(v[i]) for v in table.extra.values())])
    return buf.getvalue()


def format_report(result: SplitResult, include_timing: bool = False) -> str:
    other = complement(result)
    names = result.matrix.defect_names
    lines = [f"method: {result.method}"]
    st = result.stats
    if result.method == "empirical":
        lines += [
            f"samples: {st['samples']}",
            f"successful sequences: {st['successes']}",
            f"primary defect: {st['primary_defect']}",
            f"tolerance: {st['tolerance']!r}",
        ]
    else:
        lines += [
            f"status: {st['status']}",
            f"nodes: {st['nodes']}",
            f"lower bound: {st['lower_bound']!r}",
            f"certified gap: {st['gap']!r}",
        ]
    if include_timing:
        lines.append(f"wall time (s): {st['wall_time']:.4f}")
    lines.append(f"objective: {result.objective!r}")
    for label, r in (("subset 1", result), ("subset 2", other)):
        lines.append(f"{label}: {r.n_subset} items")
        lines.append("  targets: " + ", ".join(f"{n}={t:.4f}" for n, t in zip(names, r.targets)))
        lines.append("  achieved: " + ", ".join(f"{n}={a:.4%}" for n, a in zip(names, r.achieved)))
        lines.append("  sequence: " + " ".join(str(i + 1) for i in r.indices))
        lines.append("  item ids: " + " ".join(r.item_ids))
    return "\n".join(lines) + "\n"


def write_split_outputs(result: SplitResult, table: DefectTable, out_dir, prefix: str,
                        include_timing: bool = False) -> list[Path]:
    """Write ``<prefix>_split_results_subset{1,2}.csv`` and
    ``<prefix>_split_results.txt`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if tuple(table.item_ids) != result.matrix.item_ids:
        raise DataError("table rows do not match the split's items")
    paths = []
    for k, rows in ((1, result.indices), (2, np.flatnonzero(result.selection == 0))):
        p = out / f"{prefix}_split_results_subset{k}.csv"
        p.write_text(_subset_csv(table, rows), encoding="utf-8", newline="\n")
        paths.append(p)
    p = out / f"{prefix}_split_results.txt"
    p.write_text(format_report(result, include_timing), encoding="utf-8", newline="\n")
    paths.append(p)
    return paths
