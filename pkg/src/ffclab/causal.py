"""Causal analysis over binary contingency tables: G^2 conditional-independence
testing, constraint-based graph discovery, backdoor-adjusted effect estimation
with an exact direct/indirect decomposition, a random-common-cause robustness
check, and rank-correlation trend analysis.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .errors import (
    IdentificationAmbiguousError,
    InvalidArgumentError,
    UnsupportedStratumError,
)
from .numkit import Rng, chi2_sf
from .scmdata import Dataset

_SMOOTH = 0.5  # pseudo-count for empty cells inside a populated stratum


@dataclass
class ContingencyTable:
    """Joint counts over named binary variables (flat array, bit i = variable i)."""

    variables: list[str]
    counts: np.ndarray
    n: int

    @classmethod
    def from_dataset(cls, data: Dataset, variables: list[str]) -> "ContingencyTable":
        return cls.from_columns({v: data.column(v) for v in variables})

    @classmethod
    def from_columns(cls, columns: dict[str, np.ndarray]) -> "ContingencyTable":
        variables = list(columns)
        if not variables:
            raise InvalidArgumentError("ContingencyTable: need at least one variable")
        if len(variables) > 24:
            raise InvalidArgumentError("ContingencyTable: too many variables")
        n = len(next(iter(columns.values())))
        if n < 1:
            raise InvalidArgumentError("ContingencyTable: empty data")
        idx = np.zeros(n, dtype=np.int64)
        for bit, v in enumerate(variables):
            col = np.asarray(columns[v])
            if not np.all((col == 0) | (col == 1)):
                raise InvalidArgumentError(f"ContingencyTable: column {v!r} must be binary")
            idx |= col.astype(np.int64) << bit
        counts = np.bincount(idx, minlength=2 ** len(variables)).astype(np.float64)
        return cls(variables=variables, counts=counts, n=n)

    def _require(self, names) -> None:
        for v in names:
            if v not in self.variables:
                raise InvalidArgumentError(f"ContingencyTable: unknown variable {v!r}")

    def marginal(self, variables: list[str]) -> np.ndarray:
        """Counts reshaped to one axis per requested variable, in request order."""
        self._require(variables)
        cube = self.counts.reshape((2,) * len(self.variables), order="F")
        keep = [self.variables.index(v) for v in variables]
        drop = tuple(i for i in range(len(self.variables)) if i not in keep)
        reduced = cube.sum(axis=drop) if drop else cube
        # reduced axes follow self.variables order; permute into request order
        kept_order = [v for v in self.variables if v in variables]
        perm = [kept_order.index(v) for v in variables]
        return np.transpose(reduced, perm)

    def prob(self, assignment: dict[str, int]) -> float:
        m = self.marginal(list(assignment))
        return float(m[tuple(assignment[v] for v in assignment)] / self.n)

    def cond_prob(self, target: dict[str, int], given: dict[str, int]) -> float:
        """P(target | given) with an add-0.5 correction for empty cells.

        The correction applies only when the conditioning stratum is populated
        but the requested cell is empty; an empty stratum is an error.
        """
        m = self.marginal(list(target) + list(given))
        sel = m[(slice(None),) * len(target) + tuple(given[v] for v in given)]
        n_stratum = float(sel.sum())
        if n_stratum == 0:
            raise UnsupportedStratumError(f"empty conditioning stratum {given}")
        cell = float(sel[tuple(target[v] for v in target)])
        if cell == 0.0:
            return _SMOOTH / (n_stratum + 1.0)
        return cell / n_stratum


def estimate_joint(data: Dataset, variables: list[str]) -> ContingencyTable:
    """Exact joint counts over the named binary columns of a dataset."""
    return ContingencyTable.from_dataset(data, variables)


@dataclass
class CITestResult:
    g2: float
    df: int
    p_value: float
    independent: bool


def ci_test_g2(
    table: ContingencyTable, a: str, b: str, conditioning: tuple[str, ...] = (), alpha: float = 0.05
) -> CITestResult:
    """Likelihood-ratio (G^2) test of a _||_ b given a conditioning set.

    G^2 = 2 sum O ln(O/E), accumulated over nonempty conditioning strata, with
    one degree of freedom per nonempty stratum for binary a and b.
    """
    if a == b or a in conditioning or b in conditioning:
        raise InvalidArgumentError("ci_test_g2: variables must be distinct from the conditioning set")
    m = table.marginal([a, b] + list(conditioning))
    cells = m.reshape(2, 2, -1)
    n_z = cells.sum(axis=(0, 1))
    nonempty = n_z > 0
    if not nonempty.any():
        raise UnsupportedStratumError("ci_test_g2: all conditioning strata empty")

    g2 = 0.0
    for z in np.flatnonzero(nonempty):
        obs = cells[:, :, z]
        row = obs.sum(axis=1, keepdims=True)
        col = obs.sum(axis=0, keepdims=True)
        expected = row * col / n_z[z]
        mask = obs > 0
        g2 += 2.0 * float(np.sum(obs[mask] * np.log(obs[mask] / expected[mask])))
    df = max(1, int(nonempty.sum()))
    p = chi2_sf(max(g2, 0.0), df)
    return CITestResult(g2=float(g2), df=df, p_value=p, independent=p > alpha)


@dataclass
class CausalGraph:
    """CPDAG: directed edges, leftover undirected edges, and separating sets."""

    nodes: list[str]
    directed: set[tuple[str, str]] = field(default_factory=set)
    undirected: set[tuple[str, str]] = field(default_factory=set)
    sepsets: dict[tuple[str, str], frozenset[str]] = field(default_factory=dict)

    @staticmethod
    def _key(u: str, v: str) -> tuple[str, str]:
        return (u, v) if u <= v else (v, u)

    def has_undirected(self, u: str, v: str) -> bool:
        return self._key(u, v) in self.undirected

    def adjacent(self, u: str, v: str) -> bool:
        return self.has_undirected(u, v) or (u, v) in self.directed or (v, u) in self.directed

    def neighbors(self, v: str) -> list[str]:
        return [u for u in self.nodes if u != v and self.adjacent(u, v)]

    def parents(self, v: str) -> list[str]:
        return sorted(u for (u, w) in self.directed if w == v)

    def is_fully_directed(self) -> bool:
        return not self.undirected

    def has_directed_path(self, src: str, dst: str) -> bool:
        stack, seen = [src], set()
        while stack:
            cur = stack.pop()
            if cur == dst:
                return True
            if cur in seen:
                continue
            seen.add(cur)
            stack.extend(w for (u, w) in self.directed if u == cur)
        return False

    def orient(self, u: str, v: str) -> bool:
        """Turn the undirected edge u - v into u -> v unless it would create a
        cycle or contradict an existing orientation. Returns True on success."""
        if not self.has_undirected(u, v):
            return False
        if self.has_directed_path(v, u):
            return False
        self.undirected.discard(self._key(u, v))
        self.directed.add((u, v))
        return True

    def edge_summary(self) -> dict:
        return {
            "directed": sorted(list(e) for e in self.directed),
            "undirected": sorted(list(e) for e in self.undirected),
        }


def pc_discover(
    data: Dataset,
    variables: list[str],
    alpha: float = 0.05,
    max_cond_size: int = 3,
) -> CausalGraph:
    """Constraint-based discovery: level-wise skeleton pruning with G^2 tests,
    collider orientation from the recorded separating sets, then the three
    standard propagation rules, applied to a fixpoint.

    Neighborhoods are frozen at the start of each level so the output does not
    depend on within-level edge-removal order.
    """
    if len(variables) < 2:
        raise InvalidArgumentError("pc_discover: need at least two variables")
    table = ContingencyTable.from_dataset(data, variables)
    nodes = list(variables)
    graph = CausalGraph(nodes=nodes)
    graph.undirected = {CausalGraph._key(u, v) for u, v in itertools.combinations(nodes, 2)}

    level = 0
    while level <= max_cond_size:
        snapshot = {v: set(graph.neighbors(v)) for v in nodes}
        testable = any(
            graph.has_undirected(u, v)
            and max(len(snapshot[u] - {v}), len(snapshot[v] - {u})) >= level
            for u, v in itertools.combinations(nodes, 2)
        )
        if not testable:
            break
        for u, v in sorted(itertools.combinations(nodes, 2)):
            if not graph.has_undirected(u, v):
                continue
            removed = False
            for side_anchor in (u, v):
                other = v if side_anchor == u else u
                pool = sorted(snapshot[side_anchor] - {other})
                if len(pool) < level:
                    continue
                for cond in itertools.combinations(pool, level):
                    res = ci_test_g2(table, u, v, cond, alpha)
                    if res.independent:
                        graph.undirected.discard(CausalGraph._key(u, v))
                        graph.sepsets[CausalGraph._key(u, v)] = frozenset(cond)
                        removed = True
                        break
                if removed:
                    break
        level += 1

    _orient_colliders(graph)
    _apply_meek_rules(graph)
    return graph


def _orient_colliders(graph: CausalGraph) -> None:
    for b in graph.nodes:
        for a, c in sorted(itertools.combinations(sorted(graph.neighbors(b)), 2)):
            if graph.adjacent(a, c):
                continue
            sep = graph.sepsets.get(CausalGraph._key(a, c))
            if sep is None or b in sep:
                continue
            graph.orient(a, b)
            graph.orient(c, b)


def _apply_meek_rules(graph: CausalGraph) -> None:
    changed = True
    while changed:
        changed = False
        for a, b in sorted(graph.undirected):
            for x, y in ((a, b), (b, a)):
                # R1: w -> x, x - y, w not adjacent to y  =>  x -> y
                if any((w, x) in graph.directed and not graph.adjacent(w, y) for w in graph.nodes):
                    if graph.orient(x, y):
                        changed = True
                        break
                # R2: x -> w -> y with x - y  =>  x -> y
                if any((x, w) in graph.directed and (w, y) in graph.directed for w in graph.nodes):
                    if graph.orient(x, y):
                        changed = True
                        break
                # R3: x - w1, x - w2, w1 -> y, w2 -> y, w1 not adjacent to w2  =>  x -> y
                spokes = [
                    w
                    for w in graph.nodes
                    if w not in (x, y) and graph.has_undirected(x, w) and (w, y) in graph.directed
                ]
                if any(
                    not graph.adjacent(w1, w2)
                    for w1, w2 in itertools.combinations(sorted(spokes), 2)
                ):
                    if graph.orient(x, y):
                        changed = True
                        break
            if changed:
                break


def backdoor_set(graph: CausalGraph, treatment: str, outcome: str) -> list[str]:
    """Parents of the treatment: always a valid backdoor set in a DAG."""
    if treatment == outcome:
        raise InvalidArgumentError("backdoor_set: treatment equals outcome")
    if not graph.is_fully_directed():
        raise IdentificationAmbiguousError(
            "backdoor_set: graph has undirected edges; orient them or supply an adjustment set"
        )
    return graph.parents(treatment)


@dataclass
class TotalEffectEstimate:
    value: float
    unsupported_mass: float
    n: int


def _stratified_cells(
    table: ContingencyTable, treatment: str, outcome: str, adjustment: tuple[str, ...], mediator: str | None
):
    """Counts arranged as (arm, outcome[, mediator], stratum) with arm support masks."""
    variables = [treatment, outcome] + ([mediator] if mediator else []) + list(adjustment)
    m = table.marginal(variables)
    shape = (2, 2, 2, -1) if mediator else (2, 2, -1)
    cells = m.reshape(shape)
    n_z = cells.sum(axis=tuple(range(len(shape) - 1)))
    n_arm = cells.sum(axis=tuple(range(1, len(shape) - 1)))  # (2, strata)
    supported = (n_arm[0] > 0) & (n_arm[1] > 0)
    return cells, n_z, n_arm, supported


def total_effect(
    table: ContingencyTable, treatment: str, outcome: str, adjustment: tuple[str, ...] = ()
) -> TotalEffectEstimate:
    """Backdoor-adjusted treatment contrast, arm 0 minus arm 1.

    Strata of the adjustment set missing either arm are dropped; the remaining
    strata are reweighted to sum to one and the dropped probability mass is
    reported so the coverage loss stays visible.
    """
    cells, n_z, n_arm, supported = _stratified_cells(table, treatment, outcome, tuple(adjustment), None)
    if not supported.any():
        raise UnsupportedStratumError(
            f"total_effect: no stratum of {tuple(adjustment)} contains both arms of {treatment!r}"
        )
    n_supported = n_z[supported].sum()
    w = n_z[supported] / n_supported
    e = cells[:, 1, :] / np.where(n_arm > 0, n_arm, 1.0)  # E[Y | arm, z]
    value = float(np.sum(w * (e[0, supported] - e[1, supported])))
    return TotalEffectEstimate(
        value=value,
        unsupported_mass=float(1.0 - n_supported / table.n),
        n=table.n,
    )


@dataclass
class EffectEstimate:
    """Treatment contrasts from one table: total, direct, indirect, controlled."""

    treatment: str
    outcome: str
    mediator: str | None
    te: float
    nde: float | None
    nie: float | None
    cde_at_m: dict[int, float] | None
    adjustment: list[str]
    n: int
    unsupported_mass: float

    def to_dict(self) -> dict:
        return {
            "treatment": self.treatment,
            "outcome": self.outcome,
            "mediator": self.mediator,
            "te": self.te,
            "nde": self.nde,
            "nie": self.nie,
            "cde_at_m": None if self.cde_at_m is None else {str(k): v for k, v in self.cde_at_m.items()},
            "adjustment": list(self.adjustment),
            "n": self.n,
            "unsupported_mass": self.unsupported_mass,
        }


def direct_indirect_effects(
    table: ContingencyTable,
    treatment: str,
    outcome: str,
    mediator: str,
    adjustment: tuple[str, ...] = (),
) -> EffectEstimate:
    """Mediation decomposition with the mediator law taken at arm 0.

    Within each supported adjustment stratum:

        nde_z = sum_m P(m|0,z) * (E[Y|0,m,z] - E[Y|1,m,z])
        nie_z = sum_m E[Y|1,m,z] * (P(m|0,z) - P(m|1,z))

    which telescopes to E[Y|0,z] - E[Y|1,z], so te = nde + nie holds to
    rounding for any table.  Outcome means over empty (arm, m, z) cells are
    always multiplied by a zero or cancelling coefficient in nde/nie; they
    enter only the reported per-m controlled contrast, where the add-0.5
    placeholder from the table applies.  cde_at_m is the fixed-m contrast
    E[Y|0,m,.] - E[Y|1,m,.] averaged over supported strata.
    """
    cells, n_z, n_arm, supported = _stratified_cells(table, treatment, outcome, tuple(adjustment), mediator)
    if not supported.any():
        raise UnsupportedStratumError(
            f"direct_indirect_effects: no stratum of {tuple(adjustment)} contains both arms"
        )
    n_supported = n_z[supported].sum()
    w = n_z[supported] / n_supported

    n_am = cells.sum(axis=1)  # (arm, m, strata)
    p_m = n_am / np.where(n_arm[:, None, :] > 0, n_arm[:, None, :], 1.0)  # P(m | arm, z)
    ey_raw = cells[:, 1, :, :]  # successes per (arm, m, z)
    ey = np.where(n_am > 0, ey_raw / np.where(n_am > 0, n_am, 1.0), _SMOOTH / (n_am + 1.0))

    nde_z = np.sum(p_m[0] * (ey[0] - ey[1]), axis=0)
    nie_z = np.sum(ey[1] * (p_m[0] - p_m[1]), axis=0)
    te_z = np.sum(p_m[0] * ey[0] - p_m[1] * ey[1], axis=0)

    nde = float(np.sum(w * nde_z[supported]))
    nie = float(np.sum(w * nie_z[supported]))
    te = float(np.sum(w * te_z[supported]))
    cde = {m: float(np.sum(w * (ey[0, m, supported] - ey[1, m, supported]))) for m in (0, 1)}

    return EffectEstimate(
        treatment=treatment,
        outcome=outcome,
        mediator=mediator,
        te=te,
        nde=nde,
        nie=nie,
        cde_at_m=cde,
        adjustment=list(adjustment),
        n=table.n,
        unsupported_mass=float(1.0 - n_supported / table.n),
    )


def estimate_effect(
    data: Dataset,
    treatment: str,
    outcome: str,
    mediator: str | None = None,
    adjustment: tuple[str, ...] = (),
) -> EffectEstimate:
    """Build the joint table once and estimate te (and nde/nie when a mediator is given)."""
    variables = [treatment, outcome] + ([mediator] if mediator else []) + list(adjustment)
    table = ContingencyTable.from_dataset(data, variables)
    if mediator is not None:
        return direct_indirect_effects(table, treatment, outcome, mediator, tuple(adjustment))
    est = total_effect(table, treatment, outcome, tuple(adjustment))
    return EffectEstimate(
        treatment=treatment,
        outcome=outcome,
        mediator=None,
        te=est.value,
        nde=None,
        nie=None,
        cde_at_m=None,
        adjustment=list(adjustment),
        n=est.n,
        unsupported_mass=est.unsupported_mass,
    )


@dataclass
class RefutationResult:
    """Effect stability under synthetic independent confounders."""

    old: float
    new: float
    estimates: list[float]
    p_value: float
    repetitions: int

    def to_dict(self) -> dict:
        return {
            "old": self.old,
            "new": self.new,
            "p_value": self.p_value,
            "repetitions": self.repetitions,
        }


def refute_random_common_cause(
    data: Dataset,
    treatment: str,
    outcome: str,
    adjustment: tuple[str, ...] = (),
    repetitions: int = 100,
    seed: int = 0,
    stream_offset: int = 0,
) -> RefutationResult:
    """Re-estimate the total effect with a fresh coin-flip column added to the
    adjustment set, once per repetition.

    The p-value is the two-sided midrank placement of the original estimate
    within the repetition estimates: 2 * min(r, R+1-r) / (R+1), where r is the
    (tie-averaged) rank of the original.  A centered original gives p near 1;
    an original outside the repetition range gives 1/(R+1).
    """
    if repetitions < 20:
        raise InvalidArgumentError("refute_random_common_cause: need at least 20 repetitions")
    base_cols = {v: data.column(v) for v in [treatment, outcome, *adjustment]}
    old = total_effect(
        ContingencyTable.from_columns(base_cols), treatment, outcome, tuple(adjustment)
    ).value

    estimates = []
    for rep in range(repetitions):
        u = Rng(seed, stream=1000 + stream_offset + rep).bernoulli(0.5, size=data.n)
        cols = dict(base_cols)
        cols["__u__"] = u
        table = ContingencyTable.from_columns(cols)
        est = total_effect(table, treatment, outcome, tuple(adjustment) + ("__u__",))
        estimates.append(est.value)

    arr = np.asarray(estimates)
    lo = float(np.sum(arr < old))
    ties = float(np.sum(arr == old))
    rank = lo + (ties + 1.0) / 2.0
    r_total = repetitions + 1.0
    p = min(1.0, 2.0 * min(rank, r_total - rank) / r_total)
    return RefutationResult(
        old=old,
        new=float(arr.mean()),
        estimates=[float(e) for e in estimates],
        p_value=p,
        repetitions=repetitions,
    )


@dataclass
class TrendResult:
    rho: float
    pairs: list[tuple[float, float]]

    def to_dict(self) -> dict:
        return {"spearman_rho": self.rho, "pairs": [list(p) for p in self.pairs]}


def trend_analysis(pairs: list[tuple[float, float]]) -> TrendResult:
    """Spearman rank correlation between |total effect| and |fairness change|.

    Ties get average ranks.  A negative rho says attributes with stronger
    causal pull on the label saw smaller achievable fairness improvements.
    """
    if len(pairs) < 3:
        raise InvalidArgumentError("trend_analysis: need at least 3 pairs")
    abs_te = [abs(float(t)) for t, _ in pairs]
    abs_dphi = [abs(float(d)) for _, d in pairs]
    rho = float(spearmanr(abs_te, abs_dphi).correlation)
    return TrendResult(rho=rho, pairs=[(t, d) for t, d in zip(abs_te, abs_dphi)])
