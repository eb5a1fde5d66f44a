"""Ground-truth data factory: binary structural causal models with exact
enumerated effects, feature synthesis, skewed client partitioning, and CSV I/O.

An SCM here is a DAG over binary variables given in topological order, each
with a conditional probability table P(v=1 | parents).  Features are a noisy
linear mix of every discrete variable, so a downstream classifier can both
learn the label and leak the sensitive attributes.
"""
from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, PartitionInfeasibleError, SchemaError
from .numkit import Rng

# Stream offsets within a sampling seed (see numkit.Rng).
_STREAM_SAMPLE = 0
_STREAM_MIXING = 101
_STREAM_NOISE = 102
_STREAM_PARTITION = 201

_MAX_ENUM_VARS = 20


@dataclass
class SCMSpec:
    """Binary SCM: topologically ordered variables, parent lists, and CPTs.

    ``cpt[v]`` has one P(v=1 | parent assignment) entry per assignment; the
    assignment index packs parent values little-endian in parent-list order
    (first parent is bit 0).  ``mixing`` is the (d_x, n_vars) feature map; when
    None it is drawn from the sampling seed.
    """

    variables: list[str]
    parents: dict[str, list[str]]
    cpt: dict[str, np.ndarray]
    attributes: list[str]
    label: str
    mediators: list[str] = field(default_factory=list)
    d_x: int = 16
    sigma: float = 0.5
    mixing: np.ndarray | None = None

    def __post_init__(self):
        seen: set[str] = set()
        for v in self.variables:
            for p in self.parents.get(v, []):
                if p not in seen:
                    raise InvalidArgumentError(
                        f"SCMSpec: parent {p!r} of {v!r} does not precede it (variables must be topological)"
                    )
            seen.add(v)
        if len(seen) != len(self.variables):
            raise InvalidArgumentError("SCMSpec: duplicate variable names")
        for v in self.variables:
            table = np.asarray(self.cpt.get(v), dtype=np.float64)
            k = len(self.parents.get(v, []))
            if table.shape != (2**k,):
                raise InvalidArgumentError(
                    f"SCMSpec: CPT for {v!r} must have 2^{k} rows, got shape {table.shape}"
                )
            if np.any(table < 0) or np.any(table > 1):
                raise InvalidArgumentError(f"SCMSpec: CPT for {v!r} has entries outside [0, 1]")
            self.cpt[v] = table
        declared = set(self.attributes) | {self.label} | set(self.mediators)
        missing = declared - set(self.variables)
        if missing:
            raise InvalidArgumentError(f"SCMSpec: undeclared variables referenced: {sorted(missing)}")
        if self.d_x < 1 or self.sigma < 0:
            raise InvalidArgumentError("SCMSpec: need d_x >= 1 and sigma >= 0")
        if self.mixing is not None:
            self.mixing = np.asarray(self.mixing, dtype=np.float64)
            if self.mixing.shape != (self.d_x, len(self.variables)):
                raise InvalidArgumentError(
                    f"SCMSpec: mixing must be ({self.d_x}, {len(self.variables)}), got {self.mixing.shape}"
                )

    def parent_index(self, var: str, values: dict[str, int]) -> int:
        idx = 0
        for bit, p in enumerate(self.parents.get(var, [])):
            idx |= int(values[p]) << bit
        return idx

    def extra_variables(self) -> list[str]:
        """Observed discrete columns beyond attributes and label (mediators, confounders)."""
        core = set(self.attributes) | {self.label}
        return [v for v in self.variables if v not in core]

    def to_dict(self) -> dict:
        return {
            "variables": list(self.variables),
            "parents": {v: list(self.parents.get(v, [])) for v in self.variables},
            "cpt": {v: [float(p) for p in self.cpt[v]] for v in self.variables},
            "attributes": list(self.attributes),
            "label": self.label,
            "mediators": list(self.mediators),
            "d_x": self.d_x,
            "sigma": self.sigma,
            "mixing": None if self.mixing is None else self.mixing.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SCMSpec":
        return cls(
            variables=list(d["variables"]),
            parents={k: list(v) for k, v in d.get("parents", {}).items()},
            cpt={k: np.asarray(v, dtype=np.float64) for k, v in d["cpt"].items()},
            attributes=list(d["attributes"]),
            label=d["label"],
            mediators=list(d.get("mediators", [])),
            d_x=int(d.get("d_x", 16)),
            sigma=float(d.get("sigma", 0.5)),
            mixing=None if d.get("mixing") is None else np.asarray(d["mixing"], dtype=np.float64),
        )


@dataclass
class Dataset:
    """Feature matrix plus named binary columns (attributes, label, extras)."""

    x: np.ndarray
    attrs: dict[str, np.ndarray]
    y: np.ndarray
    extra: dict[str, np.ndarray] = field(default_factory=dict)
    provenance: str = ""

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int8)
        n = self.x.shape[0]
        if self.y.shape[0] != n:
            raise InvalidArgumentError("Dataset: label length mismatch")
        for group in (self.attrs, self.extra):
            for name, col in list(group.items()):
                col = np.asarray(col, dtype=np.int8)
                if col.shape[0] != n:
                    raise InvalidArgumentError(f"Dataset: column {name!r} length mismatch")
                if not np.all((col == 0) | (col == 1)):
                    raise InvalidArgumentError(f"Dataset: column {name!r} must be binary")
                group[name] = col
        if not np.all((self.y == 0) | (self.y == 1)):
            raise InvalidArgumentError("Dataset: label must be binary")

    @property
    def n(self) -> int:
        return int(self.x.shape[0])

    @property
    def d_x(self) -> int:
        return int(self.x.shape[1])

    def discrete_names(self) -> list[str]:
        return list(self.attrs) + ["y"] + list(self.extra)

    def column(self, name: str) -> np.ndarray:
        if name == "y":
            return self.y
        if name in self.attrs:
            return self.attrs[name]
        if name in self.extra:
            return self.extra[name]
        raise InvalidArgumentError(f"Dataset: unknown column {name!r}")

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(
            x=self.x[idx],
            attrs={k: v[idx] for k, v in self.attrs.items()},
            y=self.y[idx],
            extra={k: v[idx] for k, v in self.extra.items()},
            provenance=self.provenance,
        )

    def concat(self, other: "Dataset") -> "Dataset":
        if list(self.attrs) != list(other.attrs) or list(self.extra) != list(other.extra):
            raise InvalidArgumentError("Dataset.concat: column mismatch")
        return Dataset(
            x=np.concatenate([self.x, other.x]),
            attrs={k: np.concatenate([v, other.attrs[k]]) for k, v in self.attrs.items()},
            y=np.concatenate([self.y, other.y]),
            extra={k: np.concatenate([v, other.extra[k]]) for k, v in self.extra.items()},
            provenance=self.provenance,
        )


def sample_scm(spec: SCMSpec, n: int, seed: int) -> Dataset:
    """Ancestral sampling in topological order, then linear feature synthesis.

    Deterministic in (spec, n, seed): variable draws, the mixing matrix (when
    the spec leaves it unset), and the feature noise each use a fixed stream
    of the seed.
    """
    if n < 1:
        raise InvalidArgumentError("sample_scm: n must be >= 1")
    rng = Rng(seed, _STREAM_SAMPLE)
    cols: dict[str, np.ndarray] = {}
    for v in spec.variables:
        ps = spec.parents.get(v, [])
        idx = np.zeros(n, dtype=np.int64)
        for bit, p in enumerate(ps):
            idx |= cols[p].astype(np.int64) << bit
        prob = spec.cpt[v][idx]
        cols[v] = (rng.uniform(size=n) < prob).astype(np.int8)

    if spec.mixing is not None:
        mix = spec.mixing
    else:
        mix = Rng(seed, _STREAM_MIXING).normal(size=(spec.d_x, len(spec.variables)))
    values = np.stack([cols[v] for v in spec.variables], axis=1).astype(np.float64)
    x = values @ mix.T
    if spec.sigma > 0:
        x = x + Rng(seed, _STREAM_NOISE).normal(size=(n, spec.d_x), scale=spec.sigma)

    return Dataset(
        x=x,
        attrs={a: cols[a] for a in spec.attributes},
        y=cols[spec.label],
        extra={v: cols[v] for v in spec.extra_variables()},
        provenance=f"scm(seed={seed}, n={n})",
    )


@dataclass
class ExactEffects:
    """Enumerated intervention contrasts for one treatment/outcome pair."""

    te: float
    nde: float | None = None
    nie: float | None = None
    cde_at_m: dict[int, float] | None = None


def closed_form_effects(
    spec: SCMSpec, treatment: str, outcome: str, mediator: str | None = None
) -> ExactEffects:
    """Exact effects by exhaustive enumeration under the two mutilated models.

    For each arm a the incoming edges of the treatment are cut and the full
    joint is enumerated, giving E_a[Y], P_a(M=m) and E_a[Y | M=m].  The
    decomposition uses the mediator law at arm 0, so te = nde + nie holds as
    an algebraic identity for every spec.
    """
    for v in (treatment, outcome) + ((mediator,) if mediator else ()):
        if v not in spec.variables:
            raise InvalidArgumentError(f"closed_form_effects: unknown variable {v!r}")
    if len(spec.variables) > _MAX_ENUM_VARS:
        raise InvalidArgumentError(
            f"closed_form_effects: state space 2^{len(spec.variables)} too large"
        )

    names = spec.variables
    assignments = np.array(list(itertools.product((0, 1), repeat=len(names))), dtype=np.int8)
    pos = {v: i for i, v in enumerate(names)}

    def mutilated_probs(arm: int) -> np.ndarray:
        keep = assignments[:, pos[treatment]] == arm
        rows = assignments[keep]
        prob = np.ones(rows.shape[0])
        for v in names:
            if v == treatment:
                continue
            idx = np.zeros(rows.shape[0], dtype=np.int64)
            for bit, p in enumerate(spec.parents.get(v, [])):
                idx |= rows[:, pos[p]].astype(np.int64) << bit
            p1 = spec.cpt[v][idx]
            val = rows[:, pos[v]]
            prob *= np.where(val == 1, p1, 1.0 - p1)
        return rows, prob

    stats = {}
    for arm in (0, 1):
        rows, prob = mutilated_probs(arm)
        yv = rows[:, pos[outcome]].astype(np.float64)
        ey = float(np.sum(prob * yv))
        entry = {"ey": ey}
        if mediator is not None:
            mv = rows[:, pos[mediator]]
            for m in (0, 1):
                mask = mv == m
                pm = float(np.sum(prob[mask]))
                ey_m = float(np.sum(prob[mask] * yv[mask]) / pm) if pm > 0 else None
                entry[f"pm{m}"] = pm
                entry[f"ey_m{m}"] = ey_m
        stats[arm] = entry

    te = stats[0]["ey"] - stats[1]["ey"]
    if mediator is None:
        return ExactEffects(te=te)

    nde = 0.0
    nie = 0.0
    cde: dict[int, float] = {}
    for m in (0, 1):
        p0, p1 = stats[0][f"pm{m}"], stats[1][f"pm{m}"]
        e0, e1 = stats[0][f"ey_m{m}"], stats[1][f"ey_m{m}"]
        if p0 > 0:
            if e0 is None or e1 is None:
                raise InvalidArgumentError(
                    f"closed_form_effects: mediator value {m} unreachable in one arm"
                )
            nde += p0 * (e0 - e1)
        if (p0 - p1) != 0.0:
            if e1 is None:
                raise InvalidArgumentError(
                    f"closed_form_effects: mediator value {m} unreachable under arm 1"
                )
            nie += e1 * (p0 - p1)
        if e0 is not None and e1 is not None:
            cde[m] = e0 - e1
    return ExactEffects(te=te, nde=nde, nie=nie, cde_at_m=cde)


@dataclass
class PartitionPlan:
    """How to split one dataset into a server test set and skewed client shares."""

    clients: int = 5
    gamma: float = 0.5
    skew_variable: str = "a1"
    test_fraction: float = 0.2
    train_ratio: tuple[int, int] = (4, 1)
    seed: int = 0

    def __post_init__(self):
        if self.clients < 1:
            raise InvalidArgumentError("PartitionPlan: need at least one client")
        if not (0.0 < self.test_fraction < 1.0):
            raise InvalidArgumentError("PartitionPlan: test_fraction must be in (0, 1)")
        if self.gamma <= 0:
            raise InvalidArgumentError("PartitionPlan: gamma must be positive")
        tr, va = self.train_ratio
        if tr <= 0 or va <= 0:
            raise InvalidArgumentError("PartitionPlan: ratio parts must be positive")


@dataclass
class Partition:
    test: Dataset
    clients: list[tuple[Dataset, Dataset]]
    assignment: dict

    def client_data(self, s: int) -> Dataset:
        train, val = self.clients[s]
        return train.concat(val)


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation of `total` proportional to `weights` (sums exactly)."""
    raw = weights * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def partition_clients(data: Dataset, plan: PartitionPlan) -> Partition:
    """Test split first, then Dirichlet-skewed per-stratum client assignment.

    Rows are assigned per stratum of the skew variable with client proportions
    drawn once per stratum from Dirichlet(gamma, ..., gamma); each client is
    then shuffled and split train:val by the plan ratio.
    """
    n = data.n
    if n < 10 * plan.clients:
        raise PartitionInfeasibleError(f"partition: need n >= {10 * plan.clients}, got {n}")
    skew = data.column(plan.skew_variable)
    rng = Rng(plan.seed, _STREAM_PARTITION)

    order = rng.permutation(n)
    n_test = int(round(plan.test_fraction * n))
    test_idx = order[:n_test]
    rest = order[n_test:]

    client_rows: list[list[np.ndarray]] = [[] for _ in range(plan.clients)]
    stratum_counts = {}
    for value in (0, 1):
        stratum = rest[skew[rest] == value]
        weights = rng.dirichlet([plan.gamma] * plan.clients)
        counts = _largest_remainder(weights, len(stratum))
        start = 0
        for s, c in enumerate(counts):
            client_rows[s].append(stratum[start : start + c])
            start += c
        stratum_counts[str(value)] = counts.tolist()  # string keys: JSON-stable

    tr, va = plan.train_ratio
    clients: list[tuple[Dataset, Dataset]] = []
    sizes = []
    for s in range(plan.clients):
        rows = np.concatenate(client_rows[s]) if client_rows[s] else np.array([], dtype=np.int64)
        if len(rows) < 2:
            raise PartitionInfeasibleError(
                f"partition: client {s} would receive {len(rows)} samples (needs >= 2); "
                f"increase n or gamma"
            )
        rows = rows[rng.permutation(len(rows))]
        n_val = max(1, int(round(len(rows) * va / (tr + va))))
        n_train = len(rows) - n_val
        if n_train < 1:
            raise PartitionInfeasibleError(f"partition: client {s} train split empty")
        clients.append((data.subset(rows[:n_train]), data.subset(rows[n_train:])))
        sizes.append({"train": int(n_train), "val": int(n_val)})

    assignment = {
        "seed": plan.seed,
        "skew_variable": plan.skew_variable,
        "gamma": plan.gamma,
        "n_total": int(n),
        "n_test": int(n_test),
        "stratum_client_counts": stratum_counts,
        "client_sizes": sizes,
    }
    return Partition(test=data.subset(test_idx), clients=clients, assignment=assignment)


# ---------------------------------------------------------------------------
# CSV schema: header x0..x{d-1}, attribute names, y, then extra columns.
# UTF-8, comma-separated, '.' decimal, no quoting; binary columns as 0/1.
# Floats are written with repr so save -> load round-trips exactly.
# ---------------------------------------------------------------------------


def save_csv(data: Dataset, path) -> None:
    header = [f"x{i}" for i in range(data.d_x)] + list(data.attrs) + ["y"] + list(data.extra)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, quoting=csv.QUOTE_NONE)
        writer.writerow(header)
        bin_cols = [data.attrs[a] for a in data.attrs] + [data.y] + [data.extra[e] for e in data.extra]
        for i in range(data.n):
            row = [repr(float(v)) for v in data.x[i]]
            row += [str(int(c[i])) for c in bin_cols]
            writer.writerow(row)


def load_csv(path) -> Dataset:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        return _parse_csv(fh, str(path))


def _parse_csv(fh: io.TextIOBase, origin: str) -> Dataset:
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError(f"{origin}: empty file") from None

    d_x = 0
    while d_x < len(header) and header[d_x] == f"x{d_x}":
        d_x += 1
    if d_x == 0:
        raise SchemaError(f"{origin}: header must start with x0, x1, ... (got {header[:3]})")
    rest = header[d_x:]
    if "y" not in rest:
        raise SchemaError(f"{origin}: header missing label column 'y'")
    y_at = rest.index("y")
    attr_names = rest[:y_at]
    extra_names = rest[y_at + 1 :]
    for name in attr_names + extra_names:
        if not name or name[0] == "x" or name == "y":
            raise SchemaError(f"{origin}: bad column name {name!r}")

    x_rows, bin_rows = [], []
    n_cols = len(header)
    for lineno, row in enumerate(reader, start=2):
        if len(row) != n_cols:
            raise SchemaError(f"{origin}: row {lineno} has {len(row)} fields, expected {n_cols}")
        try:
            x_rows.append([float(v) for v in row[:d_x]])
        except ValueError as exc:
            raise SchemaError(f"{origin}: row {lineno}: bad feature value ({exc})") from None
        bins = []
        for name, v in zip(rest, row[d_x:]):
            if v not in ("0", "1"):
                raise SchemaError(f"{origin}: row {lineno}, column {name!r}: value {v!r} is not 0/1")
            bins.append(int(v))
        bin_rows.append(bins)

    if not x_rows:
        raise SchemaError(f"{origin}: no data rows")
    x = np.asarray(x_rows, dtype=np.float64)
    bins = np.asarray(bin_rows, dtype=np.int8)
    attrs = {name: bins[:, i] for i, name in enumerate(attr_names)}
    y = bins[:, y_at]
    extra = {name: bins[:, y_at + 1 + i] for i, name in enumerate(extra_names)}
    return Dataset(x=x, attrs=attrs, y=y, extra=extra, provenance=origin)
