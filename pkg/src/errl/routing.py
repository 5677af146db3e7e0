"""Routing problem definitions: instances, solutions, cost and feasibility.

Three problem kinds share one representation.  Node 0 is the depot for
CVRP and MRPFF; TSP has no depot.  For depot problems ``Solution.actions`` is
the decoded action sequence *after* leaving the depot, with ``0`` marking a
return to the depot.  A trailing return is implied if absent.
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

SCHEMA_VERSION = 1

# Conventional vehicle capacities for the uniform CVRP recipe, keyed by
# customer count.  Sizes not listed fall back to the nearest smaller key.
DEFAULT_CAPACITIES = {10: 20, 20: 30, 50: 40, 100: 50}
DEFAULT_NUM_ROUTES = 2


class Kind(str, enum.Enum):
    TSP = "TSP"
    CVRP = "CVRP"
    MRPFF = "MRPFF"

    @classmethod
    def parse(cls, value: "str | Kind") -> "Kind":
        if isinstance(value, Kind):
            return value
        try:
            return cls(value.upper())
        except ValueError:
            raise ValueError(f"unknown problem kind {value!r}") from None


class RoutingError(ValueError):
    """Structural problem with an instance or solution (bad index, bad size)."""


class FormatError(ValueError):
    """Malformed instance/solution file."""

    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


def default_capacity(n_customers: int) -> int:
    keys = sorted(DEFAULT_CAPACITIES)
    cap = DEFAULT_CAPACITIES[keys[0]]
    for k in keys:
        if n_customers >= k:
            cap = DEFAULT_CAPACITIES[k]
    return cap


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Instance:
    kind: Kind
    coords: np.ndarray  # (num_nodes, 2), float64
    demands: np.ndarray | None = None  # (num_nodes,), int64, depot entry 0
    capacity: int | None = None
    num_routes: int | None = None
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind.parse(self.kind))
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise RoutingError(f"coords must have shape (n, 2), got {coords.shape}")
        object.__setattr__(self, "coords", _frozen(coords))
        if self.demands is not None:
            d = np.asarray(self.demands, dtype=np.int64)
            if d.shape != (len(coords),):
                raise RoutingError("demands must have one entry per node")
            object.__setattr__(self, "demands", _frozen(d))
        if self.kind is Kind.CVRP and (self.demands is None or self.capacity is None):
            raise RoutingError("CVRP instances need demands and capacity")
        if self.kind is Kind.MRPFF and self.num_routes is None:
            object.__setattr__(self, "num_routes", DEFAULT_NUM_ROUTES)

    @property
    def num_nodes(self) -> int:
        return len(self.coords)

    @property
    def has_depot(self) -> bool:
        return self.kind is not Kind.TSP

    @property
    def size(self) -> int:
        """Problem size n: nodes for TSP, customers for depot problems."""
        return self.num_nodes - 1 if self.has_depot else self.num_nodes

    def distance_matrix(self) -> np.ndarray:
        diff = self.coords[:, None, :] - self.coords[None, :, :]
        return np.sqrt((diff**2).sum(-1))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Instance):
            return NotImplemented
        return (
            self.kind is other.kind
            and np.array_equal(self.coords, other.coords)
            and _opt_equal(self.demands, other.demands)
            and self.capacity == other.capacity
            and self.num_routes == other.num_routes
            and self.seed == other.seed
        )

    __hash__ = None  # type: ignore[assignment]


def _opt_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


def generate_instance(
    kind: "Kind | str",
    n: int,
    seed: int,
    capacity: int | None = None,
    num_routes: int = DEFAULT_NUM_ROUTES,
) -> Instance:
    """Uniform random instance with ``n`` nodes (TSP) or ``n`` customers.

    Coordinates are i.i.d. uniform on the unit square; CVRP demands are
    i.i.d. uniform integers in 1..9.
    """
    kind = Kind.parse(kind)
    if n < 2:
        raise RoutingError(f"problem size must be >= 2, got {n}")
    if kind is Kind.MRPFF and n < num_routes:
        raise RoutingError(f"MRPFF needs at least {num_routes} customers")
    rng = np.random.default_rng(seed)
    if kind is Kind.TSP:
        return Instance(kind, rng.random((n, 2)), seed=seed)
    coords = rng.random((n + 1, 2))
    if kind is Kind.MRPFF:
        return Instance(kind, coords, num_routes=num_routes, seed=seed)
    demands = np.concatenate([[0], rng.integers(1, 10, size=n)])
    cap = default_capacity(n) if capacity is None else capacity
    if cap <= 9:
        raise RoutingError("capacity must exceed the maximum demand 9")
    return Instance(kind, coords, demands=demands, capacity=cap, seed=seed)


def generate_instances(kind, n: int, count: int, seed: int, **kw) -> list[Instance]:
    """``count`` instances whose seeds are drawn from one master stream."""
    seeds = np.random.SeedSequence(seed).generate_state(count, dtype=np.uint64)
    return [generate_instance(kind, n, int(s), **kw) for s in seeds]


def split_routes(actions: Sequence[int]) -> list[list[int]]:
    """Split a depot-problem action sequence into customer lists per route."""
    routes, cur = [], []
    for a in actions:
        if a == 0:
            routes.append(cur)
            cur = []
        else:
            cur.append(int(a))
    if cur:
        routes.append(cur)
    return routes


def _check_indices(inst: Instance, actions: Sequence[int]) -> None:
    for a in actions:
        if not 0 <= int(a) < inst.num_nodes:
            raise RoutingError(f"node index {a} out of range for {inst.num_nodes} nodes")


def tour_length(inst: Instance, actions: Sequence[int]) -> float:
    """Euclidean length of a TSP cycle or of depot-closed routes."""
    actions = [int(a) for a in actions]
    _check_indices(inst, actions)
    if not actions:
        return 0.0
    if inst.has_depot:
        seq = [0] + actions + ([0] if actions[-1] != 0 else [])
    else:
        seq = actions + [actions[0]]
    pts = inst.coords[seq]
    return float(np.sqrt(((pts[1:] - pts[:-1]) ** 2).sum(-1)).sum())


@dataclass(frozen=True)
class Solution:
    actions: tuple[int, ...]
    routes: tuple[tuple[int, ...], ...]
    total_length: float
    feasible: bool = False

    @classmethod
    def from_actions(cls, inst: Instance, actions: Iterable[int], check: bool = True) -> "Solution":
        acts = tuple(int(a) for a in actions)
        if inst.has_depot:
            routes = tuple(tuple(r) for r in split_routes(acts))
        else:
            routes = (acts,)
        length = tour_length(inst, acts)
        feasible = validate(inst, acts).feasible if check else False
        return cls(acts, routes, length, feasible)


@dataclass
class ValidationReport:
    feasible: bool
    violations: list[str] = field(default_factory=list)


def validate(inst: Instance, sol: "Solution | Sequence[int]") -> ValidationReport:
    """Check a solution against the routing constraints; never raises.

    Degree constraints become "each customer exactly once".  The capacity
    cuts are checked per route, which is equivalent for solutions whose
    routes are depot-connected paths (all solutions representable here).
    """
    actions = sol.actions if isinstance(sol, Solution) else tuple(int(a) for a in sol)
    bad: list[str] = []
    out_of_range = [a for a in actions if not 0 <= a < inst.num_nodes]
    if out_of_range:
        return ValidationReport(False, [f"index out of range: {out_of_range}"])

    if not inst.has_depot:
        if sorted(actions) != list(range(inst.num_nodes)):
            bad.append("tour is not a permutation of all nodes")
        return ValidationReport(not bad, bad)

    routes = split_routes(actions)
    visits = np.zeros(inst.num_nodes, dtype=np.int64)
    for r in routes:
        for c in r:
            visits[c] += 1
    missing = [i for i in range(1, inst.num_nodes) if visits[i] == 0]
    repeated = [i for i in range(1, inst.num_nodes) if visits[i] > 1]
    if missing:
        bad.append(f"customers not visited: {missing}")
    if repeated:
        bad.append(f"customers visited more than once: {repeated}")
    if any(len(r) == 0 for r in routes):
        bad.append("empty route (consecutive depot visits)")
    if inst.kind is Kind.CVRP:
        for k, r in enumerate(routes):
            load = int(inst.demands[r].sum()) if r else 0
            if load > inst.capacity:
                bad.append(f"capacity violated on route {k}: {load} > {inst.capacity}")
    if inst.kind is Kind.MRPFF and len(routes) != inst.num_routes:
        bad.append(f"route count {len(routes)} != {inst.num_routes}")
    return ValidationReport(not bad, bad)


# --------------------------------------------------------------------------
# File I/O: JSON lines, one record per line.


def instance_to_record(inst: Instance) -> dict:
    rec = {
        "schema_version": SCHEMA_VERSION,
        "kind": inst.kind.value,
        "n": inst.size,
        "depot": 0 if inst.has_depot else None,
        "capacity": inst.capacity,
        "num_routes": inst.num_routes,
        "coords": inst.coords.tolist(),
        "demands": None if inst.demands is None else inst.demands.tolist(),
        "seed": inst.seed,
    }
    return rec


def instance_from_record(rec: dict) -> Instance:
    if rec.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"schema version {rec.get('schema_version')!r} != {SCHEMA_VERSION}")
    inst = Instance(
        kind=Kind.parse(rec["kind"]),
        coords=np.array(rec["coords"], dtype=np.float64).reshape(-1, 2),
        demands=None if rec.get("demands") is None else np.array(rec["demands"]),
        capacity=rec.get("capacity"),
        num_routes=rec.get("num_routes"),
        seed=rec.get("seed"),
    )
    if inst.size != rec["n"]:
        raise FormatError(f"n={rec['n']} disagrees with {inst.num_nodes} coordinates")
    return inst


def _read_records(path: "str | os.PathLike", convert) -> list:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(convert(rec))
            except FormatError as e:
                raise FormatError(str(e), lineno) from None
            except (ValueError, KeyError, TypeError) as e:
                raise FormatError(f"{type(e).__name__}: {e}", lineno) from None
    return out


def _write_records(path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_instances(path) -> list[Instance]:
    return _read_records(path, instance_from_record)


def write_instances(path, instances: Iterable[Instance]) -> None:
    _write_records(path, (instance_to_record(i) for i in instances))


@dataclass(frozen=True)
class SolutionRecord:
    instance_id: int
    actions: tuple[int, ...]
    length: float


def _solution_from_record(rec: dict) -> SolutionRecord:
    if rec.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"schema version {rec.get('schema_version')!r} != {SCHEMA_VERSION}")
    return SolutionRecord(int(rec["instance_id"]), tuple(int(a) for a in rec["actions"]), float(rec["length"]))


def read_solutions(path) -> list[SolutionRecord]:
    return _read_records(path, _solution_from_record)


def write_solutions(path, solutions: Iterable["SolutionRecord | tuple[int, Solution]"]) -> None:
    def recs():
        for s in solutions:
            if isinstance(s, tuple):
                iid, sol = s
                s = SolutionRecord(iid, sol.actions, sol.total_length)
            yield {
                "schema_version": SCHEMA_VERSION,
                "instance_id": s.instance_id,
                "actions": list(s.actions),
                "length": s.length,
            }

    _write_records(path, recs())
