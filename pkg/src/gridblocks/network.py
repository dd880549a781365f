"""Network data model, MATPOWER ingestion and injection balancing.

A :class:`PowerNetwork` is an immutable, simple, oriented graph. Buses are
indexed ``0..n-1``. Lines carry a stable integer ``id``; matrices built from a
network are indexed by line *position*, and :meth:`PowerNetwork.position`
maps ids to positions. Networks derived by removing lines keep the ids of the
surviving lines, which lets switching plans refer back to the original case.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import BalanceError, DataError, ParseError, UnbalanceableError

log = logging.getLogger(__name__)

REBALANCE_MODES = ("reject", "uniform-generators", "proportional-generators")
BALANCED_TOL = 1e-9
_NOISE = 1e-12

# MATPOWER column indices (0-based)
_BUS_I, _BUS_PD = 0, 2
_GEN_BUS, _GEN_PG, _GEN_STATUS = 0, 1, 7
_BR_F, _BR_T, _BR_X, _BR_RATEA, _BR_STATUS = 0, 1, 3, 5, 10
_MIN_COLS = {"bus": 3, "gen": 8, "branch": 11}


@dataclass(frozen=True)
class Bus:
    id: int
    original_id: int
    injection: float
    generation: float = 0.0
    is_generator: bool = False


@dataclass(frozen=True)
class Line:
    id: int
    from_bus: int
    to_bus: int
    susceptance: float
    capacity: float = math.inf
    # 1-based branch rows of the source file; provenance only
    merged_from: tuple[int, ...] = field(default=(), compare=False)

    @property
    def endpoints(self) -> tuple[int, int]:
        return (self.from_bus, self.to_bus)

    @property
    def multiplicity(self) -> int:
        return max(1, len(self.merged_from))


@dataclass(frozen=True, eq=False)
class PowerNetwork:
    """Immutable weighted oriented graph ``G = (V, E, b)``.

    Parameters
    ----------
    buses : sequence of Bus
        Bus ``k`` must have ``id == k``.
    lines : sequence of Line
        Each line joins two distinct existing buses; no two lines share an
        unordered endpoint pair. Line ids are unique.
    name : str, optional
    base_mva : float, optional
    """

    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    name: str = ""
    base_mva: float = 100.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "lines", tuple(self.lines))
        for k, bus in enumerate(self.buses):
            if bus.id != k:
                raise DataError(f"bus ids must be contiguous from 0; position {k} has id {bus.id}")
        n = len(self.buses)
        seen_pairs: set[tuple[int, int]] = set()
        pos: dict[int, int] = {}
        for k, line in enumerate(self.lines):
            if line.id in pos:
                raise DataError(f"duplicate line id {line.id}")
            pos[line.id] = k
            i, j = line.from_bus, line.to_bus
            if not (0 <= i < n and 0 <= j < n):
                raise DataError(f"line {line.id} references a missing bus")
            if i == j:
                raise DataError(f"line {line.id} is a self-loop at bus {i}")
            if not (line.susceptance > 0 and math.isfinite(line.susceptance)):
                raise DataError(f"line {line.id} has non-positive susceptance {line.susceptance}")
            if not line.capacity > 0:
                raise DataError(f"line {line.id} has non-positive capacity {line.capacity}")
            key = (min(i, j), max(i, j))
            if key in seen_pairs:
                raise DataError(f"parallel lines between buses {key}; merge them first")
            seen_pairs.add(key)
        object.__setattr__(self, "_pos", pos)

    # basic views ---------------------------------------------------------
    @property
    def n(self) -> int:
        return len(self.buses)

    @property
    def m(self) -> int:
        return len(self.lines)

    @property
    def line_ids(self) -> np.ndarray:
        return np.array([ln.id for ln in self.lines], dtype=int)

    @property
    def endpoints(self) -> np.ndarray:
        """``(m, 2)`` array of (from, to) bus indices."""
        return np.array([ln.endpoints for ln in self.lines], dtype=int).reshape(-1, 2)

    @property
    def susceptances(self) -> np.ndarray:
        return np.array([ln.susceptance for ln in self.lines], dtype=float)

    @property
    def capacities(self) -> np.ndarray:
        return np.array([ln.capacity for ln in self.lines], dtype=float)

    @property
    def injections(self) -> np.ndarray:
        return np.array([b.injection for b in self.buses], dtype=float)

    @property
    def generator_mask(self) -> np.ndarray:
        return np.array([b.is_generator for b in self.buses], dtype=bool)

    def position(self, line_id: int) -> int:
        try:
            return self._pos[line_id]  # type: ignore[attr-defined]
        except KeyError:
            raise DataError(f"no line with id {line_id}") from None

    def positions(self, line_ids: Iterable[int]) -> list[int]:
        return [self.position(int(e)) for e in line_ids]

    def line(self, line_id: int) -> Line:
        return self.lines[self.position(line_id)]

    def has_line(self, line_id: int) -> bool:
        return line_id in self._pos  # type: ignore[attr-defined]

    def adjacency(self) -> list[list[tuple[int, int]]]:
        """Per-bus list of ``(neighbour, line position)``."""
        adj: list[list[tuple[int, int]]] = [[] for _ in range(self.n)]
        for k, ln in enumerate(self.lines):
            adj[ln.from_bus].append((ln.to_bus, k))
            adj[ln.to_bus].append((ln.from_bus, k))
        return adj

    def islands(self) -> list[list[int]]:
        """Connected components as sorted vertex lists, ordered by smallest vertex."""
        return components(self.n, self.endpoints)

    def is_connected(self) -> bool:
        return self.n > 0 and len(self.islands()) == 1

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PowerNetwork):
            return NotImplemented
        return self.buses == other.buses and self.lines == other.lines

    def __hash__(self) -> int:
        return hash((self.buses, self.lines))

    def __repr__(self) -> str:
        return f"PowerNetwork(name={self.name!r}, n={self.n}, m={self.m})"

    # derived networks -----------------------------------------------------
    def with_injections(self, p: Sequence[float]) -> "PowerNetwork":
        p = np.asarray(p, dtype=float)
        if p.shape != (self.n,):
            raise DataError(f"injection vector has shape {p.shape}, expected ({self.n},)")
        buses = [
            Bus(b.id, b.original_id, float(p[b.id]), b.generation, b.is_generator)
            for b in self.buses
        ]
        return PowerNetwork(buses, self.lines, self.name, self.base_mva)

    def without_lines(self, line_ids: Iterable[int]) -> "PowerNetwork":
        drop = {int(e) for e in line_ids}
        for e in drop:
            self.position(e)
        lines = [ln for ln in self.lines if ln.id not in drop]
        return PowerNetwork(self.buses, lines, self.name, self.base_mva)

    def induced(self, vertices: Iterable[int]) -> tuple["PowerNetwork", np.ndarray]:
        """Subnetwork induced by ``vertices``.

        Returns
        -------
        sub : PowerNetwork
            Buses renumbered ``0..k-1`` in increasing order of parent index;
            line ids are kept.
        vmap : ndarray
            ``vmap[k]`` is the parent index of sub-bus ``k``.
        """
        vmap = np.array(sorted({int(v) for v in vertices}), dtype=int)
        local = {int(v): k for k, v in enumerate(vmap)}
        buses = [
            Bus(k, self.buses[v].original_id, self.buses[v].injection,
                self.buses[v].generation, self.buses[v].is_generator)
            for k, v in enumerate(vmap)
        ]
        lines = [
            Line(ln.id, local[ln.from_bus], local[ln.to_bus], ln.susceptance,
                 ln.capacity, ln.merged_from)
            for ln in self.lines
            if ln.from_bus in local and ln.to_bus in local
        ]
        return PowerNetwork(buses, lines, self.name, self.base_mva), vmap


def components(n: int, endpoints: np.ndarray) -> list[list[int]]:
    """Connected components of a graph given by an edge endpoint array."""
    parent = list(range(n))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, j in np.asarray(endpoints, dtype=int).reshape(-1, 2):
        ri, rj = find(int(i)), find(int(j))
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    groups: dict[int, list[int]] = {}
    for v in range(n):
        groups.setdefault(find(v), []).append(v)
    return sorted(groups.values(), key=lambda c: c[0])


# ---------------------------------------------------------------------------
# MATPOWER parsing
# ---------------------------------------------------------------------------

_MATRIX_START = re.compile(r"^\s*mpc\.(\w+)\s*=\s*\[(.*)$")
_SCALAR = re.compile(r"^\s*mpc\.(\w+)\s*=\s*([^\[\{'\"][^;]*);")


def _strip_comment(line: str) -> str:
    # no quoted strings appear inside the numeric tables we read
    k = line.find("%")
    return line if k < 0 else line[:k]


def _read_tables(text: str) -> tuple[dict[str, list[tuple[int, list[float]]]], dict[str, str]]:
    tables: dict[str, list[tuple[int, list[float]]]] = {}
    scalars: dict[str, str] = {}
    current: str | None = None
    start_line = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if current is None:
            m = _MATRIX_START.match(line)
            if m:
                current, start_line = m.group(1), lineno
                if current in tables:
                    raise ParseError(f"table mpc.{current} defined twice", lineno)
                tables[current] = []
                line = m.group(2)
            else:
                s = _SCALAR.match(line)
                if s:
                    scalars[s.group(1)] = s.group(2).strip()
                continue
        closed = "]" in line
        if closed:
            line, _, tail = line.partition("]")
            if tail.strip() not in ("", ";"):
                raise ParseError(f"unexpected text after table mpc.{current}: {tail.strip()!r}", lineno)
        for chunk in line.split(";"):
            tokens = chunk.replace(",", " ").split()
            if not tokens:
                continue
            try:
                values = [float(t) for t in tokens]
            except ValueError:
                raise ParseError(f"non-numeric entry in mpc.{current}: {chunk.strip()!r}", lineno) from None
            tables[current].append((lineno, values))
        if closed:
            current = None
    if current is not None:
        raise ParseError(f"table mpc.{current} is not closed with '];'", start_line)
    return tables, scalars


def _table(tables: Mapping, name: str, required: bool = True) -> list[tuple[int, list[float]]]:
    if name not in tables:
        if required:
            raise ParseError(f"missing table mpc.{name}")
        return []
    rows = tables[name]
    width = _MIN_COLS[name]
    for lineno, vals in rows:
        if len(vals) < width:
            raise ParseError(f"mpc.{name} row has {len(vals)} columns, need at least {width}", lineno)
    return rows


def parse_matpower(text: str, name: str = "") -> PowerNetwork:
    """Parse MATPOWER case text into a :class:`PowerNetwork`.

    Injections are ``sum(Pg of in-service generators) - Pd`` in MW. The DC
    susceptance of a branch is ``1/x`` (taps and shifts ignored). Branches
    with status 0 are dropped and parallel in-service branches are merged by
    summing susceptances and capacities. ``rateA == 0`` means unlimited.

    Raises
    ------
    ParseError
        Malformed text; carries the offending line number where known.
    DataError
        Non-positive reactance, self-loop, or a branch/generator that refers
        to a bus absent from ``mpc.bus``.
    """
    tables, scalars = _read_tables(text)
    bus_rows = _table(tables, "bus")
    gen_rows = _table(tables, "gen", required=False)
    br_rows = _table(tables, "branch")
    if not bus_rows:
        raise ParseError("mpc.bus is empty")
    try:
        base_mva = float(scalars.get("baseMVA", "100"))
    except ValueError:
        raise ParseError(f"bad baseMVA {scalars['baseMVA']!r}") from None

    index: dict[int, int] = {}
    load: list[float] = []
    original: list[int] = []
    for lineno, vals in bus_rows:
        bid = int(vals[_BUS_I])
        if bid != vals[_BUS_I]:
            raise ParseError(f"non-integer bus id {vals[_BUS_I]}", lineno)
        if bid in index:
            raise DataError(f"duplicate bus id {bid} (line {lineno})")
        index[bid] = len(original)
        original.append(bid)
        load.append(vals[_BUS_PD])

    gen = [0.0] * len(original)
    has_gen = [False] * len(original)
    for lineno, vals in gen_rows:
        bid = int(vals[_GEN_BUS])
        if bid not in index:
            raise DataError(f"generator at missing bus {bid} (line {lineno})")
        if vals[_GEN_STATUS] > 0:
            k = index[bid]
            gen[k] += vals[_GEN_PG]
            has_gen[k] = True

    groups: dict[tuple[int, int], list] = {}
    order: list[tuple[int, int]] = []
    for row, (lineno, vals) in enumerate(br_rows, start=1):
        if vals[_BR_STATUS] <= 0:
            continue
        f, t = int(vals[_BR_F]), int(vals[_BR_T])
        for b in (f, t):
            if b not in index:
                raise DataError(f"branch {row} references missing bus {b} (line {lineno})")
        i, j = index[f], index[t]
        if i == j:
            raise DataError(f"branch {row} is a self-loop at bus {f} (line {lineno})")
        x = vals[_BR_X]
        if not x > 0:
            raise DataError(f"branch {row} has reactance x={x} <= 0 (line {lineno})")
        rate = vals[_BR_RATEA]
        cap = math.inf if rate == 0 else rate
        if not cap > 0:
            raise DataError(f"branch {row} has negative rateA {rate} (line {lineno})")
        key = (min(i, j), max(i, j))
        if key not in groups:
            groups[key] = [i, j, [], [], []]
            order.append(key)
        groups[key][2].append(1.0 / x)
        groups[key][3].append(cap)
        groups[key][4].append(row)

    lines = []
    for lid, key in enumerate(order):
        i, j, bs, caps, rows = groups[key]
        lines.append(Line(lid, i, j, math.fsum(bs), math.fsum(caps), tuple(rows)))

    buses = [
        Bus(k, original[k], gen[k] - load[k], gen[k], has_gen[k])
        for k in range(len(original))
    ]
    return PowerNetwork(buses, lines, name, base_mva)


# ---------------------------------------------------------------------------
# bundled fixtures and file loading
# ---------------------------------------------------------------------------

def bundled_cases() -> list[str]:
    root = resources.files("gridblocks") / "cases"
    return sorted(p.name[:-2] for p in root.iterdir() if p.name.endswith(".m"))


def load_case(source: str | Path) -> PowerNetwork:
    """Load a bundled case by name, or a ``.m`` / ``.json`` file by path."""
    path = Path(source)
    if path.suffix in (".m", ".json") and path.exists():
        text = path.read_text()
        if path.suffix == ".json":
            return from_json(text)
        return parse_matpower(text, name=path.stem)
    name = str(source)
    if name in bundled_cases():
        text = (resources.files("gridblocks") / "cases" / f"{name}.m").read_text()
        return parse_matpower(text, name=name)
    if path.exists():
        return parse_matpower(path.read_text(), name=path.stem)
    raise DataError(f"no bundled case or file named {name!r}; bundled: {', '.join(bundled_cases())}")


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def to_dict(net: PowerNetwork) -> dict:
    return {
        "name": net.name,
        "base_mva": net.base_mva,
        "buses": [
            {
                "id": b.id,
                "injection_mw": b.injection,
                "is_generator": b.is_generator,
                "original_id": b.original_id,
                "generation_mw": b.generation,
            }
            for b in net.buses
        ],
        "lines": [
            {
                "id": ln.id,
                "from": ln.from_bus,
                "to": ln.to_bus,
                "susceptance": ln.susceptance,
                "capacity_mw": None if math.isinf(ln.capacity) else ln.capacity,
                "merged_from": list(ln.merged_from),
            }
            for ln in net.lines
        ],
    }


def to_json(net: PowerNetwork) -> str:
    return json.dumps(to_dict(net), indent=1, sort_keys=True) + "\n"


def from_dict(data: Mapping) -> PowerNetwork:
    try:
        buses = [
            Bus(
                int(b["id"]),
                int(b.get("original_id", b["id"])),
                float(b["injection_mw"]),
                float(b.get("generation_mw", 0.0)),
                bool(b["is_generator"]),
            )
            for b in data["buses"]
        ]
        lines = [
            Line(
                int(e["id"]),
                int(e["from"]),
                int(e["to"]),
                float(e["susceptance"]),
                math.inf if e.get("capacity_mw") is None else float(e["capacity_mw"]),
                tuple(int(r) for r in e.get("merged_from", ())),
            )
            for e in data["lines"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad network JSON: {exc}") from None
    return PowerNetwork(buses, lines, str(data.get("name", "")), float(data.get("base_mva", 100.0)))


def from_json(text: str) -> PowerNetwork:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", exc.lineno) from None
    return from_dict(data)


def _preimage(target: float, fn, guess: float, exact: bool = False) -> float | None:
    """A float ``y`` near ``guess`` with ``fn(y) == target`` when one exists nearby."""
    if fn(guess) == target:
        return guess
    lo = hi = guess
    for _ in range(64):
        lo, hi = np.nextafter(lo, -np.inf), np.nextafter(hi, np.inf)
        for y in (lo, hi):
            if fn(float(y)) == target:
                return float(y)
    return None if exact else guess


def _reactances(b: float) -> list[float]:
    """Reactances of parallel rows whose merged susceptance is exactly ``b``."""
    x = _preimage(b, lambda y: 1.0 / y, 1.0 / b, exact=True)
    if x is not None:
        return [x]
    # no single float works; split b into two exactly representable halves
    b1 = b / 2
    for _ in range(256):
        b1 = float(np.nextafter(b1, np.inf))
        b2 = b - b1
        x1 = _preimage(b1, lambda y: 1.0 / y, 1.0 / b1, exact=True)
        x2 = _preimage(b2, lambda y: 1.0 / y, 1.0 / b2, exact=True)
        if x1 is not None and x2 is not None and math.fsum([1.0 / x1, 1.0 / x2]) == b:
            return [x1, x2]
    return [1.0 / b]


def write_matpower(net: PowerNetwork) -> str:
    """Serialize to MATPOWER text that :func:`parse_matpower` reads back.

    Each line becomes one branch row with ``x`` chosen so that ``1/x``
    reproduces the susceptance exactly. Generation and load are chosen so that
    ``Pg - Pd`` reproduces the injection.
    """
    out = [
        f"function mpc = {net.name or 'case'}",
        "mpc.version = '2';",
        f"mpc.baseMVA = {net.base_mva!r};",
        "%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin",
        "mpc.bus = [",
    ]
    gens = []
    for b in net.buses:
        if b.is_generator:
            g = b.generation
            pd = _preimage(b.injection, lambda y, g=g: g - y, g - b.injection)
            gens.append((b.original_id, g))
        else:
            pd = -b.injection
        btype = 2 if b.is_generator else 1
        out.append(f"\t{b.original_id}\t{btype}\t{pd!r}\t0\t0\t0\t1\t1\t0\t0\t1\t1.1\t0.9;")
    out.append("];")
    out.append("%\tbus\tPg\tQg\tQmax\tQmin\tVg\tmBase\tstatus")
    out.append("mpc.gen = [")
    for bid, g in gens:
        out.append(f"\t{bid}\t{g!r}\t0\t0\t0\t1\t{net.base_mva!r}\t1;")
    out.append("];")
    out.append("%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus")
    out.append("mpc.branch = [")
    for ln in net.lines:
        xs = _reactances(ln.susceptance)
        fb, tb = net.buses[ln.from_bus].original_id, net.buses[ln.to_bus].original_id
        for k, x in enumerate(xs):
            # capacity carried by the first row so the merge sum is exact
            rate = 0.0 if math.isinf(ln.capacity) else (ln.capacity if k == 0 else 0.0)
            out.append(f"\t{fb}\t{tb}\t0\t{x!r}\t0\t{rate!r}\t0\t0\t0\t0\t1;")
    out.append("];")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# balancing
# ---------------------------------------------------------------------------

def island_sums(p: np.ndarray, islands: Sequence[Sequence[int]]) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return np.array([math.fsum(p[list(I)]) for I in islands], dtype=float)


def rebalance(
    p: Sequence[float],
    net: PowerNetwork,
    mode: str = "proportional-generators",
    tol: float = 1e-6,
) -> np.ndarray:
    """Return injections balanced on every island of ``net``.

    Parameters
    ----------
    p : array_like
        Per-bus injections in MW.
    net : PowerNetwork
        Supplies islands, generator flags and generator outputs.
    mode : {"reject", "uniform-generators", "proportional-generators"}
        ``reject`` raises on any imbalance above ``tol``. The other modes
        subtract each island's imbalance from its generator buses, evenly or
        in proportion to ``|Pg|``. If all generators on an island have zero
        output the proportional mode falls back to an even split.
    tol : float
        Imbalance (MW) tolerated by ``reject`` mode. The correcting modes
        remove any imbalance above rounding noise.

    Raises
    ------
    BalanceError
        ``reject`` mode with an imbalanced island.
    UnbalanceableError
        An imbalanced island has no generator bus.
    """
    if mode not in REBALANCE_MODES:
        raise DataError(f"unknown rebalance mode {mode!r}; choose from {REBALANCE_MODES}")
    q = np.array(p, dtype=float)
    islands = net.islands()
    sums = island_sums(q, islands)
    if mode == "reject":
        bad = {k: float(s) for k, s in enumerate(sums) if abs(s) > tol}
        if bad:
            raise BalanceError(f"{len(bad)} island(s) imbalanced beyond {tol} MW", bad)
        return q
    # anything above rounding noise is corrected so the result is balanced to 1e-9
    bad = {k: float(s) for k, s in enumerate(sums) if abs(s) > _NOISE}
    gmask = net.generator_mask
    gen_out = np.array([abs(b.generation) for b in net.buses])
    for k, imbalance in bad.items():
        I = np.array(islands[k])
        gens = I[gmask[I]]
        if gens.size == 0:
            if abs(imbalance) <= BALANCED_TOL:
                continue
            raise UnbalanceableError(
                f"island containing bus {I[0]} has imbalance {imbalance:.6g} MW and no generator",
                {k: imbalance},
            )
        if mode == "proportional-generators" and gen_out[gens].sum() > 0:
            weights = gen_out[gens] / gen_out[gens].sum()
        else:
            weights = np.full(gens.size, 1.0 / gens.size)
        q[gens] -= imbalance * weights
        # absorb rounding residue at the largest participant
        residue = math.fsum(q[I])
        q[gens[int(np.argmax(weights))]] -= residue
        log.debug("island %d: spread %.6g MW over %d generator(s)", k, imbalance, gens.size)
    return q


def balanced_injections(net: PowerNetwork, mode: str = "proportional-generators", tol: float = 1e-6) -> np.ndarray:
    return rebalance(net.injections, net, mode, tol)
