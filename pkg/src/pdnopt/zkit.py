"""Frequency-swept complex multiport network algebra.

Networks are stored as Z-parameter matrices sampled on a shared logarithmic
frequency grid.  The module provides construction, cascading of two networks
by enforcing voltage/current continuity at paired ports (the segmentation
method), shunt attachment of decoupling capacitors, port subselection, and an
independent nodal-analysis oracle used to verify the algebraic operations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterable, Sequence

import numpy as np

LAYERS = ("chip", "interposer", "external")
ROLES = ("probing-candidate", "decap-candidate", "interconnect")

_LAYER_RANK = {name: i for i, name in enumerate(LAYERS)}
_ROLE_RANK = {name: i for i, name in enumerate(ROLES)}

REFERENCE_NODE = 0


class InvalidRangeError(ValueError):
    """Frequency bounds are non-positive or inverted."""


class GridMismatchError(ValueError):
    """Two series do not share the same frequency grid."""


class CascadeSingularityError(RuntimeError):
    """The interconnect block Zpp + Zqq is singular at some frequency."""

    def __init__(self, freq_index: int):
        super().__init__(f"interconnect block singular at frequency index {freq_index}")
        self.freq_index = freq_index


class NoSuchPortError(KeyError):
    """A referenced port is not present in the series."""


class InvalidSelectionError(ValueError):
    """Port selection contains duplicates or unknown ports."""


class SingularSystemError(RuntimeError):
    """Nodal system is singular (typically a floating subgraph)."""


@dataclass(frozen=True)
class FrequencyGrid:
    """Strictly increasing, geometrically spaced frequency samples in Hz."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        object.__setattr__(self, "points", pts)
        if pts.ndim != 1 or pts.size == 0:
            raise InvalidRangeError("grid needs at least one frequency point")
        if np.any(pts <= 0.0):
            raise InvalidRangeError("all frequencies must be positive")
        if pts.size > 1:
            if np.any(np.diff(pts) <= 0.0):
                raise InvalidRangeError("frequencies must be strictly increasing")
            ratios = pts[1:] / pts[:-1]
            if np.max(np.abs(ratios - ratios[0])) > 1e-12 * ratios[0]:
                raise InvalidRangeError("grid spacing is not logarithmic")
        pts.flags.writeable = False

    def __len__(self) -> int:
        return self.points.size

    def __eq__(self, other) -> bool:
        return isinstance(other, FrequencyGrid) and np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash((self.points.size, float(self.points[0]), float(self.points[-1])))


def build_frequency_grid(f_min: float, f_max: float, count: int) -> FrequencyGrid:
    """Geometric grid with exact endpoints; count = 1 requires f_min == f_max."""
    if f_min <= 0.0 or f_max < f_min:
        raise InvalidRangeError(f"invalid frequency range [{f_min}, {f_max}]")
    if count < 1:
        raise InvalidRangeError("count must be >= 1")
    if count == 1:
        if f_min != f_max:
            raise InvalidRangeError("a single-point grid requires f_min == f_max")
        return FrequencyGrid(np.array([f_min]))
    pts = np.exp(np.linspace(np.log(f_min), np.log(f_max), count))
    pts[0] = f_min
    pts[-1] = f_max
    return FrequencyGrid(pts)


@dataclass(frozen=True)
class PortId:
    """Grid-world port identity: layer, (column, row) in unit-cell units, role."""

    layer: str
    column: int
    row: int
    role: str

    def __post_init__(self):
        if self.layer not in _LAYER_RANK:
            raise ValueError(f"unknown layer {self.layer!r}")
        if self.role not in _ROLE_RANK:
            raise ValueError(f"unknown role {self.role!r}")

    def sort_key(self):
        # Canonical (layer, row, column, role) order keeps dataset files
        # byte-reproducible across runs.
        return (_LAYER_RANK[self.layer], self.row, self.column, _ROLE_RANK[self.role])

    def __repr__(self):
        return f"PortId({self.layer}:{self.column},{self.row}:{self.role})"


class ZMatrixSeries:
    """Complex N x N impedance matrix per frequency, immutable after build.

    ``data`` has shape (F, N, N) with N == len(ports); entries are in ohms.
    """

    __slots__ = ("grid", "ports", "data", "_index")

    def __init__(self, grid: FrequencyGrid, ports: Sequence[PortId], data: np.ndarray):
        data = np.ascontiguousarray(data, dtype=np.complex128)
        ports = tuple(ports)
        if len(set(ports)) != len(ports):
            raise InvalidSelectionError("ports must be unique within one series")
        if data.shape != (len(grid), len(ports), len(ports)):
            raise ValueError(
                f"data shape {data.shape} does not match "
                f"(F={len(grid)}, N={len(ports)})"
            )
        data.flags.writeable = False
        self.grid = grid
        self.ports = ports
        self.data = data
        self._index = {p: i for i, p in enumerate(ports)}

    @property
    def nports(self) -> int:
        return len(self.ports)

    def port_index(self, port: PortId) -> int:
        try:
            return self._index[port]
        except KeyError:
            raise NoSuchPortError(port) from None

    def entry(self, a: PortId, b: PortId) -> np.ndarray:
        """Z_ab(f) as a 1-D complex array over the grid."""
        return self.data[:, self.port_index(a), self.port_index(b)]


def reciprocity_error(z: ZMatrixSeries) -> float:
    """Max relative asymmetry ||Z - Z^T|| / ||Z|| over the grid (Frobenius)."""
    diff = np.linalg.norm(z.data - np.transpose(z.data, (0, 2, 1)), axis=(1, 2))
    norm = np.linalg.norm(z.data, axis=(1, 2))
    return float(np.max(diff / np.where(norm > 0.0, norm, 1.0)))


def min_diagonal_real(z: ZMatrixSeries) -> float:
    """Smallest Re(Z_ii) over all ports and frequencies (passivity surrogate)."""
    diag = np.diagonal(z.data, axis1=1, axis2=2)
    return float(np.min(diag.real))


def _check_same_grid(a: ZMatrixSeries, b: ZMatrixSeries):
    if a.grid != b.grid:
        raise GridMismatchError("series are sampled on different frequency grids")


def _solve_interconnect(m: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Batched solve of the interconnect system, locating the singular slice."""
    try:
        return np.linalg.solve(m, rhs)
    except np.linalg.LinAlgError:
        for k in range(m.shape[0]):
            try:
                np.linalg.solve(m[k], rhs[k])
            except np.linalg.LinAlgError:
                raise CascadeSingularityError(k) from None
        raise


def cascade(
    a: ZMatrixSeries,
    b: ZMatrixSeries,
    pairing: Sequence[tuple[PortId, PortId]],
) -> ZMatrixSeries:
    """Connect ``a`` and ``b`` at paired ports and eliminate the pairs.

    The paired ports (p in ``a``, q in ``b``) are joined by enforcing equal
    voltage and opposite current.  Result ports are a's externals followed by
    b's externals.  With an empty pairing the result is the block-diagonal
    union of the two networks.
    """
    _check_same_grid(a, b)
    pa = [a.port_index(p) for p, _ in pairing]
    qb = [b.port_index(q) for _, q in pairing]
    if len(set(pa)) != len(pa) or len(set(qb)) != len(qb):
        raise InvalidSelectionError("pairing must not repeat ports")
    ea = [i for i in range(a.nports) if i not in set(pa)]
    eb = [i for i in range(b.nports) if i not in set(qb)]

    f_idx = np.arange(len(a.grid))
    za, zb = a.data, b.data
    nf, na, nb = len(a.grid), len(ea), len(eb)
    out = np.empty((nf, na + nb, na + nb), dtype=np.complex128)

    if pa:
        zpp = za[np.ix_(f_idx, pa, pa)]
        zqq = zb[np.ix_(f_idx, qb, qb)]
        zap = za[np.ix_(f_idx, ea, pa)]
        zpa = za[np.ix_(f_idx, pa, ea)]
        zbq = zb[np.ix_(f_idx, eb, qb)]
        zqb = zb[np.ix_(f_idx, qb, eb)]
        # Boundary conditions V_p = V_q, I_p = -I_q give the Schur update
        # through K = (Zpp + Zqq)^-1.
        w_a = _solve_interconnect(zpp + zqq, zpa)
        w_b = _solve_interconnect(zpp + zqq, zqb)
        out[:, :na, :na] = za[np.ix_(f_idx, ea, ea)] - zap @ w_a
        out[:, :na, na:] = zap @ w_b
        out[:, na:, :na] = zbq @ w_a
        out[:, na:, na:] = zb[np.ix_(f_idx, eb, eb)] - zbq @ w_b
    else:
        out[:, :na, :na] = za[np.ix_(f_idx, ea, ea)]
        out[:, :na, na:] = 0.0
        out[:, na:, :na] = 0.0
        out[:, na:, na:] = zb[np.ix_(f_idx, eb, eb)]

    ports = [a.ports[i] for i in ea] + [b.ports[i] for i in eb]
    return ZMatrixSeries(a.grid, ports, out)


def attach_decaps(
    z: ZMatrixSeries,
    positions: Sequence[PortId],
    decap_z,
) -> ZMatrixSeries:
    """Attach one shunt impedance ``decap_z`` at each position, keeping all ports.

    ``decap_z`` is the per-frequency impedance of one decap: a scalar or an
    array over the grid.  Equivalent to stamping the shunt admittance into the
    nodal system; ports are not consumed.
    """
    idx = [z.port_index(p) for p in positions]
    if len(set(idx)) != len(idx):
        raise InvalidSelectionError("decap positions must be distinct")
    if not idx:
        return z
    zd = np.broadcast_to(np.asarray(decap_z, dtype=np.complex128), (len(z.grid),))

    f_idx = np.arange(len(z.grid))
    zdd = z.data[np.ix_(f_idx, idx, idx)].copy()
    k = len(idx)
    zdd[:, np.arange(k), np.arange(k)] += zd[:, None]
    zda = z.data[:, idx, :]
    try:
        w = np.linalg.solve(zdd, zda)
    except np.linalg.LinAlgError:
        raise CascadeSingularityError(_first_singular(zdd)) from None
    out = z.data - z.data[:, :, idx] @ w
    return ZMatrixSeries(z.grid, z.ports, out)


def _first_singular(m: np.ndarray) -> int:
    for k in range(m.shape[0]):
        if not np.isfinite(np.linalg.cond(m[k])) or np.linalg.cond(m[k]) > 1e300:
            return k
    return 0


def subselect(z: ZMatrixSeries, ports: Sequence[PortId]) -> ZMatrixSeries:
    """Restrict and reorder to ``ports``; unselected ports are left open."""
    ports = tuple(ports)
    if len(set(ports)) != len(ports):
        raise InvalidSelectionError("selection contains duplicate ports")
    try:
        idx = [z.port_index(p) for p in ports]
    except NoSuchPortError as exc:
        raise InvalidSelectionError(f"unknown port {exc.args[0]}") from None
    data = z.data[np.ix_(np.arange(len(z.grid)), idx, idx)]
    return ZMatrixSeries(z.grid, ports, data)


# --- Nodal-analysis oracle -------------------------------------------------
#
# The oracle is deliberately independent of the cascade algebra above: it
# assembles the complex admittance system of an element graph per frequency
# and solves it with unit current injections, one per port.

@dataclass(frozen=True)
class Element:
    """Two-terminal element between nodes n1 and n2 (node 0 is the reference).

    kind 'R' (ohm), 'L' (henry), 'C' (farad) take a float value; kind 'Z' and
    'Y' take a callable mapping a frequency array to complex impedance or
    admittance.
    """

    kind: str
    n1: Hashable
    n2: Hashable
    value: float | Callable[[np.ndarray], np.ndarray]

    def admittance(self, f: np.ndarray) -> np.ndarray:
        w = 2.0 * np.pi * f
        if self.kind == "R":
            return np.full_like(f, 1.0 / self.value, dtype=np.complex128)
        if self.kind == "L":
            return 1.0 / (1j * w * self.value)
        if self.kind == "C":
            return 1j * w * self.value
        if self.kind == "Z":
            return 1.0 / np.asarray(self.value(f), dtype=np.complex128)
        if self.kind == "Y":
            return np.asarray(self.value(f), dtype=np.complex128)
        raise ValueError(f"unknown element kind {self.kind!r}")


@dataclass
class Netlist:
    """Element graph with designated ports, each port a (PortId, node) pair."""

    elements: list[Element] = field(default_factory=list)
    ports: list[tuple[PortId, Hashable]] = field(default_factory=list)

    def add(self, kind: str, n1: Hashable, n2: Hashable, value) -> "Netlist":
        self.elements.append(Element(kind, n1, n2, value))
        return self

    def add_port(self, port: PortId, node: Hashable) -> "Netlist":
        self.ports.append((port, node))
        return self


def nodal_oracle(netlist: Netlist, grid: FrequencyGrid) -> ZMatrixSeries:
    """Exact multiport Z of the element graph by nodal analysis per frequency."""
    port_ids = [p for p, _ in netlist.ports]
    if len(set(port_ids)) != len(port_ids):
        raise InvalidSelectionError("ports must be distinct")
    nodes = sorted(
        {n for e in netlist.elements for n in (e.n1, e.n2) if n != REFERENCE_NODE}
        | {n for _, n in netlist.ports if n != REFERENCE_NODE},
        key=repr,
    )
    node_idx = {n: i for i, n in enumerate(nodes)}
    nn = len(nodes)
    f = grid.points
    y = np.zeros((len(grid), nn, nn), dtype=np.complex128)
    for e in netlist.elements:
        ye = e.admittance(f)
        i = node_idx.get(e.n1)
        j = node_idx.get(e.n2)
        if i is not None:
            y[:, i, i] += ye
        if j is not None:
            y[:, j, j] += ye
        if i is not None and j is not None:
            y[:, i, j] -= ye
            y[:, j, i] -= ye

    rhs = np.zeros((nn, len(netlist.ports)), dtype=np.complex128)
    for c, (_, node) in enumerate(netlist.ports):
        if node == REFERENCE_NODE:
            raise InvalidSelectionError("a port cannot sit on the reference node")
        rhs[node_idx[node], c] = 1.0
    try:
        v = np.linalg.solve(y, np.broadcast_to(rhs, (len(grid), nn, len(netlist.ports))))
    except np.linalg.LinAlgError:
        raise SingularSystemError(
            "nodal system singular; a subgraph is likely floating"
        ) from None
    rows = [node_idx[node] for _, node in netlist.ports]
    z = v[:, rows, :]
    return ZMatrixSeries(grid, port_ids, z)
