"""Hierarchical HBM-style VDDQ PDN impedance model.

The network is assembled from measured/extracted lumped parameters: two
grid planes (chip and interposer) at unit-decap-cell granularity, a bump
array joining them, a TSV array down to a lumped package branch, and the
unit decap model used by the optimizer.  Everything is expressed through
:mod:`pdnopt.zkit` so the hierarchical cascade can be cross-checked against
a flattened nodal solve of the same element graph.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from importlib import resources
from math import log, pi, sqrt
from pathlib import Path

import numpy as np

from . import zkit
from .zkit import FrequencyGrid, Netlist, PortId, ZMatrixSeries

MU0 = 4e-7 * pi
EPS0 = 8.8541878128e-12

PRESET_NAMES = ("desk", "paper-full")


@dataclass(frozen=True)
class UnitCellParams:
    """Per-length plane parameters: R(f) = r0 + rf*sqrt(f), G(f) = g0 + gf*f."""

    r0: float      # ohm/m
    rf: float      # ohm/(m*sqrt(Hz))
    l: float       # H/m
    g0: float      # S/m
    gf: float      # S/(m*Hz)
    c: float       # F/m
    pitch: float   # m, unit-cell edge

    def __post_init__(self):
        if min(self.r0, self.rf, self.l, self.g0, self.gf, self.c) < 0:
            raise ValueError("per-length parameters must be nonnegative")
        if self.pitch <= 0:
            raise ValueError("pitch must be positive")


@dataclass(frozen=True)
class PiPairModel:
    """One interconnect pair as a 2-port pi circuit: series R-L, shunt C per side."""

    r: float
    l: float
    c: float


@dataclass(frozen=True)
class LumpedPairParams:
    """Lumped model values: bump/via/TSV pairs, package branch, unit decap."""

    r_mubump: float
    l_mubump: float
    c_mubump: float
    r_muvia: float
    l_muvia: float
    c_muvia: float
    r_tsv: float
    l_tsv: float
    c_tsv: float
    r_pkg: float
    l_pkg: float
    c_pkg: float
    c_decap: float
    esr_decap: float

    def __post_init__(self):
        values = [getattr(self, f) for f in self.__dataclass_fields__]
        if min(values) < 0:
            raise ValueError("lumped parameters must be nonnegative")
        if self.c_decap <= 0:
            raise ValueError("unit-decap capacitance must be positive")

    def mubump_pair(self) -> PiPairModel:
        return PiPairModel(self.r_mubump, self.l_mubump, self.c_mubump)

    def mubump_with_muvia_pair(self) -> PiPairModel:
        # Contact-via pi model folded into the bump 2-port: series R-L summed,
        # shunt C summed per side.
        return PiPairModel(
            self.r_mubump + self.r_muvia,
            self.l_mubump + self.l_muvia,
            self.c_mubump + self.c_muvia,
        )

    def tsv_pair(self) -> PiPairModel:
        return PiPairModel(self.r_tsv, self.l_tsv, self.c_tsv)


@dataclass(frozen=True)
class PdnGeometry:
    """Grid-world layout: plane sizes, probing region, bump and TSV placement."""

    name: str
    pitch: float
    chip_cols: int
    chip_rows: int
    interposer_cols: int
    interposer_rows: int
    phy: tuple[int, int, int, int]  # col0, row0, col1, row1 inclusive, chip layer
    mubump_pairs: tuple[tuple[tuple[int, int], tuple[int, int]], ...]
    tsv_pairs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        c0, r0, c1, r1 = self.phy
        if not (0 <= c0 <= c1 < self.chip_cols and 0 <= r0 <= r1 < self.chip_rows):
            raise ValueError("probing region must lie within the chip grid")
        for (cc, cr), (ic, ir) in self.mubump_pairs:
            if not (0 <= cc < self.chip_cols and 0 <= cr < self.chip_rows):
                raise ValueError(f"bump chip cell ({cc},{cr}) out of range")
            if not (0 <= ic < self.interposer_cols and 0 <= ir < self.interposer_rows):
                raise ValueError(f"bump interposer cell ({ic},{ir}) out of range")
        for ic, ir in self.tsv_pairs:
            if not (0 <= ic < self.interposer_cols and 0 <= ir < self.interposer_rows):
                raise ValueError(f"TSV cell ({ic},{ir}) out of range")

    def in_phy(self, col: int, row: int) -> bool:
        c0, r0, c1, r1 = self.phy
        return c0 <= col <= c1 and r0 <= row <= r1

    def probing_ports(self) -> list[PortId]:
        out = [
            PortId("chip", c, r, "probing-candidate")
            for r in range(self.chip_rows)
            for c in range(self.chip_cols)
            if self.in_phy(c, r)
        ]
        return sorted(out, key=PortId.sort_key)

    def decap_ports(self) -> list[PortId]:
        out = [
            PortId("chip", c, r, "decap-candidate")
            for r in range(self.chip_rows)
            for c in range(self.chip_cols)
            if not self.in_phy(c, r)
        ]
        out += [
            PortId("interposer", c, r, "decap-candidate")
            for r in range(self.interposer_rows)
            for c in range(self.interposer_cols)
        ]
        return sorted(out, key=PortId.sort_key)

    def external_ports(self) -> list[PortId]:
        return sorted(self.probing_ports() + self.decap_ports(), key=PortId.sort_key)

    def layer_extent(self, layer: str) -> tuple[int, int]:
        if layer == "chip":
            return self.chip_cols, self.chip_rows
        if layer == "interposer":
            return self.interposer_cols, self.interposer_rows
        raise ValueError(f"no grid extent for layer {layer!r}")


@dataclass(frozen=True)
class PdnPreset:
    """A named geometry plus all electrical parameters and raw metadata."""

    name: str
    geometry: PdnGeometry
    chip_uc: UnitCellParams
    interposer_uc: UnitCellParams
    lumped: LumpedPairParams
    metadata: dict

    def build(self, grid: FrequencyGrid, include_pkg: bool = True) -> ZMatrixSeries:
        return build_full_pdn(
            self.geometry, self.chip_uc, self.interposer_uc, self.lumped, grid,
            include_pkg=include_pkg,
        )


def uc_rlgc_at(params: UnitCellParams, f) -> tuple[np.ndarray, np.ndarray]:
    """Per-length series impedance Z'(f) and shunt admittance Y'(f)."""
    f = np.asarray(f, dtype=np.float64)
    if np.any(f <= 0):
        raise ValueError("frequency must be positive")
    w = 2.0 * pi * f
    z = (params.r0 + params.rf * np.sqrt(f)) + 1j * w * params.l
    y = (params.g0 + params.gf * f) + 1j * w * params.c
    return z, y


def unit_decap_z(params: LumpedPairParams, f) -> np.ndarray:
    """Series C-ESR model of one unit decap."""
    f = np.asarray(f, dtype=np.float64)
    if np.any(f <= 0):
        raise ValueError("frequency must be positive")
    return params.esr_decap + 1.0 / (1j * 2.0 * pi * f * params.c_decap)


def tsv_pair_params(
    diameter: float,
    height: float,
    pitch: float,
    conductivity: float,
    liner_thickness: float,
    liner_eps_r: float = 3.9,
) -> PiPairModel:
    """Closed-form lumped replacement for one P/G TSV pair.

    Resistance is the DC cylinder value doubled for the loop; inductance is
    twice (partial self minus partial mutual) of parallel cylinders; the
    capacitance is two oxide-liner coax capacitors in series.
    """
    if min(diameter, height, pitch) <= 0:
        raise ValueError("TSV dimensions must be positive")
    r = diameter / 2.0
    r_one = height / (conductivity * pi * r * r)
    l_self = (MU0 * height / (2.0 * pi)) * (log(2.0 * height / r) - 0.75)
    hp = height / pitch
    ph = pitch / height
    mutual = (MU0 * height / (2.0 * pi)) * (
        log(hp + sqrt(1.0 + hp * hp)) - sqrt(1.0 + ph * ph) + ph
    )
    c_one = 2.0 * pi * EPS0 * liner_eps_r * height / log((r + liner_thickness) / r)
    return PiPairModel(2.0 * r_one, 2.0 * (l_self - mutual), c_one / 2.0)


# --- Plane and array builders ----------------------------------------------

@dataclass(frozen=True)
class PlaneSpec:
    """One grid plane: lattice size plus the (port, cell) map to expose."""

    layer: str
    cols: int
    rows: int
    pitch: float
    ports: tuple[tuple[PortId, tuple[int, int]], ...]


def _plane_netlist(spec: PlaneSpec, params: UnitCellParams, node=lambda c, r: None) -> Netlist:
    if spec.cols < 1 or spec.rows < 1:
        raise ValueError("plane grid must be nonempty")
    if spec.pitch < params.pitch:
        raise ValueError("unit-decap cell cannot be smaller than the unit cell")
    # One lattice link spans a square slab of cell-pitch-wide channels in
    # parallel, so the per-length series value collapses to Z' * uc_pitch;
    # the per-cell shunt picks up the same parallelism factor.
    n_par = spec.pitch / params.pitch

    def series_z(f, p=params):
        return uc_rlgc_at(p, f)[0] * p.pitch

    def shunt_y(f, p=params, scale=spec.pitch * n_par):
        return uc_rlgc_at(p, f)[1] * scale

    net = Netlist()
    for r in range(spec.rows):
        for c in range(spec.cols):
            net.add("Y", node(c, r), zkit.REFERENCE_NODE, shunt_y)
            if c + 1 < spec.cols:
                net.add("Z", node(c, r), node(c + 1, r), series_z)
            if r + 1 < spec.rows:
                net.add("Z", node(c, r), node(c, r + 1), series_z)
    for port, (c, r) in spec.ports:
        if not (0 <= c < spec.cols and 0 <= r < spec.rows):
            raise ValueError(f"port cell ({c},{r}) outside plane grid")
        net.add_port(port, node(c, r))
    return net


def build_plane(spec: PlaneSpec, params: UnitCellParams, grid: FrequencyGrid) -> ZMatrixSeries:
    """Lumped pi lattice at unit-decap-cell granularity, one shunt per cell."""
    net = _plane_netlist(spec, params, node=lambda c, r: (spec.layer, c, r))
    return zkit.nodal_oracle(net, grid)


def pi_pair_2port(pair: PiPairModel, grid: FrequencyGrid) -> np.ndarray:
    """Closed-form Z of one pi pair, shape (F, 2, 2)."""
    w = 2.0 * pi * grid.points
    y_se = 1.0 / (pair.r + 1j * w * pair.l)
    y_sh = 1j * w * pair.c
    det = y_sh * (y_sh + 2.0 * y_se)
    z = np.empty((len(grid), 2, 2), dtype=np.complex128)
    z[:, 0, 0] = z[:, 1, 1] = (y_sh + y_se) / det
    z[:, 0, 1] = z[:, 1, 0] = y_se / det
    return z


def mubump_array_z(
    pair: PiPairModel,
    count: int,
    grid: FrequencyGrid,
    ports: list[tuple[PortId, PortId]] | None = None,
) -> ZMatrixSeries:
    """Block-diagonal extension of the 1-pair 2-port; zero coupling off-block.

    Ports are interleaved (top_0, bottom_0, top_1, bottom_1, ...).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if ports is None:
        ports = [
            (
                PortId("external", k, 0, "interconnect"),
                PortId("external", k, 1, "interconnect"),
            )
            for k in range(count)
        ]
    if len(ports) != count:
        raise ValueError("need one (top, bottom) port pair per block")
    block = pi_pair_2port(pair, grid)
    data = np.zeros((len(grid), 2 * count, 2 * count), dtype=np.complex128)
    for k in range(count):
        data[:, 2 * k : 2 * k + 2, 2 * k : 2 * k + 2] = block
    flat = [p for pair_ids in ports for p in pair_ids]
    return ZMatrixSeries(grid, flat, data)


def pkg_one_port(lumped: LumpedPairParams, grid: FrequencyGrid, port: PortId) -> ZMatrixSeries:
    """Lumped package branch: series R + jwL + 1/(jwC) to the ideal supply."""
    w = 2.0 * pi * grid.points
    z = lumped.r_pkg + 1j * w * lumped.l_pkg + 1.0 / (1j * w * lumped.c_pkg)
    return ZMatrixSeries(grid, [port], z.reshape(-1, 1, 1))


def merge_ports(z: ZMatrixSeries, merge: list[PortId], new_port: PortId) -> ZMatrixSeries:
    """Tie the listed ports into one node, exposed as ``new_port``.

    Done in the admittance domain: rows/columns of the merged set collapse
    into a single row/column.
    """
    idx = [z.port_index(p) for p in merge]
    keep = [i for i in range(z.nports) if i not in set(idx)]
    proj = np.zeros((z.nports, len(keep) + 1))
    for col, i in enumerate(keep):
        proj[i, col] = 1.0
    proj[idx, len(keep)] = 1.0
    y = np.linalg.inv(z.data)
    y2 = np.einsum("im,fij,jn->fmn", proj, y, proj, optimize=True)
    data = np.linalg.inv(y2)
    ports = [z.ports[i] for i in keep] + [new_port]
    return ZMatrixSeries(z.grid, ports, data)


def _chip_plane_spec(geom: PdnGeometry) -> PlaneSpec:
    ports = [(p, (p.column, p.row)) for p in geom.probing_ports()]
    ports += [
        (p, (p.column, p.row))
        for p in geom.decap_ports()
        if p.layer == "chip"
    ]
    ports += [
        (PortId("chip", k, -1, "interconnect"), cell)
        for k, (cell, _) in enumerate(geom.mubump_pairs)
    ]
    return PlaneSpec("chip", geom.chip_cols, geom.chip_rows, geom.pitch, tuple(ports))


def _interposer_plane_spec(geom: PdnGeometry) -> PlaneSpec:
    ports = [
        (p, (p.column, p.row))
        for p in geom.decap_ports()
        if p.layer == "interposer"
    ]
    ports += [
        (PortId("interposer", k, -1, "interconnect"), cell)
        for k, (_, cell) in enumerate(geom.mubump_pairs)
    ]
    ports += [
        (PortId("interposer", j, -2, "interconnect"), cell)
        for j, cell in enumerate(geom.tsv_pairs)
    ]
    return PlaneSpec(
        "interposer", geom.interposer_cols, geom.interposer_rows, geom.pitch, tuple(ports)
    )


def build_full_pdn(
    geom: PdnGeometry,
    chip_uc: UnitCellParams,
    interposer_uc: UnitCellParams,
    lumped: LumpedPairParams,
    grid: FrequencyGrid,
    include_pkg: bool = True,
) -> ZMatrixSeries:
    """Full-port Z of the hierarchical PDN via component cascading.

    Chip plane, bump array (with folded contact vias), interposer plane, TSV
    array with merged bottoms, and the package branch are cascaded in turn.
    External ports are the probing and decap candidates in canonical order.
    """
    nb = len(geom.mubump_pairs)
    nt = len(geom.tsv_pairs)
    if nb < 1 or nt < 1:
        raise ValueError("geometry needs at least one bump pair and one TSV pair")

    chip = build_plane(_chip_plane_spec(geom), chip_uc, grid)
    bumps = mubump_array_z(lumped.mubump_with_muvia_pair(), nb, grid)
    s = zkit.cascade(
        chip,
        bumps,
        [
            (PortId("chip", k, -1, "interconnect"), PortId("external", k, 0, "interconnect"))
            for k in range(nb)
        ],
    )
    ipos = build_plane(_interposer_plane_spec(geom), interposer_uc, grid)
    s = zkit.cascade(
        s,
        ipos,
        [
            (PortId("external", k, 1, "interconnect"), PortId("interposer", k, -1, "interconnect"))
            for k in range(nb)
        ],
    )
    tsv_ports = [
        (
            PortId("external", j, 2, "interconnect"),
            PortId("external", j, 3, "interconnect"),
        )
        for j in range(nt)
    ]
    tsvs = mubump_array_z(lumped.tsv_pair(), nt, grid, ports=tsv_ports)
    merged_port = PortId("external", 0, 4, "interconnect")
    tsvs = merge_ports(tsvs, [b for _, b in tsv_ports], merged_port)
    s = zkit.cascade(
        s,
        tsvs,
        [
            (PortId("interposer", j, -2, "interconnect"), t)
            for j, (t, _) in enumerate(tsv_ports)
        ],
    )
    if include_pkg:
        pkg_port = PortId("external", 0, 5, "interconnect")
        pkg = pkg_one_port(lumped, grid, pkg_port)
        s = zkit.cascade(s, pkg, [(merged_port, pkg_port)])
    return zkit.subselect(s, geom.external_ports())


def full_pdn_netlist(
    geom: PdnGeometry,
    chip_uc: UnitCellParams,
    interposer_uc: UnitCellParams,
    lumped: LumpedPairParams,
    include_pkg: bool = True,
) -> Netlist:
    """The same PDN as one flat element graph, for oracle cross-checks."""
    chip_spec = _chip_plane_spec(geom)
    ipos_spec = _interposer_plane_spec(geom)
    net = Netlist()

    def chip_node(c, r):
        return ("chip", c, r)

    def ipos_node(c, r):
        return ("interposer", c, r)

    for part in (
        _plane_netlist(chip_spec, chip_uc, node=chip_node),
        _plane_netlist(ipos_spec, interposer_uc, node=ipos_node),
    ):
        net.elements.extend(part.elements)

    bump = lumped.mubump_with_muvia_pair()
    for (cc, cr), (ic, ir) in geom.mubump_pairs:
        net.add("Z", chip_node(cc, cr), ipos_node(ic, ir),
                lambda f, p=bump: p.r + 1j * 2.0 * pi * f * p.l)
        net.add("C", chip_node(cc, cr), zkit.REFERENCE_NODE, bump.c)
        net.add("C", ipos_node(ic, ir), zkit.REFERENCE_NODE, bump.c)

    tsv = lumped.tsv_pair()
    pkg_top = ("pkg", 0, 0)
    for ic, ir in geom.tsv_pairs:
        net.add("Z", ipos_node(ic, ir), pkg_top,
                lambda f, p=tsv: p.r + 1j * 2.0 * pi * f * p.l)
        net.add("C", ipos_node(ic, ir), zkit.REFERENCE_NODE, tsv.c)
        net.add("C", pkg_top, zkit.REFERENCE_NODE, tsv.c)
    if include_pkg:
        net.add("Z", pkg_top, zkit.REFERENCE_NODE,
                lambda f, p=lumped: p.r_pkg + 1j * 2.0 * pi * f * p.l_pkg
                + 1.0 / (1j * 2.0 * pi * f * p.c_pkg))

    for port in geom.external_ports():
        node = chip_node(port.column, port.row) if port.layer == "chip" \
            else ipos_node(port.column, port.row)
        net.add_port(port, node)
    return net


# --- Preset files ------------------------------------------------------------

def desk_geometry(
    chip_cols: int = 8,
    chip_rows: int = 8,
    interposer_cols: int = 4,
    interposer_rows: int = 8,
    name: str = "desk",
    pitch: float = 375e-6,
) -> PdnGeometry:
    """Reduced desk-scale geometry with lattice bump/TSV placement.

    Probing candidates fill the first chip column; bump pairs sit on every
    other cell of the right chip half, keeping the probing region coupled to
    the bath only through the plane; TSV pairs form a coarse lattice on the
    interposer.
    """
    phy = (0, 0, 0, chip_rows - 1)
    half = chip_cols // 2
    bumps = []
    for r in range(0, chip_rows, 2):
        for c in range(half, chip_cols, 2):
            ic = min((c - half) * interposer_cols // max(1, chip_cols - half),
                     interposer_cols - 1)
            ir = min(r * interposer_rows // chip_rows, interposer_rows - 1)
            bumps.append(((c, r), (ic, ir)))
    tsvs = []
    for r in range(1, interposer_rows, 4):
        for c in range(interposer_cols):
            tsvs.append((c, r))
    if not tsvs:
        tsvs = [(0, interposer_rows - 1)]
    return PdnGeometry(
        name=name,
        pitch=pitch,
        chip_cols=chip_cols,
        chip_rows=chip_rows,
        interposer_cols=interposer_cols,
        interposer_rows=interposer_rows,
        phy=phy,
        mubump_pairs=tuple(bumps),
        tsv_pairs=tuple(tsvs),
    )


def _parse_pairs(text: str):
    out = []
    for line in text.strip().splitlines():
        left, right = line.split("->")
        cc, cr = (int(v) for v in left.strip().split(","))
        ic, ir = (int(v) for v in right.strip().split(","))
        out.append(((cc, cr), (ic, ir)))
    return tuple(out)


def _parse_sites(text: str):
    out = []
    for line in text.strip().splitlines():
        c, r = (int(v) for v in line.strip().split(","))
        out.append((c, r))
    return tuple(out)


def _uc_from_section(sec) -> UnitCellParams:
    return UnitCellParams(
        r0=float(sec["r0"]),
        rf=float(sec["rf"]),
        l=float(sec["l"]),
        g0=float(sec["g0"]),
        gf=float(sec["gf"]),
        c=float(sec["c"]),
        pitch=float(sec["pitch"]),
    )


def preset_path(name: str) -> Path:
    fname = name.replace("-", "_") + ".ini"
    return Path(resources.files("pdnopt") / "presets" / fname)


def load_preset(source: str | Path) -> PdnPreset:
    """Load a named preset ('desk', 'paper-full') or an explicit config path."""
    path = Path(source)
    if not path.suffix:
        path = preset_path(str(source))
    if not path.exists():
        raise FileNotFoundError(f"no preset config at {path}")
    cfg = configparser.ConfigParser()
    cfg.read(path)
    name = cfg["preset"]["name"]
    g = cfg["geometry"]
    pitch = float(g["pitch"])
    phy = tuple(int(v) for v in g["phy"].split(","))
    geometry = PdnGeometry(
        name=name,
        pitch=pitch,
        chip_cols=int(g["chip_cols"]),
        chip_rows=int(g["chip_rows"]),
        interposer_cols=int(g["interposer_cols"]),
        interposer_rows=int(g["interposer_rows"]),
        phy=phy,  # type: ignore[arg-type]
        mubump_pairs=_parse_pairs(cfg["geometry.mubumps"]["pairs"]),
        tsv_pairs=_parse_sites(cfg["geometry.tsvs"]["sites"]),
    )
    lu = cfg["lumped"]
    lumped = LumpedPairParams(**{k: float(v) for k, v in lu.items()})
    return PdnPreset(
        name=name,
        geometry=geometry,
        chip_uc=_uc_from_section(cfg["chip_plane"]),
        interposer_uc=_uc_from_section(cfg["interposer_plane"]),
        lumped=lumped,
        metadata=dict(cfg["metadata"]) if cfg.has_section("metadata") else {},
    )
