"""The decap n/m problem environment.

A problem instance is 4 probing ports plus n decap candidate ports drawn
from a PDN, carried as normalized feature vectors together with the
subselected impedance matrix.  The reward is the weighted mean reduction of
the 10 self- and transfer-impedance magnitudes at the probing ports, summed
over the frequency grid.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from . import pdn_model, zkit
from .pdn_model import LumpedPairParams, PdnGeometry
from .zkit import FrequencyGrid, PortId, ZMatrixSeries

PROBING_COUNT = 4
TRANSFER_PAIRS = tuple(combinations(range(PROBING_COUNT), 2))

DATASET_MAGIC = b"PDNDS1"
DATASET_VERSION = 1


class CapacityError(ValueError):
    """Requested more ports than the geometry provides."""


class DatasetFormatError(ValueError):
    """Dataset file is corrupt or has an unexpected magic/version."""


def normalized_features(port: PortId, geometry: PdnGeometry) -> tuple[float, float, float, float]:
    """(x, y, z, isProbingPort) with grid coordinates scaled into [0, 1]."""
    cols, rows = geometry.layer_extent(port.layer)
    x = port.column / (cols - 1) if cols > 1 else 0.0
    y = port.row / (rows - 1) if rows > 1 else 0.0
    z = 0.0 if port.layer == "chip" else 1.0
    return (x, y, z, 1.0 if port.role == "probing-candidate" else 0.0)


@dataclass(frozen=True)
class State:
    """Feature vectors of the 4 probing ports and n candidates, probing first."""

    features: np.ndarray           # (4 + n, 4) float64
    ports: tuple[PortId, ...]      # backing ports, probing first

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "ports", tuple(self.ports))
        if feats.ndim != 2 or feats.shape[1] != 4 or feats.shape[0] != len(self.ports):
            raise ValueError("features must be (4 + n) x 4 and match the port list")
        if feats.shape[0] < PROBING_COUNT:
            raise ValueError("a state needs 4 probing ports")
        if not np.all(feats[:PROBING_COUNT, 3] == 1.0) or np.any(feats[PROBING_COUNT:, 3] != 0.0):
            raise ValueError("probing flag must mark exactly the first 4 rows")
        feats.flags.writeable = False

    @property
    def n(self) -> int:
        return self.features.shape[0] - PROBING_COUNT

    @property
    def candidate_ports(self) -> tuple[PortId, ...]:
        return self.ports[PROBING_COUNT:]


@dataclass(frozen=True)
class RewardConfig:
    """Weighting of self vs transfer reduction and the evaluation grid."""

    grid: FrequencyGrid
    alpha_r: float = 0.7

    def __post_init__(self):
        if not 0.0 <= self.alpha_r <= 1.0:
            raise ValueError("alpha_r must lie in [0, 1]")


@dataclass(frozen=True)
class DatasetRecord:
    state: State
    z_s: ZMatrixSeries

    def __post_init__(self):
        if self.z_s.ports != self.state.ports:
            raise ValueError("record matrix ports must match the state ports")


def random_state(geometry: PdnGeometry, n: int, rng) -> State:
    """Sample 4 probing ports and n candidates uniformly without replacement."""
    rng = np.random.default_rng(rng)
    probing = geometry.probing_ports()
    candidates = geometry.decap_ports()
    if len(probing) < PROBING_COUNT:
        raise CapacityError(f"geometry has only {len(probing)} probing candidates")
    if n > len(candidates):
        raise CapacityError(f"n={n} exceeds the {len(candidates)} decap candidates")
    p_sel = [probing[i] for i in rng.choice(len(probing), PROBING_COUNT, replace=False)]
    c_sel = [candidates[i] for i in rng.choice(len(candidates), n, replace=False)]
    ports = tuple(p_sel + c_sel)
    feats = np.array([normalized_features(p, geometry) for p in ports])
    return State(feats, ports)


def make_record(z_fp: ZMatrixSeries, state: State) -> DatasetRecord:
    return DatasetRecord(state, zkit.subselect(z_fp, state.ports))


def reward(
    record: DatasetRecord,
    assignment: list[int] | tuple[int, ...] | np.ndarray,
    cfg: RewardConfig,
    decap: LumpedPairParams,
) -> float:
    """Weighted self/transfer impedance reduction for an assignment.

    ``assignment`` holds distinct candidate indices (0-based into the state's
    candidate list); order does not affect the value since all decaps are
    identical shunts.
    """
    idx = [int(a) for a in assignment]
    if len(set(idx)) != len(idx):
        raise ValueError("assignment positions must be distinct")
    if any(a < 0 or a >= record.state.n for a in idx):
        raise ValueError("assignment index out of range")
    if record.z_s.grid != cfg.grid:
        raise zkit.GridMismatchError("record and reward config use different grids")
    if not idx:
        return 0.0
    zd = pdn_model.unit_decap_z(decap, cfg.grid.points)
    positions = [record.state.ports[PROBING_COUNT + a] for a in idx]
    z0 = record.z_s
    zw = zkit.attach_decaps(z0, positions, zd)
    r_self = 0.0
    for i in range(PROBING_COUNT):
        r_self += float(np.sum(np.abs(z0.data[:, i, i]) - np.abs(zw.data[:, i, i])))
    r_transfer = 0.0
    for i, j in TRANSFER_PAIRS:
        r_transfer += float(np.sum(np.abs(z0.data[:, i, j]) - np.abs(zw.data[:, i, j])))
    return cfg.alpha_r * r_self / PROBING_COUNT \
        + (1.0 - cfg.alpha_r) * r_transfer / len(TRANSFER_PAIRS)


@dataclass
class DecapEnvironment:
    """Everything needed to pose and score decap n/m instances on one PDN."""

    geometry: PdnGeometry
    z_fp: ZMatrixSeries
    reward_cfg: RewardConfig
    decap: LumpedPairParams

    def sample_records(self, rng, count: int, n: int) -> list[DatasetRecord]:
        rng = np.random.default_rng(rng)
        return [make_record(self.z_fp, random_state(self.geometry, n, rng))
                for _ in range(count)]

    def reward(self, record: DatasetRecord, assignment) -> float:
        return reward(record, assignment, self.reward_cfg, self.decap)


# --- Dataset persistence -----------------------------------------------------
#
# Little-endian binary layout:
#   magic "PDNDS1" | version u16 | record count u32 | n u32 | F u32
#   | grid float64[F]
#   per record: (4+n) x 4 float64 features, then F x (4+n) x (4+n) complex128
#   entries (re, im interleaved), row-major.
# A sidecar <path>.manifest.json records preset name, seed, and checksum.

def _manifest_path(path: Path) -> Path:
    return path.with_name(path.name + ".manifest.json")


def save_dataset(
    records: list[DatasetRecord],
    path: str | Path,
    geometry: PdnGeometry,
    seed=None,
) -> Path:
    if not records:
        raise ValueError("cannot save an empty dataset")
    n = records[0].state.n
    grid = records[0].z_s.grid
    if any(r.state.n != n or r.z_s.grid != grid for r in records):
        raise ValueError("all records must share one grid and one n")
    path = Path(path)
    blob = bytearray()
    blob += DATASET_MAGIC
    blob += struct.pack("<HIII", DATASET_VERSION, len(records), n, len(grid))
    blob += grid.points.astype("<f8").tobytes()
    for rec in records:
        blob += rec.state.features.astype("<f8").tobytes()
        blob += rec.z_s.data.astype("<c16").tobytes()
    path.write_bytes(blob)
    manifest = {
        "preset": geometry.name,
        "seed": seed,
        "records": len(records),
        "n": n,
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    _manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _port_from_features(feat: np.ndarray, geometry: PdnGeometry) -> PortId:
    probing = feat[3] == 1.0
    layer = "chip" if feat[2] == 0.0 else "interposer"
    cols, rows = geometry.layer_extent(layer)
    col = int(round(feat[0] * (cols - 1))) if cols > 1 else 0
    row = int(round(feat[1] * (rows - 1))) if rows > 1 else 0
    return PortId(layer, col, row, "probing-candidate" if probing else "decap-candidate")


def load_dataset(path: str | Path, geometry: PdnGeometry | None = None) -> list[DatasetRecord]:
    """Read a dataset file; the geometry defaults to the manifest's preset."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 6 + struct.calcsize("<HIII"):
        raise DatasetFormatError("file truncated before header end")
    if blob[:6] != DATASET_MAGIC:
        raise DatasetFormatError("bad magic; not a dataset file")
    version, count, n, nf = struct.unpack_from("<HIII", blob, 6)
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    if geometry is None:
        manifest = json.loads(_manifest_path(path).read_text())
        geometry = pdn_model.load_preset(manifest["preset"]).geometry
    off = 6 + struct.calcsize("<HIII")
    npts = np.frombuffer(blob, dtype="<f8", count=nf, offset=off).copy()
    grid = FrequencyGrid(npts)
    off += nf * 8
    nn = PROBING_COUNT + n
    feat_bytes = nn * 4 * 8
    z_bytes = nf * nn * nn * 16
    if len(blob) != off + count * (feat_bytes + z_bytes):
        raise DatasetFormatError("file size does not match the header")
    records = []
    for _ in range(count):
        feats = np.frombuffer(blob, dtype="<f8", count=nn * 4, offset=off).reshape(nn, 4).copy()
        off += feat_bytes
        data = np.frombuffer(blob, dtype="<c16", count=nf * nn * nn, offset=off)
        data = data.reshape(nf, nn, nn).copy()
        off += z_bytes
        ports = tuple(_port_from_features(f, geometry) for f in feats)
        state = State(feats, ports)
        records.append(DatasetRecord(state, ZMatrixSeries(grid, ports, data)))
    return records
