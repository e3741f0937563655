"""Attention encoder-decoder policy over decap assignment sequences.

The encoder embeds the 4 probing ports and n candidates through stacked
multi-head attention and feed-forward sublayers with residual connections.
The decoder builds a context query from the previous assignment, the four
probing embeddings and the mean embedding, refines it with a multi-head
glimpse over the candidate embeddings, and scores candidates with a single
tanh-clipped attention head; visited positions are masked to -inf so their
probabilities are exact zeros.  All weights are shared across nodes and
across decoding steps, which is what makes the network reusable on new port
layouts and scalable in both n and m.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from math import sqrt
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PROBING_COUNT = 4
CHECKPOINT_MAGIC = b"PDNPOL1"


class InfeasibleError(ValueError):
    """Asked to assign more decaps than there are candidates."""


class ExhaustedActionsError(RuntimeError):
    """Every candidate is already masked."""


class CheckpointFormatError(ValueError):
    """Checkpoint file is corrupt or inconsistent with its config."""


@dataclass(frozen=True)
class PolicyConfig:
    num_layers: int = 3
    d_x: int = 4
    d_h: int = 128
    d_ff: int = 512
    num_heads: int = 8
    d_k: int = 16
    d_v: int = 16
    d_k_final: int = 128
    tanh_clip: float = 10.0

    def __post_init__(self):
        if self.d_k * self.num_heads != self.d_h:
            raise ValueError("d_k * num_heads must equal d_h")
        if self.d_x != 4:
            raise ValueError("node features are 4-dimensional")

    @property
    def d_hc(self) -> int:
        # Six concatenated components: previous assignment, four probing
        # embeddings, mean embedding.
        return 6 * self.d_h

    @classmethod
    def default(cls) -> "PolicyConfig":
        return cls()

    @classmethod
    def tiny(cls) -> "PolicyConfig":
        return cls(num_layers=1, d_h=16, d_ff=64, num_heads=2,
                   d_k=8, d_v=8, d_k_final=16)


def _shape_table(cfg: PolicyConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {
        "embed.w": (cfg.d_x, cfg.d_h),
        "embed.b": (cfg.d_h,),
    }
    for layer in range(cfg.num_layers):
        for h in range(cfg.num_heads):
            shapes[f"enc{layer}.attn.q{h}"] = (cfg.d_h, cfg.d_k)
            shapes[f"enc{layer}.attn.k{h}"] = (cfg.d_h, cfg.d_k)
            shapes[f"enc{layer}.attn.v{h}"] = (cfg.d_h, cfg.d_v)
        shapes[f"enc{layer}.attn.out"] = (cfg.num_heads * cfg.d_v, cfg.d_h)
        shapes[f"enc{layer}.ff.w1"] = (cfg.d_h, cfg.d_ff)
        shapes[f"enc{layer}.ff.b1"] = (cfg.d_ff,)
        shapes[f"enc{layer}.ff.w2"] = (cfg.d_ff, cfg.d_h)
        shapes[f"enc{layer}.ff.b2"] = (cfg.d_h,)
    shapes["dec.first"] = (1, cfg.d_h)
    for h in range(cfg.num_heads):
        shapes[f"dec.glimpse.q{h}"] = (cfg.d_hc, cfg.d_k)
        shapes[f"dec.glimpse.k{h}"] = (cfg.d_h, cfg.d_k)
        shapes[f"dec.glimpse.v{h}"] = (cfg.d_h, cfg.d_v)
    shapes["dec.glimpse.out"] = (cfg.num_heads * cfg.d_v, cfg.d_h)
    shapes["dec.final.q"] = (cfg.d_h, cfg.d_k_final)
    shapes["dec.final.k"] = (cfg.d_h, cfg.d_k_final)
    return shapes


class PolicyParams:
    """Named learnable tensors; weights are stored input-dim first."""

    def __init__(self, config: PolicyConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def zero_grads(self):
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self) -> "PolicyParams":
        return PolicyParams(
            self.config,
            {k: ad.tensor(v.data.copy(), requires_grad=True) for k, v in self.items()},
        )


def init_params(config: PolicyConfig, rng) -> PolicyParams:
    """Uniform(-1/sqrt(d_in), 1/sqrt(d_in)) per input dimension."""
    rng = np.random.default_rng(rng)
    tensors = {}
    for name, shape in _shape_table(config).items():
        d_in = shape[0] if len(shape) > 1 else shape[0]
        bound = 1.0 / sqrt(d_in)
        tensors[name] = ad.tensor(rng.uniform(-bound, bound, size=shape),
                                  requires_grad=True)
    return PolicyParams(config, tensors)


def _mha(params: PolicyParams, prefix: str, query_src: Tensor, kv_src: Tensor) -> Tensor:
    cfg = params.config
    scale = 1.0 / sqrt(cfg.d_k)
    heads = []
    for h in range(cfg.num_heads):
        q = query_src @ params[f"{prefix}.q{h}"]
        k = kv_src @ params[f"{prefix}.k{h}"]
        v = kv_src @ params[f"{prefix}.v{h}"]
        w = ad.softmax((q @ ad.transpose(k)) * scale)
        heads.append(w @ v)
    return ad.concat(heads, axis=1) @ params[f"{prefix}.out"]


def _feed_forward(params: PolicyParams, layer: int, x: Tensor) -> Tensor:
    hidden = ad.relu(x @ params[f"enc{layer}.ff.w1"] + params[f"enc{layer}.ff.b1"])
    return hidden @ params[f"enc{layer}.ff.w2"] + params[f"enc{layer}.ff.b2"]


def encode(params: PolicyParams, features: np.ndarray) -> Tensor:
    """Node embeddings of shape (4 + n, d_h); every node attends to all."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != params.config.d_x:
        raise ad.ContractError("state features must be (4 + n) x 4")
    h = ad.tensor(feats) @ params["embed.w"] + params["embed.b"]
    for layer in range(params.config.num_layers):
        h = h + _mha(params, f"enc{layer}.attn", h, h)
        h = h + _feed_forward(params, layer, h)
    return h


def context_vector(params: PolicyParams, h: Tensor, prev_index: int | None) -> Tensor:
    """Decoder query of shape (1, 6 * d_h).

    ``prev_index`` is the previously assigned candidate's row in ``h`` (the
    absolute node index), or None on the first step, where a learnable
    placeholder stands in.
    """
    n_nodes = h.data.shape[0]
    h_prev = params["dec.first"] if prev_index is None else ad.gather(h, [prev_index])
    probing = [ad.gather(h, [i]) for i in range(PROBING_COUNT)]
    averager = ad.tensor(np.full((1, n_nodes), 1.0 / n_nodes))
    h_mean = averager @ h
    return ad.concat([h_prev, *probing, h_mean], axis=1)


def decode_step(
    params: PolicyParams,
    h: Tensor,
    h_ct: Tensor,
    mask: np.ndarray,
) -> Tensor:
    """Probability row (1, n) over candidates; masked entries are exactly 0."""
    cfg = params.config
    n = h.data.shape[0] - PROBING_COUNT
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n,):
        raise ad.ContractError("mask must have one flag per candidate")
    if mask.all():
        raise ExhaustedActionsError("all candidates are masked")
    candidates = ad.gather(h, np.arange(PROBING_COUNT, h.data.shape[0]))
    glimpse = _mha(params, "dec.glimpse", h_ct, candidates)
    q = glimpse @ params["dec.final.q"]
    k = candidates @ params["dec.final.k"]
    u = ad.tanh((q @ ad.transpose(k)) * (1.0 / sqrt(cfg.d_k_final))) * cfg.tanh_clip
    u = ad.masked_fill(u, mask[None, :], -np.inf)
    return ad.softmax(u)


@dataclass
class Rollout:
    positions: tuple[int, ...]
    log_prob: Tensor                 # scalar, differentiable when tracked
    step_probs: list[np.ndarray]     # per-step probability rows (values only)

    @property
    def log_prob_value(self) -> float:
        return float(self.log_prob.data)


def rollout(
    params: PolicyParams,
    features: np.ndarray,
    m: int,
    mode: str = "sampling",
    rng=None,
    forced=None,
) -> Rollout:
    """Decode m distinct positions and the total log-probability.

    Modes: 'greedy' (argmax, lowest index on ties), 'sampling' (draw from the
    per-step categorical using ``rng``), or teacher forcing when ``forced``
    is given.
    """
    n = np.asarray(features).shape[0] - PROBING_COUNT
    if m > n:
        raise InfeasibleError(f"cannot place m={m} decaps on n={n} candidates")
    if forced is not None:
        forced = [int(a) for a in forced]
        if len(forced) != m:
            raise ad.ContractError("forced sequence length must equal m")
    elif mode == "sampling":
        rng = np.random.default_rng(rng)
    elif mode != "greedy":
        raise ValueError(f"unknown decode mode {mode!r}")

    h = encode(params, features)
    mask = np.zeros(n, dtype=bool)
    positions: list[int] = []
    log_terms: list[Tensor] = []
    step_probs: list[np.ndarray] = []
    prev: int | None = None
    for t in range(m):
        h_ct = context_vector(params, h, prev)
        p = decode_step(params, h, h_ct, mask)
        probs = p.data[0]
        step_probs.append(probs.copy())
        if forced is not None:
            choice = forced[t]
            if mask[choice]:
                raise ad.ContractError("forced sequence repeats a position")
        elif mode == "greedy":
            choice = int(np.argmax(probs))
        else:
            choice = int(rng.choice(n, p=probs / probs.sum()))
        log_terms.append(ad.log(ad.gather(ad.transpose(p), [choice])))
        positions.append(choice)
        mask[choice] = True
        prev = PROBING_COUNT + choice
    log_prob = ad.tsum(ad.concat(log_terms, axis=0))
    return Rollout(tuple(positions), log_prob, step_probs)


# --- Checkpoint format -------------------------------------------------------
#
# magic "PDNPOL1" | u32 config JSON length | config JSON (utf-8)
# | u32 tensor count | per tensor: u32 name length, name, u8 ndim,
#   u32 dims..., float64 little-endian payload.

def save_policy(path: str | Path, params: PolicyParams) -> Path:
    path = Path(path)
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    cfg_json = json.dumps(asdict(params.config), sort_keys=True).encode()
    blob += struct.pack("<I", len(cfg_json))
    blob += cfg_json
    blob += struct.pack("<I", len(params.tensors))
    for name, t in params.items():
        nb = name.encode()
        blob += struct.pack("<I", len(nb))
        blob += nb
        blob += struct.pack("<B", t.data.ndim)
        blob += struct.pack(f"<{t.data.ndim}I", *t.data.shape)
        blob += t.data.astype("<f8").tobytes()
    path.write_bytes(blob)
    return path


def load_policy(path: str | Path) -> PolicyParams:
    blob = Path(path).read_bytes()
    if blob[:7] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("bad magic; not a policy checkpoint")
    off = 7
    (cfg_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    config = PolicyConfig(**json.loads(blob[off:off + cfg_len].decode()))
    off += cfg_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    expected = _shape_table(config)
    tensors: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += size * 8
        if name not in expected or expected[name] != tuple(shape):
            raise CheckpointFormatError(f"tensor {name!r} has shape {shape}, "
                                        f"expected {expected.get(name)}")
        tensors[name] = ad.tensor(data, requires_grad=True)
    if set(tensors) != set(expected):
        raise CheckpointFormatError("checkpoint is missing tensors")
    return PolicyParams(config, tensors)
