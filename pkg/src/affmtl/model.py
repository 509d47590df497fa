"""The full network: channel compression of backbone patch features, a
task-adaptive cross-attention decoder over 22 learnable queries, an
AU-assisted graph network with learned soft node masking, and the three
prediction heads.

Query layout is fixed: indices [0,12) are action-unit queries, [12,20)
expression queries, [20,22) valence/arousal queries. The first decoder block
runs no self-attention because its incoming query content is all zero.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .losses import N_AU, N_EXPR
from .tensor import Tensor

log = logging.getLogger(__name__)

N_VA = 2
N_QUERIES = N_AU + N_EXPR + N_VA  # 22
N_FUSED = N_EXPR + N_VA  # 10

CHECKPOINT_FORMAT_VERSION = 1


class IngestionError(ValueError):
    """Input features do not match the expected patch/channel geometry."""


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1536
    n_patches: int = 289
    d_model: int = 128
    n_heads: int = 4
    conv_hidden: int = 512
    ffn_hidden: int = 512
    n_blocks: int = 4
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.n_blocks < 1:
            raise ValueError("need at least one decoder block")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "in_channels", "n_patches", "d_model", "n_heads",
            "conv_hidden", "ffn_hidden", "n_blocks", "ln_eps")}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class _Registry:
    """Creates named parameter tensors with the standard init scheme:
    weights ~ U(-1/sqrt(fan_in), +1/sqrt(fan_in)), biases zero."""

    def __init__(self, rng: np.random.Generator, dtype):
        self.rng = rng
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}

    def weight(self, name, shape, fan_in) -> Tensor:
        bound = 1.0 / math.sqrt(fan_in)
        data = self.rng.uniform(-bound, bound, size=shape).astype(self.dtype)
        return self._add(name, data)

    def zeros(self, name, shape) -> Tensor:
        return self._add(name, np.zeros(shape, dtype=self.dtype))

    def _add(self, name, data) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name}")
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        return t


class AttentionParams:
    def __init__(self, reg: _Registry, prefix: str, d: int):
        self.wq = reg.weight(f"{prefix}.wq", (d, d), d)
        self.bq = reg.zeros(f"{prefix}.bq", (d,))
        self.wk = reg.weight(f"{prefix}.wk", (d, d), d)
        self.bk = reg.zeros(f"{prefix}.bk", (d,))
        self.wv = reg.weight(f"{prefix}.wv", (d, d), d)
        self.bv = reg.zeros(f"{prefix}.bv", (d,))
        self.wo = reg.weight(f"{prefix}.wo", (d, d), d)
        self.bo = reg.zeros(f"{prefix}.bo", (d,))


class DecoderBlockParams:
    """One task-adaptive block. Block 0 holds no self-attention parameters."""

    def __init__(self, reg: _Registry, index: int, cfg: ModelConfig):
        p = f"block{index}"
        d, f = cfg.d_model, cfg.ffn_hidden
        self.is_first = index == 0
        if not self.is_first:
            self.mhsa = AttentionParams(reg, f"{p}.mhsa", d)
            self.ln1_g = reg._add(f"{p}.ln1.g", np.ones(d, dtype=reg.dtype))
            self.ln1_b = reg.zeros(f"{p}.ln1.b", (d,))
        self.mhca = AttentionParams(reg, f"{p}.mhca", d)
        self.ln2_g = reg._add(f"{p}.ln2.g", np.ones(d, dtype=reg.dtype))
        self.ln2_b = reg.zeros(f"{p}.ln2.b", (d,))
        self.ffn_w1 = reg.weight(f"{p}.ffn.w1", (d, f), d)
        self.ffn_b1 = reg.zeros(f"{p}.ffn.b1", (f,))
        self.ffn_w2 = reg.weight(f"{p}.ffn.w2", (f, d), f)
        self.ffn_b2 = reg.zeros(f"{p}.ffn.b2", (d,))
        self.ln3_g = reg._add(f"{p}.ln3.g", np.ones(d, dtype=reg.dtype))
        self.ln3_b = reg.zeros(f"{p}.ln3.b", (d,))


class GcnParams:
    def __init__(self, reg: _Registry, d: int):
        self.w_au = reg.weight("gcn.w_au", (d, d), d)
        self.mask = reg.weight("gcn.mask", (N_FUSED, d), d)
        self.w_fuse1 = reg.weight("gcn.w_fuse1", (d, d), d)
        self.w_fuse2 = reg.weight("gcn.w_fuse2", (d, d), d)
        # zero logits = uniform adjacency; softmax keeps the graph fully
        # connected while training reweights the edges
        self.a_au_logits = reg.zeros("gcn.a_au", (N_AU, N_AU))
        self.a_fuse_logits = reg.zeros("gcn.a_fuse", (N_FUSED, N_FUSED))


class ModelParams:
    """All trainable tensors, addressable by structure and by name."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        reg = _Registry(rng, dtype)
        c, d = config.in_channels, config.d_model

        self.conv1_w = reg.weight("conv1.w", (c, config.conv_hidden), c)
        self.conv1_b = reg.zeros("conv1.b", (config.conv_hidden,))
        self.conv2_w = reg.weight("conv2.w", (config.conv_hidden, d),
                                  config.conv_hidden)
        self.conv2_b = reg.zeros("conv2.b", (d,))
        self.pos_embed_f = reg.weight("pos_embed_f", (config.n_patches, d), d)
        self.pos_embed_q = reg.weight("pos_embed_q", (N_QUERIES, d), d)
        self.blocks = [DecoderBlockParams(reg, i, config)
                       for i in range(config.n_blocks)]
        self.gcn = GcnParams(reg, d)
        self.head_au_w = reg.weight("head_au.w", (N_AU, d), d)
        self.head_au_b = reg.zeros("head_au.b", (N_AU,))
        self.head_expr_w = reg.weight("head_expr.w", (N_EXPR, d), d)
        self.head_expr_b = reg.zeros("head_expr.b", (N_EXPR,))
        self.head_va_w = reg.weight("head_va.w", (N_VA, d), d)
        self.head_va_b = reg.zeros("head_va.b", (N_VA,))

        self._by_name = reg.params
        log.info("model built: %d parameters in %d tensors",
                 self.parameter_count(), len(self._by_name))

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self._by_name)

    def parameters(self) -> list[Tensor]:
        return list(self._by_name.values())

    def parameter_count(self) -> int:
        return sum(t.size for t in self._by_name.values())

    def parameter_groups(self) -> dict[str, list[str]]:
        """Coarse grouping used by the gradient-flow check."""
        groups: dict[str, list[str]] = {}
        for name in self._by_name:
            top = name.split(".")[0]
            groups.setdefault(top, []).append(name)
        return groups

    def zero_grad(self):
        for t in self._by_name.values():
            t.grad = None


@dataclass
class ForwardTrace:
    """Instrumentation collected during a forward pass (shapes and counters
    used by the architecture invariants, never by the computation)."""

    blocks_applied: int = 0
    mhsa_calls: list = field(default_factory=list)  # bool per block
    attention_weights: list = field(default_factory=list)  # (label, ndarray)
    adjacency: list = field(default_factory=list)  # (label, ndarray)


@dataclass
class PredictionRecord:
    """Raw per-image outputs: 12 AU logits, 8 expression logits, 2 VA values."""

    id: str
    au_logits: np.ndarray
    expr_logits: np.ndarray
    va: np.ndarray


def _attention(q_in, k_in, v_in, p: AttentionParams, n_heads: int,
               trace: ForwardTrace | None, label: str):
    """Standard multi-head attention; q_in/k_in already carry any positional
    embedding, v_in never does."""
    b, lq, d = q_in.shape
    lk = k_in.shape[1]
    dk = d // n_heads

    def split_heads(t, length):
        return t.reshape((b, length, n_heads, dk)).transpose((0, 2, 1, 3))

    q = split_heads(q_in @ p.wq + p.bq, lq)
    k = split_heads(k_in @ p.wk + p.bk, lk)
    v = split_heads(v_in @ p.wv + p.bv, lk)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dk))
    attn = T.softmax_rows(scores)  # (b, heads, lq, lk)
    if trace is not None:
        trace.attention_weights.append((label, attn.data.copy()))
    out = (attn @ v).transpose((0, 2, 1, 3)).reshape((b, lq, d))
    return out @ p.wo + p.bo


def compress_features(feats, params: ModelParams) -> Tensor:
    """Per-patch channel compression: two kernel-size-1 convolutions with a
    GELU between, preserving the patch axis."""
    f = T.as_tensor(feats)
    cfg = params.config
    if f.ndim not in (2, 3):
        raise IngestionError(f"expected (patches, channels) features, got {f.shape}")
    if f.shape[-2] != cfg.n_patches:
        raise IngestionError(
            f"patch dimension is {f.shape[-2]}, expected {cfg.n_patches}"
        )
    if f.shape[-1] != cfg.in_channels:
        raise IngestionError(
            f"channel dimension is {f.shape[-1]}, expected {cfg.in_channels}"
        )
    h = T.gelu(T.pointwise_conv1d(f, params.conv1_w, params.conv1_b))
    return T.pointwise_conv1d(h, params.conv2_w, params.conv2_b)


def task_adaptive_block(q_prev: Tensor, f_prime: Tensor,
                        block: DecoderBlockParams, params: ModelParams,
                        trace: ForwardTrace | None = None,
                        index: int = -1, f_keys: Tensor | None = None) -> Tensor:
    """One decoder block: (optional) self-attention over queries, cross
    attention into the compressed features, feed-forward; residual + post
    layer norm around each sublayer. Queries and keys get their positional
    embeddings added, values stay bare. f_keys may carry a precomputed
    position-embedded feature tensor shared across blocks."""
    cfg = params.config
    eps = cfg.ln_eps
    pos_q = params.pos_embed_q
    if f_keys is None:
        f_keys = f_prime + params.pos_embed_f
    if block.is_first:
        q1 = q_prev
        if trace is not None:
            trace.mhsa_calls.append(False)
    else:
        q_hat = q_prev + pos_q
        sa = _attention(q_hat, q_hat, q_prev, block.mhsa, cfg.n_heads,
                        trace, f"block{index}.mhsa")
        q1 = T.layer_norm(q_prev + sa, block.ln1_g, block.ln1_b, eps)
        if trace is not None:
            trace.mhsa_calls.append(True)
    ca = _attention(q1 + pos_q, f_keys, f_prime,
                    block.mhca, cfg.n_heads, trace, f"block{index}.mhca")
    q2 = T.layer_norm(q1 + ca, block.ln2_g, block.ln2_b, eps)
    h = T.gelu(q2 @ block.ffn_w1 + block.ffn_b1)
    ffn = h @ block.ffn_w2 + block.ffn_b2
    q3 = T.layer_norm(q2 + ffn, block.ln3_g, block.ln3_b, eps)
    if trace is not None:
        trace.blocks_applied += 1
    return q3


def run_decoder(f_prime: Tensor, params: ModelParams,
                trace: ForwardTrace | None = None) -> Tensor:
    """Apply all blocks in order, starting from zero-content queries."""
    b = f_prime.shape[0]
    d = params.config.d_model
    q = Tensor(np.zeros((b, N_QUERIES, d), dtype=f_prime.data.dtype))
    f_keys = f_prime + params.pos_embed_f
    for i, block in enumerate(params.blocks):
        q = task_adaptive_block(q, f_prime, block, params, trace, index=i,
                                f_keys=f_keys)
    return q


def split_queries(q: Tensor) -> tuple[Tensor, Tensor]:
    """Split decoder output into AU rows [0,12) and EXPR+VA rows [12,22)."""
    if q.shape[-2] != N_QUERIES:
        raise T.ShapeError(f"expected {N_QUERIES} queries, got {q.shape}")
    return q[..., :N_AU, :], q[..., N_AU:, :]


def gcn_layer(h: Tensor, a_logits: Tensor, w: Tensor,
              activate: bool = True,
              trace: ForwardTrace | None = None, label: str = "gcn") -> Tensor:
    """Graph convolution with a learned dense adjacency: row-softmax of the
    logits keeps every edge weight positive, so the graph stays fully
    connected."""
    adj = T.softmax_rows(a_logits)
    if trace is not None:
        trace.adjacency.append((label, adj.data.copy()))
    out = adj @ h @ w
    return T.gelu(out) if activate else out


def mask_and_fuse(g_au: Tensor, f_expr_va: Tensor, gcn: GcnParams) -> Tensor:
    """Soft node masking: the 10 learned mask vectors each select a mixture
    of the 12 AU nodes (scaled dot-product scores, row softmax), dropping to
    hard 2-node removal in the saturated limit; the 10 aggregated rows are
    fused into the EXPR/VA features by addition."""
    d = g_au.shape[-1]
    scores = (gcn.mask @ g_au.swapaxes(-1, -2)) * (1.0 / math.sqrt(d))
    selection = T.softmax_rows(scores)  # (..., 10, 12)
    masked = selection @ g_au  # (..., 10, d)
    return masked + f_expr_va


def forward_batch(params: ModelParams, feats,
                  trace: ForwardTrace | None = None):
    """Full pipeline on a (batch, patches, channels) feature block.

    Returns (au_logits, expr_logits, va) tensors of shape (batch, 12),
    (batch, 8), (batch, 2); VA is tanh-bounded to [-1, 1].
    """
    f = T.as_tensor(feats)
    squeeze = f.ndim == 2
    if squeeze:
        f = f.reshape((1,) + tuple(f.shape))
    f_prime = compress_features(f, params)
    q = run_decoder(f_prime, params, trace)
    f_au, f_expr_va = split_queries(q)
    g_au = gcn_layer(f_au, params.gcn.a_au_logits, params.gcn.w_au,
                     trace=trace, label="gcn.au")
    fused = mask_and_fuse(g_au, f_expr_va, params.gcn)
    fused = gcn_layer(fused, params.gcn.a_fuse_logits, params.gcn.w_fuse1,
                      trace=trace, label="gcn.fuse1")
    fused = gcn_layer(fused, params.gcn.a_fuse_logits, params.gcn.w_fuse2,
                      trace=trace, label="gcn.fuse2")

    au_logits = (g_au * params.head_au_w).sum(axis=-1) + params.head_au_b
    expr_nodes = fused[:, :N_EXPR, :]
    va_nodes = fused[:, N_EXPR:, :]
    expr_logits = (expr_nodes * params.head_expr_w).sum(axis=-1) + params.head_expr_b
    va = T.tanh((va_nodes * params.head_va_w).sum(axis=-1) + params.head_va_b)
    if squeeze:
        au_logits = au_logits.reshape((N_AU,))
        expr_logits = expr_logits.reshape((N_EXPR,))
        va = va.reshape((N_VA,))
    return au_logits, expr_logits, va


def forward(feats, params: ModelParams,
            record_id: str = "", trace: ForwardTrace | None = None) -> PredictionRecord:
    """Single-image convenience wrapper around forward_batch."""
    au, expr, va = forward_batch(params, feats, trace)
    return PredictionRecord(id=record_id, au_logits=au.data.copy(),
                            expr_logits=expr.data.copy(), va=va.data.copy())


# -- checkpoint container -------------------------------------------------------

# binary layout (all little-endian): u32 tensor count, then per tensor
# u16 name length, UTF-8 name, u8 ndim, ndim * u32 dims, float32 payload


def save_checkpoint(path, params: ModelParams, extra: dict | None = None):
    named = params.named_parameters()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(named)))
        for name, t in named.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    sidecar = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": params.config.to_dict(),
        "seed": params.seed,
    }
    if extra:
        sidecar.update(extra)
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    """Rebuild a model from a checkpoint; every stored tensor must match the
    architecture's parameter of the same name in shape."""
    with open(str(path) + ".json") as fh:
        sidecar = json.load(fh)
    if sidecar.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(
            f"unsupported checkpoint format {sidecar.get('format_version')}"
        )
    config = ModelConfig.from_dict(sidecar["config"])
    params = ModelParams(config, seed=sidecar.get("seed", 0))
    named = params.named_parameters()
    seen = set()
    with open(path, "rb") as fh:
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n_bytes = 4 * int(np.prod(shape, dtype=np.int64)) if ndim else 4
            payload = fh.read(n_bytes)
            if len(payload) != n_bytes:
                raise ValueError(f"truncated checkpoint at tensor {name!r}")
            if name not in named:
                raise ValueError(f"checkpoint tensor {name!r} unknown to this architecture")
            t = named[name]
            if tuple(shape) != t.data.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: checkpoint {tuple(shape)} "
                    f"vs model {t.data.shape}"
                )
            t.data = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(
                np.float32
            )
            seen.add(name)
    missing = set(named) - seen
    if missing:
        raise ValueError(f"checkpoint missing tensors: {sorted(missing)[:4]}...")
    return params, sidecar
