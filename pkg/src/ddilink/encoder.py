"""Context-aware graph encoder.

Two pre-processors look at each node from different angles: the local
context processor mixes a node with the mean of its neighborhood through a
shared weight matrix, while the molecular context processor (circular
fingerprint style) gives every degree bucket its own pair of weight
matrices over the node and its neighborhood sum. Each branch is graph-
normalized, the branches are concatenated, and a single max-attention
layer produces the node embeddings plus per-edge existence probabilities
for the self-supervision objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .ddigraph import MessageGraph
from .ndtensor import DiffNode, Parameter

__all__ = [
    "LCPParams",
    "MCPParams",
    "GraphNormParams",
    "SSGAttnParams",
    "EncoderParams",
    "EncoderOutput",
    "glorot",
    "init_encoder_params",
    "lcp_forward",
    "mcp_forward",
    "graphnorm",
    "ssgattn_forward",
    "edge_prob_for_pairs",
    "encode",
]


@dataclass
class LCPParams:
    w: Parameter  # [d_in, d_hid], shared between self and neighborhood-mean terms


@dataclass
class MCPParams:
    w1: list[Parameter]  # per degree bucket, [d_in, d_hid]
    w2: list[Parameter]
    max_degree_bucket: int


@dataclass
class GraphNormParams:
    zeta: Parameter  # [1, d] mean-scaling
    gamma: Parameter  # [1, d]
    beta: Parameter  # [1, d]
    eps: float


@dataclass
class SSGAttnParams:
    w_s: Parameter  # [h_dim, d_out]
    a: Parameter  # [2 * d_out, 1]
    leaky_slope: float


@dataclass
class EncoderParams:
    lcp: LCPParams | None
    mcp: MCPParams | None
    gn_lcp: GraphNormParams | None
    gn_mcp: GraphNormParams | None
    attn: SSGAttnParams


@dataclass
class EncoderOutput:
    """Node embeddings, per-training-edge existence probabilities, and the
    attention-projected features needed to score arbitrary extra pairs."""

    x_o: DiffNode  # [n, d_out]
    edge_prob: DiffNode  # [E, 1], aligned with mg.edges
    proj: DiffNode  # [n, d_out]


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape: tuple[int, int]) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_encoder_params(
    rng: np.random.Generator,
    d_in: int,
    d_hid: int,
    d_out: int,
    max_degree_bucket: int,
    leaky_slope: float,
    graphnorm_eps: float,
    use_lcp: bool = True,
    use_mcp: bool = True,
) -> EncoderParams:
    """Build encoder parameters; disabled branches are simply absent and the
    attention input width shrinks accordingly."""
    if not (use_lcp or use_mcp):
        raise nd.ContractError("at least one of the context pre-processors must be enabled")

    def gn(prefix: str) -> GraphNormParams:
        return GraphNormParams(
            zeta=Parameter(f"{prefix}.zeta", np.ones((1, d_hid))),
            gamma=Parameter(f"{prefix}.gamma", np.ones((1, d_hid))),
            beta=Parameter(f"{prefix}.beta", np.zeros((1, d_hid))),
            eps=graphnorm_eps,
        )

    lcp = gn_lcp = mcp = gn_mcp = None
    if use_lcp:
        lcp = LCPParams(w=Parameter("lcp.w", glorot(rng, d_in, d_hid, (d_in, d_hid))))
        gn_lcp = gn("gn_lcp")
    if use_mcp:
        n_buckets = max_degree_bucket + 1
        mcp = MCPParams(
            w1=[Parameter(f"mcp.w1.{b}", glorot(rng, d_in, d_hid, (d_in, d_hid))) for b in range(n_buckets)],
            w2=[Parameter(f"mcp.w2.{b}", glorot(rng, d_in, d_hid, (d_in, d_hid))) for b in range(n_buckets)],
            max_degree_bucket=max_degree_bucket,
        )
        gn_mcp = gn("gn_mcp")
    h_dim = d_hid * (int(use_lcp) + int(use_mcp))
    attn = SSGAttnParams(
        w_s=Parameter("attn.w_s", glorot(rng, h_dim, d_out, (h_dim, d_out))),
        a=Parameter("attn.a", glorot(rng, 2 * d_out, 1, (2 * d_out, 1))),
        leaky_slope=leaky_slope,
    )
    return EncoderParams(lcp=lcp, mcp=mcp, gn_lcp=gn_lcp, gn_mcp=gn_mcp, attn=attn)


def lcp_forward(x: DiffNode, mg: MessageGraph, p: LCPParams) -> DiffNode:
    """W x_i + W mean_{j in N(i)} x_j; an isolated node keeps only W x_i."""
    if x.value.shape[1] != p.w.value.shape[0]:
        raise nd.DimensionError(f"lcp input width {x.value.shape[1]} != weight rows {p.w.value.shape[0]}")
    nbr_mean = nd.segment_mean(x, mg.adjacency)
    return nd.add(nd.matmul(x, p.w), nd.matmul(nbr_mean, p.w))


def mcp_forward(x: DiffNode, mg: MessageGraph, p: MCPParams) -> DiffNode:
    """W1^(deg i) x_i + W2^(deg i) sum_{j in N(i)} x_j, degree-bucketed.

    Degrees above max_degree_bucket clamp into the top bucket.
    """
    if x.value.shape[1] != p.w1[0].value.shape[0]:
        raise nd.DimensionError(f"mcp input width {x.value.shape[1]} != weight rows {p.w1[0].value.shape[0]}")
    n = x.value.shape[0]
    nbr_sum = nd.segment_sum(x, mg.adjacency)
    buckets = np.minimum(mg.degrees, p.max_degree_bucket)
    out: DiffNode | None = None
    for b in range(p.max_degree_bucket + 1):
        idx = np.flatnonzero(buckets == b)
        if idx.size == 0:
            continue
        part = nd.add(
            nd.matmul(nd.gather_rows(x, idx), p.w1[b]),
            nd.matmul(nd.gather_rows(nbr_sum, idx), p.w2[b]),
        )
        placed = nd.scatter_rows(part, idx, n)
        out = placed if out is None else nd.add(out, placed)
    assert out is not None  # n >= 1 puts every node in some bucket
    return out


def graphnorm(h: DiffNode, p: GraphNormParams) -> DiffNode:
    """(x - zeta*E[x]) / sqrt(Var[x - zeta*E[x]] + eps) * gamma + beta.

    Statistics are per feature dimension across the node axis (population
    variance over the whole graph). Var is shift-invariant, so the
    variance term reduces to the plain per-column variance of x.
    """
    if h.value.shape[0] < 1:
        raise nd.DimensionError("graphnorm requires at least one node")
    m = nd.col_mean(h)
    centered = nd.add_rowvec(h, nd.scale(nd.mul(m, p.zeta), -1.0))
    dev = nd.add_rowvec(h, nd.scale(m, -1.0))
    var = nd.col_mean(nd.mul(dev, dev))
    inv_std = nd.recip(nd.sqrt(nd.shift(var, p.eps)))
    return nd.add_rowvec(nd.mul_rowvec(nd.mul_rowvec(centered, inv_std), p.gamma), p.beta)


def _attention_support(mg: MessageGraph):
    """Flattened (center, other) pairs over N(i) + {i}, grouped per center."""
    centers: list[int] = []
    others: list[int] = []
    segments: list[list[int]] = []
    pos = 0
    for i, nbrs in enumerate(mg.adjacency):
        members = list(range(pos, pos + len(nbrs) + 1))
        for k in nbrs:
            centers.append(i)
            others.append(k)
        centers.append(i)
        others.append(i)
        pos += len(members)
        segments.append(members)
    return np.asarray(centers, dtype=np.intp), np.asarray(others, dtype=np.intp), segments


def edge_prob_for_pairs(proj: DiffNode, pairs: np.ndarray) -> DiffNode:
    """sigmoid(u_i . u_j) for each row (i, j) of ``pairs``."""
    if pairs.size == 0:
        return DiffNode(np.zeros((0, 1)))
    ui = nd.gather_rows(proj, pairs[:, 0])
    uj = nd.gather_rows(proj, pairs[:, 1])
    return nd.sigmoid(nd.row_sum(nd.mul(ui, uj)))


def ssgattn_forward(h: DiffNode, mg: MessageGraph, p: SSGAttnParams) -> EncoderOutput:
    """Max-attention aggregation over each node's closed neighborhood.

    Scores combine the concatenation attention a^T [u_i || u_k] with a
    sigmoid gate on the dot product u_i . u_k; the softmax support for node
    i is N(i) + {i}. The same dot-product sigmoid, evaluated on the
    training edges, doubles as the edge-existence probability for the
    self-supervision loss.
    """
    if h.value.shape[1] != p.w_s.value.shape[0]:
        raise nd.DimensionError(f"attention input width {h.value.shape[1]} != weight rows {p.w_s.value.shape[0]}")
    proj = nd.matmul(h, p.w_s)
    centers, others, segments = _attention_support(mg)
    uc = nd.gather_rows(proj, centers)
    uo = nd.gather_rows(proj, others)
    lin = nd.matmul(nd.concat_cols(uc, uo), p.a)
    gate = nd.sigmoid(nd.row_sum(nd.mul(uc, uo)))
    scores = nd.mul(lin, gate)
    alpha = nd.segment_softmax(nd.leaky_relu(scores, p.leaky_slope), segments)
    x_o = nd.segment_sum(nd.scale_rows(uo, alpha), segments)
    edge_prob = edge_prob_for_pairs(proj, mg.edges)
    return EncoderOutput(x_o=x_o, edge_prob=edge_prob, proj=proj)


def encode(x: DiffNode, mg: MessageGraph, params: EncoderParams) -> EncoderOutput:
    """Full encoder: pre-processors, per-branch graph norm, concat, attention."""
    branches: list[DiffNode] = []
    if params.lcp is not None:
        branches.append(graphnorm(lcp_forward(x, mg, params.lcp), params.gn_lcp))
    if params.mcp is not None:
        branches.append(graphnorm(mcp_forward(x, mg, params.mcp), params.gn_mcp))
    h = branches[0] if len(branches) == 1 else nd.concat_cols(branches[0], branches[1])
    return ssgattn_forward(h, mg, params.attn)


def encoder_parameters(params: EncoderParams) -> list[Parameter]:
    """All trainable leaves in a stable order."""
    out: list[Parameter] = []
    if params.lcp is not None:
        out.append(params.lcp.w)
        out.extend([params.gn_lcp.zeta, params.gn_lcp.gamma, params.gn_lcp.beta])
    if params.mcp is not None:
        out.extend(params.mcp.w1)
        out.extend(params.mcp.w2)
        out.extend([params.gn_mcp.zeta, params.gn_mcp.gamma, params.gn_mcp.beta])
    out.extend([params.attn.w_s, params.attn.a])
    return out
