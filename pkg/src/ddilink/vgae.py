"""Latent pair encoder and MLP decoder.

A drug pair is represented by the concatenation of the two drugs'
encoder embeddings and, separately, their raw property vectors. Both
halves are L2-normalized, concatenated, and mapped by two linear layers
to a Gaussian posterior (mu, log sigma). Training samples the latent via
the reparameterization trick; evaluation uses the posterior mean. The
decoder concatenates a learned interaction-type embedding to the latent
and runs an MLP plus a scalar head whose sigmoid is the link probability.

All operations are batched: vectors are rows, one pair per row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .encoder import glorot
from .ndtensor import DiffNode, Parameter

__all__ = [
    "LOG_SIGMA_BOUND",
    "LatentParams",
    "TypeEmbedding",
    "DecoderParams",
    "PairLatent",
    "init_latent_params",
    "init_type_embedding",
    "init_decoder_params",
    "pair_input",
    "latent_encode",
    "reparameterize",
    "decode",
    "predict_logit",
    "predict",
]

# exp overflow guard on the log-variance head
LOG_SIGMA_BOUND = 10.0


@dataclass
class LatentParams:
    w_mu: Parameter  # [pair_dim, latent_dim]
    w_sigma: Parameter  # [pair_dim, latent_dim]
    latent_dim: int


@dataclass
class TypeEmbedding:
    table: Parameter  # [n_types, t_dim]


@dataclass
class DecoderParams:
    mlp_layers: list[tuple[Parameter, Parameter]]  # (weight [in, out], bias [1, out])
    final_fcl: tuple[Parameter, Parameter]  # scalar head


@dataclass
class PairLatent:
    mu: DiffNode
    log_sigma: DiffNode
    e: DiffNode


def init_latent_params(rng: np.random.Generator, pair_dim: int, latent_dim: int) -> LatentParams:
    return LatentParams(
        w_mu=Parameter("latent.w_mu", glorot(rng, pair_dim, latent_dim, (pair_dim, latent_dim))),
        w_sigma=Parameter("latent.w_sigma", glorot(rng, pair_dim, latent_dim, (pair_dim, latent_dim))),
        latent_dim=latent_dim,
    )


def init_type_embedding(rng: np.random.Generator, n_types: int, t_dim: int) -> TypeEmbedding:
    return TypeEmbedding(table=Parameter("type_emb.table", glorot(rng, n_types, t_dim, (n_types, t_dim))))


def init_decoder_params(rng: np.random.Generator, in_dim: int, hidden: tuple[int, ...]) -> DecoderParams:
    layers: list[tuple[Parameter, Parameter]] = []
    d = in_dim
    for k, width in enumerate(hidden):
        layers.append(
            (
                Parameter(f"dec.mlp{k}.w", glorot(rng, d, width, (d, width))),
                Parameter(f"dec.mlp{k}.b", np.zeros((1, width))),
            )
        )
        d = width
    final = (
        Parameter("dec.out.w", glorot(rng, d, 1, (d, 1))),
        Parameter("dec.out.b", np.zeros((1, 1))),
    )
    return DecoderParams(mlp_layers=layers, final_fcl=final)


def pair_input(x_o: DiffNode, x_f: DiffNode, d1, d2) -> tuple[DiffNode, DiffNode]:
    """Ordered pair vectors: (x_o[d1] || x_o[d2], x_f[d1] || x_f[d2]).

    Order is preserved because interactions are directional.
    """
    struct = nd.concat_cols(nd.gather_rows(x_o, d1), nd.gather_rows(x_o, d2))
    prop = nd.concat_cols(nd.gather_rows(x_f, d1), nd.gather_rows(x_f, d2))
    return struct, prop


def latent_encode(struct_pair: DiffNode, prop_pair: DiffNode, p: LatentParams) -> tuple[DiffNode, DiffNode]:
    """mu and log sigma from the normalized, concatenated pair vectors.

    Each of the two vectors is L2-normalized separately (zero vectors map
    to zero), so the posterior is scale-invariant in both inputs. The log
    sigma head is clamped to +-LOG_SIGMA_BOUND.
    """
    cat = nd.concat_cols(nd.l2_normalize_rows(struct_pair), nd.l2_normalize_rows(prop_pair))
    mu = nd.matmul(cat, p.w_mu)
    log_sigma = nd.clip(nd.matmul(cat, p.w_sigma), -LOG_SIGMA_BOUND, LOG_SIGMA_BOUND)
    return mu, log_sigma


def reparameterize(
    mu: DiffNode,
    log_sigma: DiffNode,
    mode: str = "train",
    seed=0,
    eps: np.ndarray | None = None,
) -> DiffNode:
    """e = mu + eps * exp(0.5 * log sigma) in train mode; e = mu in eval.

    ``eps`` overrides the seeded standard-normal draw (used to freeze the
    noise for gradient checks).
    """
    if mu.value.shape != log_sigma.value.shape:
        raise nd.DimensionError(f"mu {mu.value.shape} and log_sigma {log_sigma.value.shape} differ")
    if mode == "eval":
        return mu
    if mode != "train":
        raise nd.ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    if eps is None:
        eps = np.random.default_rng(seed).standard_normal(mu.value.shape)
    eps_node = DiffNode(np.asarray(eps, dtype=np.float64))
    std = nd.exp(nd.scale(nd.clip(log_sigma, -LOG_SIGMA_BOUND, LOG_SIGMA_BOUND), 0.5))
    return nd.add(mu, nd.mul(eps_node, std))


def decode(e: DiffNode, type_idx, p: DecoderParams, emb: TypeEmbedding) -> DiffNode:
    """Z = MLP(e || type_embedding), ReLU between layers."""
    x = nd.concat_cols(e, nd.gather_rows(emb.table, type_idx))
    for w, b in p.mlp_layers:
        x = nd.relu(nd.add_rowvec(nd.matmul(x, w), b))
    return x


def predict_logit(z_dec: DiffNode, p: DecoderParams) -> DiffNode:
    w, b = p.final_fcl
    return nd.add_rowvec(nd.matmul(z_dec, w), b)


def predict(z_dec: DiffNode, p: DecoderParams) -> DiffNode:
    """Final link probability, strictly inside (0, 1) for finite logits."""
    return nd.sigmoid(predict_logit(z_dec, p))


def latent_parameters(p: LatentParams) -> list[Parameter]:
    return [p.w_mu, p.w_sigma]


def decoder_parameters(p: DecoderParams, emb: TypeEmbedding) -> list[Parameter]:
    out: list[Parameter] = [emb.table]
    for w, b in p.mlp_layers:
        out.extend([w, b])
    out.extend(p.final_fcl)
    return out
