"""Registered finite-difference gradient checks.

Every differentiable operation, each encoder/decoder layer, each loss
term, and the full training loss on a small fixed graph get a named check
comparing backward() gradients against central differences. The CLI
exposes these as ``gradcheck``; the acceptance suite runs them all.

Fixtures use fixed seeds and values kept away from the kinks of
relu/leaky_relu/clip so central differences are valid.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import ndtensor as nd
from . import objectives, vgae
from .ddigraph import DDIDataset, PairExample, build_message_graph, sample_negatives
from .encoder import (
    edge_prob_for_pairs,
    encode,
    graphnorm,
    lcp_forward,
    mcp_forward,
    ssgattn_forward,
)
from .ndtensor import DiffNode, Parameter, finite_diff_check
from .trainer import TrainConfig, build_model, build_training_loss, pairs_to_arrays, sample_ss_negatives

__all__ = ["toy_dataset", "toy_config", "toy_message_graph", "run_checks", "SCOPES"]

SCOPES = ("all", "ndtensor", "encoder", "vgae", "loss")


def toy_dataset(seed: int = 5, f_dim: int = 5) -> DDIDataset:
    """Six drugs, seven typed edges, random finite features."""
    edges = [(0, 1, 0), (1, 2, 1), (2, 3, 0), (3, 4, 1), (4, 5, 0), (0, 5, 1), (1, 3, 0)]
    rng = np.random.default_rng(seed)
    return DDIDataset(
        drug_ids=[f"D{k}" for k in range(6)],
        features=rng.normal(size=(6, f_dim)),
        edges=edges,
        n_types=2,
    )


def toy_config(**overrides) -> TrainConfig:
    base = dict(
        lr=0.01,
        epochs=5,
        seed=3,
        latent_dim=5,
        d_hid=6,
        d_out=6,
        t_dim=3,
        max_degree_bucket=3,
        mlp_hidden=(8, 6),
    )
    base.update(overrides)
    return TrainConfig(**base)


def toy_message_graph(dataset: DDIDataset):
    return build_message_graph(dataset, range(len(dataset.edges)))


def _head(node: DiffNode, seed: int) -> DiffNode:
    """Reduce to a scalar through fixed random weights so every output
    coordinate receives a distinct gradient."""
    w = DiffNode(np.random.default_rng(seed).normal(size=node.value.shape))
    return nd.sum_all(nd.mul(node, w))


def _param(name: str, shape, seed: int, positive: bool = False, away_from: float | None = None) -> Parameter:
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=shape)
    if positive:
        vals = np.abs(vals) + 0.5
    if away_from is not None:
        # push values at least 0.1 away from the kink
        vals = np.where(np.abs(vals - away_from) < 0.1, vals + 0.25, vals)
    return Parameter(name, vals)


def _op_checks() -> list[tuple[str, Callable[[float], dict]]]:
    checks: list[tuple[str, Callable[[float], dict]]] = []

    def simple(name: str, build):
        """build() returns (scalar closure, params); params are made fresh per run."""

        def run(tol: float) -> dict:
            f, params = build()
            return finite_diff_check(f, params, tol=tol)

        checks.append((name, run))

    def build_matmul():
        a = _param("a", (3, 4), 1)
        b = _param("b", (4, 2), 2)
        return (lambda: _head(nd.matmul(a, b), 10)), [a, b]

    simple("matmul", build_matmul)

    def binary(name, op):
        def build():
            a = _param("a", (3, 4), 1)
            b = _param("b", (3, 4), 2)
            return (lambda: _head(op(a, b), 11)), [a, b]

        simple(name, build)

    binary("add", nd.add)
    binary("sub", nd.sub)
    binary("mul", nd.mul)

    def unary(name, op, **kw):
        def build():
            a = _param("a", (3, 4), 4, **kw)
            return (lambda: _head(op(a), 12)), [a]

        simple(name, build)

    unary("sigmoid", nd.sigmoid)
    unary("exp", nd.exp)
    unary("log", nd.log, positive=True)
    unary("sqrt", nd.sqrt, positive=True)
    unary("recip", nd.recip, positive=True)
    unary("softplus", nd.softplus)
    unary("relu", nd.relu, away_from=0.0)
    unary("leaky_relu", lambda a: nd.leaky_relu(a, 0.2), away_from=0.0)
    unary("scale", lambda a: nd.scale(a, -1.7))
    unary("shift", lambda a: nd.shift(a, 2.5))
    unary("clip_interior", lambda a: nd.clip(a, -10.0, 10.0))
    unary("transpose", nd.transpose)
    unary("row_sum", nd.row_sum)
    unary("col_mean", nd.col_mean)
    unary("sum_all", nd.sum_all)
    unary("mean_all", nd.mean_all)
    unary("l2_normalize_rows", nd.l2_normalize_rows)

    def build_concat_cols():
        a = _param("a", (3, 2), 1)
        b = _param("b", (3, 4), 2)
        return (lambda: _head(nd.concat_cols(a, b), 13)), [a, b]

    simple("concat_cols", build_concat_cols)

    def build_concat_rows():
        a = _param("a", (2, 3), 1)
        b = _param("b", (4, 3), 2)
        return (lambda: _head(nd.concat_rows(a, b), 14)), [a, b]

    simple("concat_rows", build_concat_rows)

    def build_gather():
        a = _param("a", (5, 3), 1)
        idx = np.array([0, 2, 2, 4, 1])
        return (lambda: _head(nd.gather_rows(a, idx), 15)), [a]

    simple("gather_rows", build_gather)

    def build_scatter():
        a = _param("a", (3, 2), 1)
        idx = np.array([4, 0, 2])
        return (lambda: _head(nd.scatter_rows(a, idx, 6), 16)), [a]

    simple("scatter_rows", build_scatter)

    segments = [[0, 1, 4], [2], [], [3, 0]]

    def build_segment_sum():
        a = _param("a", (5, 3), 1)
        return (lambda: _head(nd.segment_sum(a, segments), 17)), [a]

    simple("segment_sum", build_segment_sum)

    def build_segment_mean():
        a = _param("a", (5, 3), 1)
        return (lambda: _head(nd.segment_mean(a, segments), 18)), [a]

    simple("segment_mean", build_segment_mean)

    def build_segment_softmax():
        s = _param("s", (6, 1), 7)
        parts = [[0, 3], [1, 2, 5], [4]]
        return (lambda: _head(nd.segment_softmax(s, parts), 19)), [s]

    simple("segment_softmax", build_segment_softmax)

    def build_add_rowvec():
        a = _param("a", (4, 3), 1)
        v = _param("v", (1, 3), 2)
        return (lambda: _head(nd.add_rowvec(a, v), 20)), [a, v]

    simple("add_rowvec", build_add_rowvec)

    def build_mul_rowvec():
        a = _param("a", (4, 3), 1)
        v = _param("v", (1, 3), 2)
        return (lambda: _head(nd.mul_rowvec(a, v), 21)), [a, v]

    simple("mul_rowvec", build_mul_rowvec)

    def build_scale_rows():
        a = _param("a", (4, 3), 1)
        s = _param("s", (4, 1), 2)
        return (lambda: _head(nd.scale_rows(a, s), 22)), [a, s]

    simple("scale_rows", build_scale_rows)

    return checks


def _encoder_checks() -> list[tuple[str, Callable[[float], dict]]]:
    ds = toy_dataset()
    mg = toy_message_graph(ds)
    cfg = toy_config()
    checks = []

    def with_model(name: str, scalar_fn):
        def run(tol: float) -> dict:
            model = build_model(cfg, ds.f_dim, ds.n_types)
            x = DiffNode(ds.features.copy())
            params = list(model.params.values())
            return finite_diff_check(lambda: scalar_fn(model, x), params, tol=tol)

        checks.append((name, run))

    with_model("encoder.lcp", lambda m, x: _head(lcp_forward(x, mg, m.encoder.lcp), 30))
    with_model("encoder.mcp", lambda m, x: _head(mcp_forward(x, mg, m.encoder.mcp), 31))
    with_model(
        "encoder.graphnorm",
        lambda m, x: _head(graphnorm(lcp_forward(x, mg, m.encoder.lcp), m.encoder.gn_lcp), 32),
    )
    with_model(
        "encoder.ssgattn",
        lambda m, x: _head(
            ssgattn_forward(
                nd.concat_cols(
                    graphnorm(lcp_forward(x, mg, m.encoder.lcp), m.encoder.gn_lcp),
                    graphnorm(mcp_forward(x, mg, m.encoder.mcp), m.encoder.gn_mcp),
                ),
                mg,
                m.encoder.attn,
            ).x_o,
            33,
        ),
    )

    def full(m, x):
        out = encode(x, mg, m.encoder)
        return nd.add(_head(out.x_o, 34), _head(out.edge_prob, 35))

    with_model("encoder.encode", full)
    return checks


def _vgae_checks() -> list[tuple[str, Callable[[float], dict]]]:
    ds = toy_dataset()
    cfg = toy_config()
    d1 = np.array([0, 1, 2, 3])
    d2 = np.array([1, 2, 3, 5])
    t = np.array([0, 1, 1, 0])
    labels = np.array([1.0, 0.0, 1.0, 0.0])
    rng = np.random.default_rng(21)
    x_o_fixed = rng.normal(size=(6, cfg.d_out))
    eps = rng.standard_normal((4, cfg.latent_dim))
    checks = []

    def with_model(name: str, scalar_fn):
        def run(tol: float) -> dict:
            model = build_model(cfg, ds.f_dim, ds.n_types)
            return finite_diff_check(lambda: scalar_fn(model), list(model.params.values()), tol=tol)

        checks.append((name, run))

    def latent(model):
        struct, prop = vgae.pair_input(DiffNode(x_o_fixed), DiffNode(ds.features.copy()), d1, d2)
        mu, ls = vgae.latent_encode(struct, prop, model.latent)
        return nd.add(_head(mu, 40), _head(ls, 41))

    with_model("vgae.latent_encode", latent)

    def chain(model):
        struct, prop = vgae.pair_input(DiffNode(x_o_fixed), DiffNode(ds.features.copy()), d1, d2)
        mu, ls = vgae.latent_encode(struct, prop, model.latent)
        e = vgae.reparameterize(mu, ls, mode="train", eps=eps)
        z_dec = vgae.decode(e, t, model.decoder, model.emb)
        logit = vgae.predict_logit(z_dec, model.decoder)
        return objectives.ce_loss(logit, labels)

    with_model("vgae.ce_predict_decode_reparam_latent", chain)
    return checks


def _loss_checks() -> list[tuple[str, Callable[[float], dict]]]:
    checks = []

    def ce(tol: float) -> dict:
        z = _param("logits", (6, 1), 8)
        y = np.array([1, 0, 1, 1, 0, 0])
        return finite_diff_check(lambda: objectives.ce_loss(z, y), [z], tol=tol)

    checks.append(("loss.ce", ce))

    def kl(tol: float) -> dict:
        mu = _param("mu", (4, 3), 9)
        ls = _param("log_sigma", (4, 3), 10)
        return finite_diff_check(lambda: objectives.kl_loss(mu, ls), [mu, ls], tol=tol)

    checks.append(("loss.kl", kl))

    def ss(tol: float) -> dict:
        scores = _param("scores", (8, 1), 11)
        y = np.array([1, 1, 1, 1, 0, 0, 0, 0])
        return finite_diff_check(
            lambda: objectives.ss_loss(nd.sigmoid(scores), y, p_e=0.8, seed=5), [scores], tol=tol
        )

    checks.append(("loss.ss_subsampled", ss))

    def full(tol: float) -> dict:
        ds = toy_dataset()
        mg = toy_message_graph(ds)
        cfg = toy_config()
        model = build_model(cfg, ds.f_dim, ds.n_types)
        pos = [PairExample(*e, 1) for e in ds.edges]
        neg = sample_negatives(ds, pos, seed=99)
        arrays = pairs_to_arrays(pos + neg)
        eps = np.random.default_rng(17).standard_normal((len(pos) + len(neg), cfg.latent_dim))
        ss_neg = sample_ss_negatives(mg, mg.edges.shape[0], ds.n_drugs, seed=23)
        features_node = DiffNode(ds.features.copy())

        def f():
            return build_training_loss(
                model, features_node, mg, arrays, ss_neg, p_e=0.8, ss_seed=77, eps=eps
            ).node

        return finite_diff_check(f, list(model.params.values()), tol=tol)

    checks.append(("loss.full_toy_graph", full))
    return checks


def run_checks(scope: str = "all", tol: float = 1e-4) -> list[dict]:
    """Run the selected suite; one result dict per registered check."""
    if scope not in SCOPES:
        raise nd.ContractError(f"unknown gradcheck scope {scope!r}; choose from {SCOPES}")
    suites: list[tuple[str, Callable[[float], dict]]] = []
    if scope in ("all", "ndtensor"):
        suites += _op_checks()
    if scope in ("all", "encoder"):
        suites += _encoder_checks()
    if scope in ("all", "vgae"):
        suites += _vgae_checks()
    if scope in ("all", "loss"):
        suites += _loss_checks()
    results = []
    for name, run in suites:
        report = run(tol)
        results.append(
            {
                "name": name,
                "max_rel_err": report["max_rel_err"],
                "pass": report["pass"],
                "n_coords": report["n_coords"],
            }
        )
    return results
