"""Training loop, evaluation metrics, checkpointing, and novel-pair ranking.

Training is full batch: every epoch encodes the whole graph once, scores
all training pairs (positives plus freshly corrupted negatives), sums the
three loss terms, backpropagates, and takes one Adam step. Validation
metrics are recorded each epoch against a fixed negative sample, and the
parameters with the best validation AUROC are the ones returned.

Everything is deterministic given (dataset, config): each random choice
draws from a generator derived from the config seed and the epoch.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import encoder as enc_mod
from . import ndtensor as nd
from . import objectives, vgae
from .ddigraph import (
    DDIDataset,
    MessageGraph,
    PairExample,
    SaturationError,
    Split,
    build_message_graph,
    sample_negatives,
    split,
)
from .ndtensor import ContractError, DiffNode, Parameter

logger = logging.getLogger(__name__)

__all__ = [
    "TrainingDivergedError",
    "CheckpointError",
    "TrainConfig",
    "Metrics",
    "Model",
    "AdamState",
    "build_model",
    "init_adam_state",
    "adam_step",
    "pairs_to_arrays",
    "sample_ss_negatives",
    "build_training_loss",
    "train",
    "predict_pairs",
    "evaluate",
    "compute_metrics",
    "auroc_score",
    "auprc_score",
    "run_repeated",
    "format_mean_std",
    "rank_novel",
    "format_rank_tsv",
    "checkpoint_save",
    "checkpoint_load",
    "write_metrics_log",
]

_CKPT_MAGIC = b"DDILNK01"
_CKPT_VERSION = 1

# seed channels for streams that must stay fixed across epochs
_VALID_NEG_CHANNEL = 101
_TEST_NEG_CHANNEL = 202
_CAND_CHANNEL = 303


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite."""


class CheckpointError(RuntimeError):
    """A checkpoint file could not be read or does not match the model."""


def derive_seed(*parts: int) -> int:
    """A stable integer seed mixed from the given parts."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


@dataclass
class TrainConfig:
    """Hyperparameters for one training run. Defaults follow the reference
    protocol (300 epochs at learning rate 0.001) and 64-wide hidden sizes."""

    lr: float = 0.001
    epochs: int = 300
    seed: int = 0
    latent_dim: int = 64
    d_hid: int = 64
    d_out: int = 64
    t_dim: int = 32
    p_e: float = 0.8
    max_degree_bucket: int = 16
    leaky_slope: float = 0.2
    use_lcp: bool = True
    use_mcp: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    graphnorm_eps: float = 1e-5
    mlp_hidden: tuple[int, ...] = (128, 64)

    def validate(self) -> None:
        if self.lr <= 0:
            raise ContractError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if not (self.use_lcp or self.use_mcp):
            raise ContractError("at least one of use_lcp/use_mcp must be true")
        if not 0.0 < self.p_e <= 1.0:
            raise ContractError(f"p_e must be in (0, 1], got {self.p_e}")
        if self.max_degree_bucket < 0:
            raise ContractError("max_degree_bucket must be >= 0")
        for name in ("latent_dim", "d_hid", "d_out", "t_dim"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ContractError("adam betas must lie in [0, 1)")
        if self.graphnorm_eps <= 0:
            raise ContractError("graphnorm_eps must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mlp_hidden"] = list(self.mlp_hidden)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractError(f"unknown config key(s): {sorted(unknown)}")
        kwargs = dict(data)
        if "mlp_hidden" in kwargs:
            kwargs["mlp_hidden"] = tuple(kwargs["mlp_hidden"])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


@dataclass
class Metrics:
    """Threshold-0.5 accuracy/F1 plus ranking metrics; AUROC/AUPRC are None
    when only one class is present."""

    accuracy: float
    auroc: float | None
    auprc: float | None
    f1: float
    n_pos: int
    n_neg: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class Model:
    """The full pair predictor: encoder, latent maps, type embedding, decoder.

    ``params`` maps stable names to the trainable leaves in a fixed order;
    optimizers and checkpoints key off it.
    """

    def __init__(self, config: TrainConfig, d_in: int, n_types: int):
        config.validate()
        if n_types < 1:
            raise ContractError(f"n_types must be >= 1, got {n_types}")
        self.config = config
        self.d_in = d_in
        self.n_types = n_types
        rng = np.random.default_rng(config.seed)
        self.encoder = enc_mod.init_encoder_params(
            rng,
            d_in=d_in,
            d_hid=config.d_hid,
            d_out=config.d_out,
            max_degree_bucket=config.max_degree_bucket,
            leaky_slope=config.leaky_slope,
            graphnorm_eps=config.graphnorm_eps,
            use_lcp=config.use_lcp,
            use_mcp=config.use_mcp,
        )
        self.latent = vgae.init_latent_params(rng, 2 * config.d_out + 2 * d_in, config.latent_dim)
        self.emb = vgae.init_type_embedding(rng, n_types, config.t_dim)
        self.decoder = vgae.init_decoder_params(rng, config.latent_dim + config.t_dim, config.mlp_hidden)
        self.best_epoch: int | None = None

        self.params: dict[str, Parameter] = {}
        for p in (
            enc_mod.encoder_parameters(self.encoder)
            + vgae.latent_parameters(self.latent)
            + vgae.decoder_parameters(self.decoder, self.emb)
        ):
            if p.name in self.params:
                raise ContractError(f"duplicate parameter name {p.name!r}")
            self.params[p.name] = p

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.params.items()}

    def restore(self, snapshot: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            p.value = snapshot[name].copy()


def build_model(config: TrainConfig, d_in: int, n_types: int) -> Model:
    return Model(config, d_in, n_types)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def init_adam_state(params: dict[str, Parameter]) -> AdamState:
    return AdamState(
        m={name: np.zeros_like(p.value) for name, p in params.items()},
        v={name: np.zeros_like(p.value) for name, p in params.items()},
        t=0,
    )


def adam_step(
    params: dict[str, Parameter],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One Adam update with bias correction, in place."""
    b1, b2 = betas
    state.t += 1
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = p.ensure_grad()
        m = state.m[name]
        v = state.v[name]
        if m.shape != p.value.shape:
            raise nd.DimensionError(f"adam state for {name!r} has shape {m.shape}, param {p.value.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------------------
# forward passes and the training loss
# ---------------------------------------------------------------------------


def pairs_to_arrays(pairs: Sequence[PairExample]):
    d1 = np.array([p.d1 for p in pairs], dtype=np.intp)
    d2 = np.array([p.d2 for p in pairs], dtype=np.intp)
    t = np.array([p.t for p in pairs], dtype=np.intp)
    y = np.array([p.label for p in pairs], dtype=np.float64)
    return d1, d2, t, y


def _pair_logits(model: Model, x_o: DiffNode, features_node: DiffNode, d1, d2, t, mode: str, eps=None, seed=0):
    struct, prop = vgae.pair_input(x_o, features_node, d1, d2)
    mu, log_sigma = vgae.latent_encode(struct, prop, model.latent)
    e = vgae.reparameterize(mu, log_sigma, mode=mode, seed=seed, eps=eps)
    z_dec = vgae.decode(e, t, model.decoder, model.emb)
    return vgae.predict_logit(z_dec, model.decoder), mu, log_sigma


def sample_ss_negatives(mg: MessageGraph, n_samples: int, n_drugs: int, seed: int) -> np.ndarray:
    """Uniform non-edges of the message graph (no self pairs)."""
    if n_samples == 0:
        return np.zeros((0, 2), dtype=np.intp)
    if n_drugs < 2:
        raise SaturationError("cannot sample non-edges with fewer than two drugs")
    sets = mg.neighbor_sets
    rng = np.random.default_rng(seed)
    out = np.zeros((n_samples, 2), dtype=np.intp)
    for k in range(n_samples):
        for _ in range(1000):
            i = int(rng.integers(n_drugs))
            j = int(rng.integers(n_drugs))
            if i != j and j not in sets[i]:
                out[k, 0] = i
                out[k, 1] = j
                break
        else:
            raise SaturationError("no non-edge found after 1000 attempts; graph too dense")
    return out


def build_training_loss(
    model: Model,
    features_node: DiffNode,
    mg: MessageGraph,
    pair_arrays,
    ss_neg_pairs: np.ndarray,
    p_e: float,
    ss_seed: int,
    eps: np.ndarray,
) -> objectives.LossBreakdown:
    """One full-batch forward pass producing the three-term loss.

    Shared by the training loop and the end-to-end gradient checks: the
    caller supplies the sampled negatives, the self-supervision negatives,
    and the frozen reparameterization noise, so the result is a
    deterministic function of the parameters.
    """
    enc_out = enc_mod.encode(features_node, mg, model.encoder)
    d1, d2, t, y = pair_arrays
    logit, mu, log_sigma = _pair_logits(model, enc_out.x_o, features_node, d1, d2, t, mode="train", eps=eps)
    ce = objectives.ce_loss(logit, y)
    kl = objectives.kl_loss(mu, log_sigma)

    n_edges = mg.edges.shape[0]
    n_neg = ss_neg_pairs.shape[0]
    if n_edges + n_neg == 0:
        ss = DiffNode(np.zeros((1, 1)))
    else:
        phi = enc_out.edge_prob
        if n_neg:
            phi = nd.concat_rows(phi, enc_mod.edge_prob_for_pairs(enc_out.proj, ss_neg_pairs))
        ss_labels = np.concatenate([np.ones(n_edges), np.zeros(n_neg)])
        ss = objectives.ss_loss(phi, ss_labels, p_e, ss_seed)
    return objectives.total_loss(ce, kl, ss)


def _scores_for_pairs(model: Model, x_o_value: np.ndarray, features_node: DiffNode, pairs) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode probabilities and logits, reusing a computed embedding."""
    d1, d2, t, _ = pairs if isinstance(pairs, tuple) else pairs_to_arrays(pairs)
    x_o = DiffNode(x_o_value)
    logit, _, _ = _pair_logits(model, x_o, features_node, d1, d2, t, mode="eval")
    z = logit.value[:, 0]
    return nd._sigmoid(z.reshape(-1, 1))[:, 0], z


def predict_pairs(model: Model, dataset: DDIDataset, mg: MessageGraph, pairs: Sequence[PairExample]) -> np.ndarray:
    """Deterministic eval-mode probabilities for a list of pairs."""
    features_node = DiffNode(np.asarray(dataset.features, dtype=np.float64))
    enc_out = enc_mod.encode(features_node, mg, model.encoder)
    probs, _ = _scores_for_pairs(model, enc_out.x_o.value, features_node, pairs)
    return probs


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _midranks(values: np.ndarray) -> np.ndarray:
    """Average ranks (1-based) with midranks for ties."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j < len(values) and sorted_vals[j] == sorted_vals[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + 1 + j)
        i = j
    return ranks


def auroc_score(labels: np.ndarray, scores: np.ndarray) -> float | None:
    """Mann-Whitney AUROC with tie midranks; None if one class is missing."""
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _midranks(np.asarray(scores, dtype=np.float64))
    rank_sum = ranks[labels].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auprc_score(labels: np.ndarray, scores: np.ndarray) -> float | None:
    """Area under precision-recall by step integration over score thresholds.

    Tied scores are processed as one threshold step.
    """
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        return None
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    tp = fp = 0
    prev_recall = 0.0
    area = 0.0
    i = 0
    n = labels.size
    while i < n:
        j = i
        while j < n and s[j] == s[i]:
            j += 1
        tp += int(y[i:j].sum())
        fp += (j - i) - int(y[i:j].sum())
        recall = tp / n_pos
        precision = tp / (tp + fp)
        area += (recall - prev_recall) * precision
        prev_recall = recall
        i = j
    return float(area)


def compute_metrics(labels, probs, threshold: float = 0.5) -> Metrics:
    labels = np.asarray(labels, dtype=bool)
    probs = np.asarray(probs, dtype=np.float64)
    if labels.size == 0:
        raise ContractError("compute_metrics over an empty pair set")
    preds = probs >= threshold
    accuracy = float((preds == labels).mean())
    tp = int((preds & labels).sum())
    fp = int((preds & ~labels).sum())
    fn = int((~preds & labels).sum())
    f1 = 2.0 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) > 0 else 0.0
    return Metrics(
        accuracy=accuracy,
        auroc=auroc_score(labels, probs),
        auprc=auprc_score(labels, probs),
        f1=float(f1),
        n_pos=int(labels.sum()),
        n_neg=int((~labels).sum()),
    )


def evaluate(model: Model, dataset: DDIDataset, mg: MessageGraph, pairs: Sequence[PairExample]) -> Metrics:
    """Metrics for labeled pairs under the frozen (eval-mode) model."""
    if not pairs:
        raise ContractError("evaluate requires a non-empty pair list")
    probs = predict_pairs(model, dataset, mg, pairs)
    return compute_metrics([p.label for p in pairs], probs)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def train(dataset: DDIDataset, split_: Split, config: TrainConfig, adam_state: AdamState | None = None):
    """Run the optimization loop and return (model, history).

    The returned model carries the parameters of the epoch with the best
    validation AUROC. History has one dict per epoch with the loss
    breakdown, train accuracy, and validation metrics; identical
    (dataset, config) inputs reproduce it bitwise.
    """
    config.validate()
    model = build_model(config, d_in=dataset.f_dim, n_types=dataset.n_types)
    mg = build_message_graph(dataset, split_.train)
    features_node = DiffNode(np.asarray(dataset.features, dtype=np.float64))

    train_pos = [PairExample(*dataset.edges[int(i)], 1) for i in split_.train]
    valid_pos = [PairExample(*dataset.edges[int(i)], 1) for i in split_.valid]
    if not train_pos:
        raise ContractError("empty training split")
    valid_pairs: list[PairExample] = []
    if valid_pos:
        valid_neg = sample_negatives(dataset, valid_pos, seed=derive_seed(config.seed, _VALID_NEG_CHANNEL))
        valid_pairs = valid_pos + valid_neg

    state = adam_state if adam_state is not None else init_adam_state(model.params)
    history: list[dict] = []
    best_auroc = -np.inf
    best_snapshot = model.snapshot()
    best_epoch = 0

    for epoch in range(config.epochs):
        train_neg = sample_negatives(dataset, train_pos, seed=config.seed ^ epoch)
        train_pairs = train_pos + train_neg
        arrays = pairs_to_arrays(train_pairs)
        eps = np.random.default_rng(derive_seed(config.seed, epoch, 2)).standard_normal(
            (len(train_pairs), config.latent_dim)
        )
        ss_neg = sample_ss_negatives(
            mg, mg.edges.shape[0], dataset.n_drugs, seed=derive_seed(config.seed, epoch, 3)
        )
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            try:
                breakdown = build_training_loss(
                    model,
                    features_node,
                    mg,
                    arrays,
                    ss_neg,
                    config.p_e,
                    ss_seed=derive_seed(config.seed, epoch, 1),
                    eps=eps,
                )
            except objectives.NumericError as err:
                raise TrainingDivergedError(f"epoch {epoch}: {err}") from err
            nd.zero_grads(model.params.values())
            nd.backward(breakdown.node)
            adam_step(model.params, state, config.lr, betas=(config.beta1, config.beta2), eps=config.adam_eps)

            # post-update embeddings shared by the train-accuracy and validation passes
            enc_out = enc_mod.encode(features_node, mg, model.encoder)
            x_o_value = enc_out.x_o.value
        if not np.all(np.isfinite(x_o_value)):
            raise TrainingDivergedError(f"epoch {epoch}: non-finite node embeddings after update")

        train_probs, _ = _scores_for_pairs(model, x_o_value, features_node, arrays)
        train_accuracy = float(((train_probs >= 0.5) == (arrays[3] > 0.5)).mean())

        row = {
            "epoch": epoch,
            "ce": breakdown.ce,
            "kl": breakdown.kl,
            "ss": breakdown.ss,
            "total": breakdown.total,
            "train_accuracy": train_accuracy,
            "val_loss": None,
            "val_accuracy": None,
            "val_auroc": None,
            "val_auprc": None,
            "val_f1": None,
        }
        if valid_pairs:
            labels = np.array([p.label for p in valid_pairs], dtype=np.float64)
            probs, logits = _scores_for_pairs(model, x_o_value, features_node, valid_pairs)
            val_metrics = compute_metrics(labels, probs)
            val_loss = objectives.ce_loss(DiffNode(logits.reshape(-1, 1)), labels)
            row.update(
                val_loss=float(val_loss.value[0, 0]),
                val_accuracy=val_metrics.accuracy,
                val_auroc=val_metrics.auroc,
                val_auprc=val_metrics.auprc,
                val_f1=val_metrics.f1,
            )
            if val_metrics.auroc is not None and val_metrics.auroc > best_auroc:
                best_auroc = val_metrics.auroc
                best_snapshot = model.snapshot()
                best_epoch = epoch
        else:
            best_snapshot = model.snapshot()
            best_epoch = epoch
        history.append(row)
        if (epoch + 1) % 50 == 0 or epoch == config.epochs - 1:
            logger.info("epoch %d: total=%.4f train_acc=%.3f val_auroc=%s", epoch, breakdown.total, train_accuracy, row["val_auroc"])

    model.restore(best_snapshot)
    model.best_epoch = best_epoch
    return model, history


# ---------------------------------------------------------------------------
# repeated runs
# ---------------------------------------------------------------------------


def format_mean_std(mean: float, std: float, percent: bool = True) -> str:
    """Row formatting in the usual benchmark style, e.g. '98.21 +/- 0.17'."""
    scale_f = 100.0 if percent else 1.0
    return f"{mean * scale_f:.2f} ± {std * scale_f:.2f}"


def run_repeated(
    dataset: DDIDataset,
    config: TrainConfig,
    k: int = 5,
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seeds: Sequence[int] | None = None,
):
    """Train k times with seeds seed+0..k-1 and report mean/std test metrics.

    Each run reshuffles the split, the initialization, and every sampling
    stream from its own seed. Returns per-run metrics, aggregate mean and
    sample std per metric, formatted report rows, and the histories.
    """
    if k < 2:
        raise ContractError(f"run_repeated requires k >= 2, got {k}")
    if seeds is None:
        seeds = [config.seed + i for i in range(k)]
    elif len(seeds) != k:
        raise ContractError(f"expected {k} seeds, got {len(seeds)}")

    runs: list[Metrics] = []
    histories: list[list[dict]] = []
    for s in seeds:
        cfg = dataclasses.replace(config, seed=int(s))
        split_ = split(dataset, ratios, seed=int(s))
        model, history = train(dataset, split_, cfg)
        mg = build_message_graph(dataset, split_.train)
        test_pos = [PairExample(*dataset.edges[int(i)], 1) for i in split_.test]
        test_neg = sample_negatives(dataset, test_pos, seed=derive_seed(int(s), _TEST_NEG_CHANNEL))
        runs.append(evaluate(model, dataset, mg, test_pos + test_neg))
        histories.append(history)

    metric_names = ("accuracy", "auroc", "auprc", "f1")
    mean: dict[str, float] = {}
    std: dict[str, float] = {}
    rows: dict[str, str] = {}
    for name in metric_names:
        vals = np.array([getattr(m, name) for m in runs], dtype=np.float64)
        mean[name] = float(vals.mean())
        std[name] = float(vals.std(ddof=1))
        rows[name] = format_mean_std(mean[name], std[name])
    return {
        "runs": [m.to_dict() for m in runs],
        "mean": mean,
        "std": std,
        "rows": rows,
        "histories": histories,
        "seeds": [int(s) for s in seeds],
    }


# ---------------------------------------------------------------------------
# ranking
# ---------------------------------------------------------------------------


def rank_novel(
    model: Model,
    dataset: DDIDataset,
    mg: MessageGraph,
    candidates: Sequence[tuple[int, int, int]],
    top_k: int,
):
    """Score candidate triples absent from the positives, best first.

    Candidates that are known positives are dropped with a warning. Ties
    break lexicographically on (drug1 id, drug2 id, type).
    """
    novel = []
    dropped = 0
    for cand in candidates:
        if tuple(cand) in dataset.positive_set:
            dropped += 1
            logger.warning(
                "candidate (%s, %s, %d) is a known positive; excluded",
                dataset.drug_ids[cand[0]],
                dataset.drug_ids[cand[1]],
                cand[2],
            )
            continue
        novel.append(tuple(int(v) for v in cand))
    if dropped:
        logger.warning("excluded %d known-positive candidate(s)", dropped)
    if not novel:
        return []
    pairs = [PairExample(d1, d2, t, 0) for d1, d2, t in novel]
    probs = predict_pairs(model, dataset, mg, pairs)
    keyed = sorted(
        zip(novel, probs),
        key=lambda item: (-item[1], dataset.drug_ids[item[0][0]], dataset.drug_ids[item[0][1]], item[0][2]),
    )
    out = []
    for rank, ((d1, d2, t), p) in enumerate(keyed[: max(top_k, 0)], start=1):
        out.append(
            {
                "rank": rank,
                "drug1": dataset.drug_ids[d1],
                "drug2": dataset.drug_ids[d2],
                "type": t,
                "probability": float(p),
            }
        )
    return out


def format_rank_tsv(rows: Sequence[dict]) -> str:
    """TSV with the probability as a percentage with three decimals."""
    lines = ["rank\tdrug1\tdrug2\ttype_label\tprobability_percent"]
    for row in rows:
        lines.append(
            f"{row['rank']}\t{row['drug1']}\t{row['drug2']}\t{row['type']}\t{row['probability'] * 100:.3f}%"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _pack_record(name: str, arr: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    header = struct.pack("<H", len(encoded)) + encoded + struct.pack("<II", arr.shape[0], arr.shape[1])
    return header + arr.astype("<f8").tobytes(order="C")


def checkpoint_save(
    model: Model,
    path: str | Path,
    epoch: int,
    history: Sequence[dict] = (),
    adam_state: AdamState | None = None,
    extra: dict | None = None,
) -> None:
    """Write the binary parameter file and its JSON sidecar (path + '.json').

    Records are length-prefixed (name, shape, little-endian float64 rows);
    optimizer moments are stored under 'opt.m.' / 'opt.v.' prefixes.
    """
    records: list[tuple[str, np.ndarray]] = [(name, p.value) for name, p in model.params.items()]
    if adam_state is not None:
        records += [(f"opt.m.{name}", adam_state.m[name]) for name in model.params]
        records += [(f"opt.v.{name}", adam_state.v[name]) for name in model.params]
    payload = _CKPT_MAGIC + struct.pack("<II", _CKPT_VERSION, len(records))
    payload += b"".join(_pack_record(name, arr) for name, arr in records)
    Path(path).write_bytes(payload)

    sidecar = {
        "format_version": _CKPT_VERSION,
        "config": model.config.to_dict(),
        "d_in": model.d_in,
        "n_types": model.n_types,
        "epoch": epoch,
        "best_epoch": model.best_epoch,
        "adam_t": adam_state.t if adam_state is not None else None,
        "history": list(history),
        "extra": extra or {},
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_exact(buf: bytes, offset: int, size: int, what: str) -> tuple[bytes, int]:
    if offset + size > len(buf):
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf[offset : offset + size], offset + size


def checkpoint_load(path: str | Path):
    """Read a checkpoint, rebuild the model, and validate every record.

    Returns (model, info) where info carries epoch, history, optimizer
    state, and the sidecar extras. Unknown or missing parameter names and
    shape mismatches fail loudly without producing a partial model.
    """
    sidecar_path = Path(str(path) + ".json")
    if not Path(path).exists():
        raise CheckpointError(f"checkpoint file not found: {path}")
    if not sidecar_path.exists():
        raise CheckpointError(f"checkpoint sidecar not found: {sidecar_path}")
    buf = Path(path).read_bytes()
    head, offset = _read_exact(buf, 0, len(_CKPT_MAGIC), "magic")
    if head != _CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {head!r}")
    raw, offset = _read_exact(buf, offset, 8, "header")
    version, n_records = struct.unpack("<II", raw)
    if version != _CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {version} (expected {_CKPT_VERSION})")

    records: dict[str, np.ndarray] = {}
    for _ in range(n_records):
        raw, offset = _read_exact(buf, offset, 2, "record name length")
        (name_len,) = struct.unpack("<H", raw)
        raw, offset = _read_exact(buf, offset, name_len, "record name")
        name = raw.decode("utf-8")
        raw, offset = _read_exact(buf, offset, 8, "record shape")
        rows, cols = struct.unpack("<II", raw)
        raw, offset = _read_exact(buf, offset, rows * cols * 8, f"record {name!r} payload")
        records[name] = np.frombuffer(raw, dtype="<f8").reshape(rows, cols).copy()
    if offset != len(buf):
        raise CheckpointError(f"{len(buf) - offset} trailing byte(s) after the last record")

    try:
        sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise CheckpointError(f"unreadable checkpoint sidecar: {err}") from err
    if sidecar.get("format_version") != _CKPT_VERSION:
        raise CheckpointError(f"sidecar format_version {sidecar.get('format_version')} != {_CKPT_VERSION}")
    config = TrainConfig.from_dict(sidecar["config"])
    model = build_model(config, d_in=int(sidecar["d_in"]), n_types=int(sidecar["n_types"]))
    model.best_epoch = sidecar.get("best_epoch")

    param_records = {n: a for n, a in records.items() if not n.startswith("opt.")}
    for name, p in model.params.items():
        if name not in param_records:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        if param_records[name].shape != p.value.shape:
            raise CheckpointError(
                f"parameter {name!r} has shape {param_records[name].shape}, expected {p.value.shape}"
            )
    unknown = set(param_records) - set(model.params)
    if unknown:
        raise CheckpointError(f"unknown parameter name(s) in checkpoint: {sorted(unknown)}")
    for name, p in model.params.items():
        p.value = param_records[name]

    adam_state = None
    if sidecar.get("adam_t") is not None:
        m = {name: records.get(f"opt.m.{name}") for name in model.params}
        v = {name: records.get(f"opt.v.{name}") for name in model.params}
        if any(arr is None for arr in m.values()) or any(arr is None for arr in v.values()):
            raise CheckpointError("optimizer state records are incomplete")
        adam_state = AdamState(m=m, v=v, t=int(sidecar["adam_t"]))

    info = {
        "epoch": int(sidecar["epoch"]),
        "history": sidecar.get("history", []),
        "adam_state": adam_state,
        "extra": sidecar.get("extra", {}),
    }
    return model, info


def write_metrics_log(history: Sequence[dict], path: str | Path) -> None:
    """One JSON object per line; key order fixed for reproducible bytes."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
