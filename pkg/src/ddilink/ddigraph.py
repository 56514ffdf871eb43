"""Data model for the heterogeneous drug-interaction graph.

Covers file ingestion, train/valid/test splitting, negative sampling, the
undirected message graph used by the node encoders, and a stochastic-block
synthetic generator for desk-scale experiments.

File formats (UTF-8, tab-separated, ``#`` starts a comment line):

* edges:    ``drug1_id<TAB>drug2_id<TAB>type_id`` with integer type ids.
* features: header ``drug_id<TAB>f0<TAB>f1...`` then one row per drug.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .ndtensor import ContractError, DomainError

__all__ = [
    "ParseError",
    "UnknownDrugError",
    "SaturationError",
    "PairExample",
    "DDIDataset",
    "Split",
    "MessageGraph",
    "load_edges",
    "load_features",
    "load_dataset",
    "save_dataset",
    "split",
    "sample_negatives",
    "build_message_graph",
    "synth_generate",
]


class ParseError(ValueError):
    """A data file line did not match the expected format."""


class UnknownDrugError(KeyError):
    """A drug id was referenced that the dataset does not contain."""


class SaturationError(RuntimeError):
    """Negative sampling could not find an absent triple."""


@dataclass(frozen=True)
class PairExample:
    """A (drug1, drug2, type) triple with a binary interaction label."""

    d1: int
    d2: int
    t: int
    label: int


@dataclass(eq=False)
class DDIDataset:
    """Drug nodes, per-drug feature vectors, and typed interaction edges.

    Edges are stored ordered (direction matters for prediction); indices
    refer to positions in ``drug_ids``.
    """

    drug_ids: list[str]
    features: np.ndarray  # [n_drugs, f_dim]
    edges: list[tuple[int, int, int]]
    n_types: int

    def __post_init__(self) -> None:
        n = len(self.drug_ids)
        if self.features.shape[0] != n:
            raise ContractError(f"features rows ({self.features.shape[0]}) != drugs ({n})")
        if self.features.size and not np.all(np.isfinite(self.features)):
            raise DomainError("non-finite feature value")
        seen = set()
        for d1, d2, t in self.edges:
            if not (0 <= d1 < n and 0 <= d2 < n):
                raise IndexError(f"edge endpoint out of range: ({d1}, {d2})")
            if not 0 <= t < self.n_types:
                raise IndexError(f"edge type {t} out of range for {self.n_types} types")
            if (d1, d2, t) in seen:
                raise ContractError(f"duplicate edge triple ({d1}, {d2}, {t})")
            seen.add((d1, d2, t))

    @property
    def n_drugs(self) -> int:
        return len(self.drug_ids)

    @property
    def f_dim(self) -> int:
        return self.features.shape[1]

    @cached_property
    def positive_set(self) -> frozenset[tuple[int, int, int]]:
        return frozenset(self.edges)


@dataclass(frozen=True)
class Split:
    """Disjoint, exhaustive edge-index lists for train/valid/test."""

    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    seed: int


@dataclass(eq=False)
class MessageGraph:
    """Undirected, type-collapsed adjacency built from training edges only.

    Defines the neighborhoods and degrees the encoders aggregate over.
    ``edges`` lists each undirected pair once with i < j.
    """

    adjacency: list[list[int]]
    degrees: np.ndarray
    edges: np.ndarray  # [E, 2]

    @cached_property
    def neighbor_sets(self) -> list[frozenset[int]]:
        return [frozenset(nbrs) for nbrs in self.adjacency]


# ---------------------------------------------------------------------------
# file ingestion
# ---------------------------------------------------------------------------


def _data_lines(path: str | Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            yield lineno, line


def load_edges(path: str | Path) -> tuple[list[str], list[tuple[int, int, int]]]:
    """Parse an edges file into (drug_ids, triples).

    Drug ids are ordered by first appearance. Duplicate triples reject the
    whole file with a count of the offenders.
    """
    drug_ids: list[str] = []
    index: dict[str, int] = {}
    triples: list[tuple[int, int, int]] = []
    seen: set[tuple[int, int, int]] = set()
    duplicates = 0
    for lineno, line in _data_lines(path):
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        d1_id, d2_id, t_str = parts
        try:
            t = int(t_str)
        except ValueError:
            raise ParseError(f"{path}:{lineno}: type id {t_str!r} is not an integer") from None
        if t < 0:
            raise ParseError(f"{path}:{lineno}: type id must be non-negative, got {t}")
        for did in (d1_id, d2_id):
            if did not in index:
                index[did] = len(drug_ids)
                drug_ids.append(did)
        triple = (index[d1_id], index[d2_id], t)
        if triple in seen:
            duplicates += 1
            continue
        seen.add(triple)
        triples.append(triple)
    if duplicates:
        raise ParseError(f"{path}: {duplicates} duplicate edge triple(s)")
    return drug_ids, triples


def load_features(path: str | Path, drug_ids: Sequence[str], allow_missing: bool = False) -> np.ndarray:
    """Parse a features file into a matrix aligned to ``drug_ids`` order.

    Drugs listed but absent from the file raise unless ``allow_missing``,
    in which case their rows are zero-filled.
    """
    lines = iter(_data_lines(path))
    try:
        _, header = next(lines)
    except StopIteration:
        raise ParseError(f"{path}: missing header row") from None
    cols = header.split("\t")
    if len(cols) < 2 or cols[0] != "drug_id":
        raise ParseError(f"{path}: header must start with 'drug_id' and name at least one feature")
    f_dim = len(cols) - 1
    index = {did: i for i, did in enumerate(drug_ids)}
    mat = np.zeros((len(drug_ids), f_dim))
    present = np.zeros(len(drug_ids), dtype=bool)
    for lineno, line in lines:
        parts = line.split("\t")
        if len(parts) != f_dim + 1:
            raise ParseError(f"{path}:{lineno}: expected {f_dim + 1} fields, got {len(parts)}")
        did = parts[0]
        if did not in index:
            raise UnknownDrugError(f"{path}:{lineno}: unknown drug id {did!r}")
        row = index[did]
        if present[row]:
            raise ParseError(f"{path}:{lineno}: duplicate feature row for {did!r}")
        for col, text in enumerate(parts[1:]):
            try:
                value = float(text)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: column {col} value {text!r} is not a number") from None
            if not np.isfinite(value):
                raise DomainError(f"{path}:{lineno}: non-finite value in column {col}")
            mat[row, col] = value
        present[row] = True
    if not allow_missing and not present.all():
        missing = [drug_ids[i] for i in np.flatnonzero(~present)]
        raise UnknownDrugError(f"{path}: no feature row for drug(s) {missing[:5]}")
    return mat


def load_dataset(edges_path: str | Path, features_path: str | Path, allow_missing: bool = False) -> DDIDataset:
    drug_ids, triples = load_edges(edges_path)
    features = load_features(features_path, drug_ids, allow_missing=allow_missing)
    n_types = max(t for _, _, t in triples) + 1 if triples else 0
    return DDIDataset(drug_ids=drug_ids, features=features, edges=triples, n_types=n_types)


def save_dataset(dataset: DDIDataset, edges_path: str | Path, features_path: str | Path) -> None:
    """Write the dataset back out in the canonical two-file format."""
    with open(edges_path, "w", encoding="utf-8") as fh:
        for d1, d2, t in dataset.edges:
            fh.write(f"{dataset.drug_ids[d1]}\t{dataset.drug_ids[d2]}\t{t}\n")
    with open(features_path, "w", encoding="utf-8") as fh:
        header = "drug_id\t" + "\t".join(f"f{k}" for k in range(dataset.f_dim))
        fh.write(header + "\n")
        for i, did in enumerate(dataset.drug_ids):
            row = "\t".join(repr(v) for v in dataset.features[i])
            fh.write(f"{did}\t{row}\n")


# ---------------------------------------------------------------------------
# splitting and sampling
# ---------------------------------------------------------------------------


def split(dataset: DDIDataset, ratios: tuple[float, float, float], seed: int) -> Split:
    """Deterministic shuffled split of edge indices by the given ratios."""
    r_train, r_valid, r_test = ratios
    if min(ratios) <= 0:
        raise ContractError(f"split ratios must be positive, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ContractError(f"split ratios must sum to 1, got {sum(ratios)}")
    n = len(dataset.edges)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = round(n * r_train)
    n_valid = round(n * r_valid)
    return Split(
        train=perm[:n_train].copy(),
        valid=perm[n_train : n_train + n_valid].copy(),
        test=perm[n_train + n_valid :].copy(),
        seed=seed,
    )


def sample_negatives(dataset: DDIDataset, positives: Sequence[PairExample], seed: int) -> list[PairExample]:
    """One negative per positive by uniform single-endpoint corruption.

    A fair coin picks which endpoint to replace; the replacement is drawn
    uniformly over all drugs and resampled until the triple is absent from
    the dataset's full positive set.
    """
    if not positives:
        raise ContractError("sample_negatives requires a non-empty positive list")
    pos_set = dataset.positive_set
    n = dataset.n_drugs
    rng = np.random.default_rng(seed)
    out: list[PairExample] = []
    for ex in positives:
        for _ in range(1000):
            corrupt_d1 = rng.random() < 0.5
            repl = int(rng.integers(n))
            cand = (repl, ex.d2, ex.t) if corrupt_d1 else (ex.d1, repl, ex.t)
            if cand not in pos_set:
                out.append(PairExample(cand[0], cand[1], cand[2], 0))
                break
        else:
            raise SaturationError(f"no absent triple found for ({ex.d1}, {ex.d2}, {ex.t}) after 1000 attempts")
    return out


def build_message_graph(dataset: DDIDataset, train_edge_indices: Sequence[int]) -> MessageGraph:
    """Collapse the selected edges into a symmetric, self-loop-free adjacency.

    Parallel edges of different types become a single neighbor entry; only
    the given (training) edges contribute, so held-out edges never leak
    into the neighborhoods.
    """
    n = dataset.n_drugs
    nbrs: list[set[int]] = [set() for _ in range(n)]
    pairs: set[tuple[int, int]] = set()
    for i in train_edge_indices:
        d1, d2, _ = dataset.edges[int(i)]
        if d1 == d2:
            continue
        nbrs[d1].add(d2)
        nbrs[d2].add(d1)
        pairs.add((min(d1, d2), max(d1, d2)))
    adjacency = [sorted(s) for s in nbrs]
    degrees = np.array([len(s) for s in adjacency], dtype=np.intp)
    edges = np.array(sorted(pairs), dtype=np.intp).reshape(-1, 2)
    return MessageGraph(adjacency=adjacency, degrees=degrees, edges=edges)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def synth_generate(
    n_drugs: int,
    n_types: int,
    n_blocks: int,
    f_dim: int,
    p_in: float,
    p_out: float,
    seed: int,
) -> DDIDataset:
    """Stochastic-block dataset with block- and degree-correlated features.

    Drugs are assigned to ``n_blocks`` equal-sized blocks. Each unordered
    pair gets an edge with probability p_in (same block) or p_out (cross
    block), with random orientation and a type drawn from a block-pair
    specific distribution. Features are the block one-hot plus N(0, 0.3^2)
    noise, four degree-correlated columns, and noise padding, so both the
    neighborhood and the degree-bucket encoders have signal to find.
    Isolated drugs are given one fallback edge so every drug appears in the
    edge file (the serialized formats define the drug universe by the
    edges).
    """
    if n_blocks < 2:
        raise ContractError(f"n_blocks must be >= 2, got {n_blocks}")
    if not (0 <= p_out < p_in <= 1):
        raise ContractError(f"need 0 <= p_out < p_in <= 1, got p_in={p_in}, p_out={p_out}")
    if n_drugs < n_blocks:
        raise ContractError(f"n_drugs ({n_drugs}) must be >= n_blocks ({n_blocks})")
    if f_dim < n_blocks + 4:
        raise ContractError(f"f_dim ({f_dim}) must be >= n_blocks + 4 ({n_blocks + 4})")
    if n_types < 1:
        raise ContractError(f"n_types must be >= 1, got {n_types}")

    rng = np.random.default_rng(seed)
    blocks = np.repeat(np.arange(n_blocks), np.diff(np.linspace(0, n_drugs, n_blocks + 1).astype(int)))

    # One categorical type distribution per unordered block pair.
    type_probs: dict[tuple[int, int], np.ndarray] = {}
    for a in range(n_blocks):
        for b in range(a, n_blocks):
            type_probs[(a, b)] = rng.dirichlet(np.full(n_types, 0.5))

    edges: list[tuple[int, int, int]] = []
    for u in range(n_drugs):
        for v in range(u + 1, n_drugs):
            p = p_in if blocks[u] == blocks[v] else p_out
            if rng.random() >= p:
                continue
            key = (min(blocks[u], blocks[v]), max(blocks[u], blocks[v]))
            t = int(rng.choice(n_types, p=type_probs[key]))
            if rng.random() < 0.5:
                edges.append((u, v, t))
            else:
                edges.append((v, u, t))

    touched = np.zeros(n_drugs, dtype=bool)
    for d1, d2, _ in edges:
        touched[d1] = touched[d2] = True
    pair_set = {(min(d1, d2), max(d1, d2)) for d1, d2, _ in edges}
    for u in np.flatnonzero(~touched):
        mates = [v for v in np.flatnonzero(blocks == blocks[u]) if v != u]
        if not mates:
            mates = [v for v in range(n_drugs) if v != u]
        v = int(rng.choice(mates))
        key = (min(blocks[u], blocks[v]), max(blocks[u], blocks[v]))
        t = int(rng.choice(n_types, p=type_probs[key]))
        edges.append((int(u), v, t))
        pair_set.add((min(int(u), v), max(int(u), v)))

    deg = np.zeros(n_drugs)
    for a, b in pair_set:
        deg[a] += 1
        deg[b] += 1

    features = rng.normal(0.0, 0.3, size=(n_drugs, f_dim))
    features[np.arange(n_drugs), blocks] += 1.0
    for k, col in enumerate((deg, np.sqrt(deg), np.log1p(deg), deg**2)):
        std = col.std()
        centered = (col - col.mean()) / (std if std > 0 else 1.0)
        features[:, n_blocks + k] += centered

    return DDIDataset(
        drug_ids=[f"D{k:04d}" for k in range(n_drugs)],
        features=features,
        edges=edges,
        n_types=n_types,
    )


def synth_meta(n_drugs, n_types, n_blocks, f_dim, p_in, p_out, seed, dataset: DDIDataset) -> dict:
    """Sidecar record of the generator parameters and resulting counts."""
    return {
        "generator": "stochastic_block",
        "n_drugs": n_drugs,
        "n_types": n_types,
        "n_blocks": n_blocks,
        "f_dim": f_dim,
        "p_in": p_in,
        "p_out": p_out,
        "seed": seed,
        "n_edges": len(dataset.edges),
    }


def write_meta(meta: dict, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
