"""Command-line entry point.

Subcommands: synth (generate a synthetic dataset), train, eval, rank,
gradcheck, ablate. Every command prints its fully resolved configuration,
and reruns from that echoed configuration reproduce outputs bitwise.

Exit codes: 0 success, 1 check failure, 2 usage/config error,
3 runtime/data error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checks, ddigraph, trainer
from .ddigraph import ParseError, SaturationError, UnknownDrugError
from .ndtensor import ContractError, DomainError
from .trainer import CheckpointError, TrainConfig, TrainingDivergedError

logger = logging.getLogger("ddilink")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_RUNTIME = 3

_DATA_ERRORS = (ParseError, UnknownDrugError, DomainError, SaturationError, OSError, IndexError)
_DEFAULT_RATIOS = (0.6, 0.2, 0.2)
_SYNTH_KEYS = {"n_drugs", "n_types", "n_blocks", "f_dim", "p_in", "p_out", "seed"}
_ALL_UNSEEN_CAP = 1_000_000


# ---------------------------------------------------------------------------
# run configuration files
# ---------------------------------------------------------------------------


def load_run_config(path: str) -> dict:
    """Parse and validate a run config; unknown keys are rejected."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    allowed_top = {"train", "data", "split_ratios", "out_dir"}
    unknown = set(raw) - allowed_top
    if unknown:
        raise ContractError(f"unknown config key(s): {sorted(unknown)}")
    config = TrainConfig.from_dict(raw.get("train", {}))
    data = raw.get("data")
    if not isinstance(data, dict):
        raise ContractError("config must carry a 'data' object (edges/features paths or synth parameters)")
    if "synth" in data:
        if set(data) != {"synth"}:
            raise ContractError("data must be either {edges, features} or {synth}")
        unknown = set(data["synth"]) - _SYNTH_KEYS
        if unknown:
            raise ContractError(f"unknown synth key(s): {sorted(unknown)}")
        missing = _SYNTH_KEYS - set(data["synth"])
        if missing:
            raise ContractError(f"missing synth key(s): {sorted(missing)}")
    elif set(data) != {"edges", "features"}:
        raise ContractError("data must be either {edges, features} or {synth}")
    ratios = tuple(raw.get("split_ratios", _DEFAULT_RATIOS))
    if len(ratios) != 3:
        raise ContractError(f"split_ratios must have 3 entries, got {ratios}")
    return {
        "train": config,
        "data": data,
        "split_ratios": ratios,
        "out_dir": raw.get("out_dir"),
    }


def effective_config_dict(resolved: dict) -> dict:
    return {
        "train": resolved["train"].to_dict(),
        "data": resolved["data"],
        "split_ratios": list(resolved["split_ratios"]),
        "out_dir": resolved["out_dir"],
    }


def _echo_config(resolved: dict) -> None:
    print(json.dumps(effective_config_dict(resolved), indent=2, sort_keys=True))


def _materialize_dataset(resolved: dict, out_dir: Path | None) -> ddigraph.DDIDataset:
    """Load the dataset from files, or generate it and write it next to the
    run outputs so later eval/rank commands can point at real files."""
    data = resolved["data"]
    if "synth" in data:
        params = data["synth"]
        dataset = ddigraph.synth_generate(**params)
        if out_dir is not None:
            edges_path = out_dir / "edges.tsv"
            features_path = out_dir / "features.tsv"
            ddigraph.save_dataset(dataset, edges_path, features_path)
            ddigraph.write_meta(ddigraph.synth_meta(dataset=dataset, **params), out_dir / "meta.json")
            resolved["data"] = {"edges": str(edges_path), "features": str(features_path)}
        return dataset
    return ddigraph.load_dataset(data["edges"], data["features"])


def _split_part(split_, name: str):
    return {"train": split_.train, "valid": split_.valid, "test": split_.test}[name]


def _eval_pairs(dataset, split_, part: str, seed: int, with_negatives: bool):
    indices = _split_part(split_, part)
    pos = [ddigraph.PairExample(*dataset.edges[int(i)], 1) for i in indices]
    if not pos:
        raise ContractError(f"split part {part!r} is empty")
    if not with_negatives:
        return pos
    channel = {"train": 404, "valid": 101, "test": 202}[part]
    neg = ddigraph.sample_negatives(dataset, pos, seed=trainer.derive_seed(seed, channel))
    return pos + neg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    try:
        dataset = ddigraph.synth_generate(
            n_drugs=args.nodes,
            n_types=args.types,
            n_blocks=args.blocks,
            f_dim=args.fdim,
            p_in=args.pin,
            p_out=args.pout,
            seed=args.seed,
        )
    except ContractError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ddigraph.save_dataset(dataset, out / "edges.tsv", out / "features.tsv")
    meta = ddigraph.synth_meta(
        args.nodes, args.types, args.blocks, args.fdim, args.pin, args.pout, args.seed, dataset
    )
    ddigraph.write_meta(meta, out / "meta.json")
    print(json.dumps(meta, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        resolved = load_run_config(args.config)
        if args.no_lcp:
            resolved["train"] = dataclasses.replace(resolved["train"], use_lcp=False)
        if args.no_mcp:
            resolved["train"] = dataclasses.replace(resolved["train"], use_mcp=False)
        resolved["train"].validate()
        if args.out:
            resolved["out_dir"] = args.out
        if not resolved["out_dir"]:
            raise ContractError("an output directory is required (--out or config out_dir)")
    except (ContractError, json.JSONDecodeError, OSError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_USAGE

    out = Path(resolved["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    config = resolved["train"]
    try:
        dataset = _materialize_dataset(resolved, out)
        split_ = ddigraph.split(dataset, resolved["split_ratios"], seed=config.seed)
        model, history = trainer.train(dataset, split_, config)
    except TrainingDivergedError as err:
        print(f"training aborted: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except _DATA_ERRORS as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_RUNTIME

    trainer.write_metrics_log(history, out / "metrics.jsonl")
    trainer.checkpoint_save(
        model,
        out / "checkpoint.bin",
        epoch=config.epochs - 1,
        history=history,
        extra={
            "split_ratios": list(resolved["split_ratios"]),
            "data": resolved["data"],
            "drug_ids": dataset.drug_ids,
        },
    )
    (out / "effective_config.json").write_text(
        json.dumps(effective_config_dict(resolved), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    _echo_config(resolved)
    return EXIT_OK


def _load_checkpoint_and_data(args):
    model, info = trainer.checkpoint_load(args.checkpoint)
    dataset = ddigraph.load_dataset(args.edges, args.features)
    if dataset.f_dim != model.d_in:
        raise CheckpointError(f"dataset has {dataset.f_dim} features, checkpoint expects {model.d_in}")
    if dataset.n_types > model.n_types:
        raise CheckpointError(f"dataset has {dataset.n_types} types, checkpoint supports {model.n_types}")
    stored_ids = info["extra"].get("drug_ids")
    if stored_ids is not None and stored_ids != dataset.drug_ids:
        raise CheckpointError("drug id ordering differs from the checkpoint's training data")
    ratios = tuple(info["extra"].get("split_ratios", _DEFAULT_RATIOS))
    split_ = ddigraph.split(dataset, ratios, seed=model.config.seed)
    mg = ddigraph.build_message_graph(dataset, split_.train)
    return model, info, dataset, split_, mg


def cmd_eval(args) -> int:
    try:
        model, info, dataset, split_, mg = _load_checkpoint_and_data(args)
        pairs = _eval_pairs(dataset, split_, args.split, model.config.seed, not args.no_negatives)
        metrics = trainer.evaluate(model, dataset, mg, pairs)
    except (CheckpointError, ContractError, *_DATA_ERRORS) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(metrics.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def _candidates_from_file(path: str, dataset) -> list[tuple[int, int, int]]:
    index = {did: i for i, did in enumerate(dataset.drug_ids)}
    out = []
    for lineno, line in ddigraph._data_lines(path):
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        d1_id, d2_id, t_str = parts
        for did in (d1_id, d2_id):
            if did not in index:
                raise UnknownDrugError(f"{path}:{lineno}: unknown drug id {did!r}")
        t = int(t_str)
        if not 0 <= t < dataset.n_types:
            raise ParseError(f"{path}:{lineno}: type {t} out of range")
        out.append((index[d1_id], index[d2_id], t))
    return out


def _all_unseen_candidates(dataset, seed: int) -> list[tuple[int, int, int]]:
    """All (d1, d2, t) with d1 != d2, or a seeded uniform sample of up to a
    million of them when full enumeration would be larger."""
    n, n_types = dataset.n_drugs, dataset.n_types
    total = n * (n - 1) * n_types
    if total <= _ALL_UNSEEN_CAP:
        return [
            (d1, d2, t)
            for d1 in range(n)
            for d2 in range(n)
            if d1 != d2
            for t in range(n_types)
        ]
    rng = np.random.default_rng(seed)
    seen: set[tuple[int, int, int]] = set()
    draws = rng.integers(0, [n, n, n_types], size=(_ALL_UNSEEN_CAP, 3))
    for d1, d2, t in draws:
        if d1 != d2:
            seen.add((int(d1), int(d2), int(t)))
    return sorted(seen)


def cmd_rank(args) -> int:
    try:
        model, info, dataset, split_, mg = _load_checkpoint_and_data(args)
        if args.candidates:
            cands = _candidates_from_file(args.candidates, dataset)
        else:
            cands = _all_unseen_candidates(dataset, seed=trainer.derive_seed(model.config.seed, 303))
        rows = trainer.rank_novel(model, dataset, mg, cands, top_k=args.top)
    except (CheckpointError, ContractError, *_DATA_ERRORS, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    if not rows:
        logger.warning("no novel candidates left after filtering")
        return EXIT_OK
    sys.stdout.write(trainer.format_rank_tsv(rows))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    try:
        results = checks.run_checks(scope=args.scope, tol=args.tol)
    except ContractError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    width = max(len(r["name"]) for r in results)
    print(f"{'check'.ljust(width)}  {'max_rel_err':>12}  result")
    for r in results:
        print(f"{r['name'].ljust(width)}  {r['max_rel_err']:12.3e}  {'pass' if r['pass'] else 'FAIL'}")
    failures = [r["name"] for r in results if not r["pass"]]
    if failures:
        print(f"{len(failures)} failing check(s): {', '.join(failures)}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


_ABLATION_VARIANTS = (
    ("lcp_only", {"use_lcp": True, "use_mcp": False}),
    ("mcp_only", {"use_lcp": False, "use_mcp": True}),
    ("both", {"use_lcp": True, "use_mcp": True}),
)


def _mean_curves(histories) -> list[dict]:
    """Per-epoch mean of val_loss/val_auroc/val_auprc across runs."""
    epochs = len(histories[0])
    rows = []
    for e in range(epochs):
        row = {"epoch": e}
        for key in ("val_loss", "val_auroc", "val_auprc"):
            vals = [h[e][key] for h in histories]
            row[key] = float(np.mean([v for v in vals if v is not None])) if all(
                v is not None for v in vals
            ) else None
        rows.append(row)
    return rows


def cmd_ablate(args) -> int:
    try:
        resolved = load_run_config(args.config)
        if args.out:
            resolved["out_dir"] = args.out
        if not resolved["out_dir"]:
            raise ContractError("an output directory is required (--out or config out_dir)")
        if args.seeds < 2:
            raise ContractError("--seeds must be >= 2")
    except (ContractError, json.JSONDecodeError, OSError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_USAGE

    out = Path(resolved["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    try:
        dataset = _materialize_dataset(resolved, out)
        report: dict[str, dict] = {}
        for name, flags in _ABLATION_VARIANTS:
            cfg = dataclasses.replace(resolved["train"], **flags)
            result = trainer.run_repeated(
                dataset, cfg, k=args.seeds, ratios=resolved["split_ratios"]
            )
            report[name] = {"mean": result["mean"], "std": result["std"], "rows": result["rows"]}
            curve_path = out / f"curves_{name}.csv"
            with open(curve_path, "w", encoding="utf-8") as fh:
                fh.write("epoch,val_loss,val_auroc,val_auprc\n")
                for row in _mean_curves(result["histories"]):
                    fh.write(
                        f"{row['epoch']},{row['val_loss']},{row['val_auroc']},{row['val_auprc']}\n"
                    )
    except TrainingDivergedError as err:
        print(f"training aborted: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except _DATA_ERRORS as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_RUNTIME

    (out / "ablation_report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(f"{'configuration':<12}  {'accuracy':>16}  {'auroc':>16}  {'f1':>16}")
    for name, _ in _ABLATION_VARIANTS:
        rows = report[name]["rows"]
        print(f"{name:<12}  {rows['accuracy']:>16}  {rows['auroc']:>16}  {rows['f1']:>16}")
    accs = {name: report[name]["mean"]["accuracy"] for name, _ in _ABLATION_VARIANTS}
    if accs["both"] < max(accs.values()):
        logger.warning(
            "expected the combined pre-processors to score highest; got %s",
            {k: round(v, 4) for k, v in accs.items()},
        )
    _echo_config(resolved)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddilink", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic stochastic-block dataset")
    p.add_argument("--nodes", type=int, default=200)
    p.add_argument("--types", type=int, default=6)
    p.add_argument("--blocks", type=int, default=4)
    p.add_argument("--fdim", type=int, default=16)
    p.add_argument("--pin", type=float, default=0.15)
    p.add_argument("--pout", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--no-lcp", action="store_true", help="disable the local context processor")
    p.add_argument("--no-mcp", action="store_true", help="disable the molecular context processor")
    p.add_argument("--out", help="output directory (overrides config out_dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--edges", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument(
        "--no-negatives",
        action="store_true",
        help="evaluate on the positive pairs only (ranking metrics become null)",
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rank", help="rank candidate pairs by predicted probability")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--edges", required=True)
    p.add_argument("--features", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--candidates", help="TSV file of candidate triples")
    group.add_argument("--all-unseen", action="store_true", help="enumerate or sample all unseen triples")
    p.add_argument("--top", type=int, default=10)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--scope", choices=checks.SCOPES, default="all")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="run the pre-processor ablation grid")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--out", help="output directory (overrides config out_dir)")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
