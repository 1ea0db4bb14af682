"""Command-line entry point.

Commands: gen-synth, plan, train, eval, gradcheck, ablate. Exit code 0 on
success, 1 on validation errors, 2 on IO errors. Artifact files written
by train and ablate carry a short content hash in their names; outputs
contain no timestamps, so identical configs and seeds reproduce the same
bytes.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import statistics
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigBundle, parse_config
from .datasets import (
    generate_synthetic,
    load_manifest,
    read_embeddings,
    slice_manifest,
    write_embeddings,
    write_manifest,
)
from .errors import ValidationError
from .evaluation import evaluate
from .sampler import (
    build_geo_pools,
    build_sim_pools,
    plan_epoch,
    plan_rng,
    resolve_strategy,
    write_plan,
)
from .simsearch import l2_normalize
from .trainer import TrainResult, encode, gradcheck, save_params, train

STRATEGY_ORDER = ("random", "gps", "dss", "gps_then_dss")


def _hash8(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:8]


def _load_bundle(args) -> ConfigBundle:
    overrides = list(getattr(args, "set", None) or [])
    return parse_config(args.config, overrides)


def cmd_gen_synth(args) -> int:
    bundle = _load_bundle(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records, queries, references = generate_synthetic(bundle.synth)
    write_manifest(records, out / "manifest.jsonl")
    write_embeddings(queries, out / "query.emb")
    write_embeddings(references, out / "reference.emb")
    print(f"wrote {len(records)} pairs to {out}")
    return 0


def cmd_plan(args) -> int:
    bundle = _load_bundle(args)
    scfg = bundle.sampler
    strategy = resolve_strategy(scfg, args.epoch)

    records = None
    if args.manifest:
        records = load_manifest(args.manifest)

    if strategy == "gps":
        if records is None:
            raise ValidationError("GPS planning needs --manifest for coordinates")
        pools = build_geo_pools(records, scfg, bundle.geo)
    elif strategy == "dss":
        if not args.embeddings:
            raise ValidationError("DSS planning needs --embeddings Q.emb R.emb")
        queries = l2_normalize(read_embeddings(args.embeddings[0]))
        references = l2_normalize(read_embeddings(args.embeddings[1]))
        pools = build_sim_pools(queries, references, scfg)
        if records is None:
            records = _records_from_ids(queries.row_ids)
    else:
        pools = None
        if records is None:
            if not args.embeddings:
                raise ValidationError("random planning needs --manifest or --embeddings")
            records = _records_from_ids(read_embeddings(args.embeddings[0]).row_ids)

    plan = plan_epoch(records, pools, scfg, args.epoch, plan_rng(scfg, args.epoch))
    write_plan(plan, args.out)
    print(f"wrote {len(plan.batches)} batches ({plan.strategy_used}) to {args.out}")
    return 0


def _records_from_ids(row_ids):
    # minimal records when no manifest is supplied: unique classes, origin coords
    from .datasets import Coordinate, SampleRecord

    return [
        SampleRecord(
            id=rid,
            pair_index=i,
            class_id=rid,
            coord=Coordinate(0.0, 0.0, "planar"),
            positives=(rid,),
        )
        for i, rid in enumerate(row_ids)
    ]


def _write_train_artifacts(result: TrainResult, out: Path, dataset_hash: str) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    history_text = "".join(
        json.dumps(record, sort_keys=True) + "\n" for record in result.history
    )
    history_name = f"history-{_hash8(history_text.encode())}.jsonl"
    (out / history_name).write_text(history_text, encoding="utf-8")

    plan_names = []
    for plan in result.plans:
        plan_text = "".join(json.dumps(list(batch)) + "\n" for batch in plan.batches)
        name = f"plan-e{plan.epoch:03d}-{_hash8(plan_text.encode())}.jsonl"
        (out / name).write_text(plan_text, encoding="utf-8")
        plan_names.append(name)

    params_tag = _hash8(
        b"".join(
            np.ascontiguousarray(t, dtype="<f8").tobytes()
            for t in (result.params.W1, result.params.b1, result.params.W2, result.params.b2)
        )
    )
    params_dir = f"params-{params_tag}"
    save_params(result.params, result.loss_config, out / params_dir)

    run = {
        "dataset_hash": dataset_hash,
        "history": history_name,
        "params": params_dir,
        "plans": plan_names,
        "final": result.history[-1],
    }
    (out / "run.json").write_text(
        json.dumps(run, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return run


def _dataset_hash(data_dir: Path) -> str:
    h = hashlib.sha256()
    for name in ("manifest.jsonl", "query.emb", "reference.emb"):
        h.update((data_dir / name).read_bytes())
    return h.hexdigest()[:12]


def cmd_train(args) -> int:
    bundle = _load_bundle(args)
    data = Path(args.data)
    manifest = load_manifest(data / "manifest.jsonl")
    queries = read_embeddings(data / "query.emb")
    references = read_embeddings(data / "reference.emb")
    result = train(manifest, queries, references, bundle.train, bundle.geo)
    run = _write_train_artifacts(result, Path(args.out), _dataset_hash(data))
    print(json.dumps(run["final"], sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    queries = read_embeddings(args.query)
    references = read_embeddings(args.ref)
    manifest = load_manifest(args.manifest)
    report = evaluate(queries, references, manifest)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_gradcheck(args) -> int:
    bundle = _load_bundle(args)
    worst: dict[str, float] = {}
    for i in range(args.inits):
        report = gradcheck(
            bundle.train,
            n=args.n,
            d_in=bundle.synth.view_dim,
            d_h=bundle.train.hidden_dim,
            d_out=bundle.train.embed_dim,
            seed=args.seed + i,
        )
        for key, value in report.items():
            worst[key] = max(worst.get(key, 0.0), value)
    print(json.dumps(worst, sort_keys=True))
    if worst["max"] > args.tol:
        print(f"gradient check FAILED: {worst['max']:.3e} > {args.tol:.3e}", file=sys.stderr)
        return 1
    return 0


def _holdout_report(result: TrainResult, manifest, queries, references):
    n = len(manifest)
    n_holdout = max(1, n // 10)
    start = n - n_holdout
    sub = slice_manifest(manifest, start, n)
    ids = tuple(r.id for r in sub)
    q = encode(result.params, queries.data[start:].astype(np.float64), "query", ids)
    r = encode(result.params, references.data[start:].astype(np.float64), "reference", ids)
    return evaluate(q, r, sub)


def cmd_ablate(args) -> int:
    bundle = _load_bundle(args)
    records, queries, references = generate_synthetic(bundle.synth)
    h = hashlib.sha256()
    h.update("".join(r.id for r in records).encode())
    h.update(queries.data.tobytes())
    h.update(references.data.tobytes())
    dataset_hash = h.hexdigest()[:12]

    rows = []
    detail = {"dataset_hash": dataset_hash, "seeds": args.seeds, "runs": []}
    for strategy in STRATEGY_ORDER:
        per_seed = []
        for s in range(args.seeds):
            tcfg = replace(
                bundle.train,
                seed=bundle.train.seed + s,
                sampler=replace(bundle.sampler, strategy=strategy, seed=bundle.sampler.seed + s),
            )
            result = train(records, queries, references, tcfg, bundle.geo)
            report = _holdout_report(result, records, queries, references)
            metrics = {
                "strategy": strategy,
                "seed": s,
                "r_at_1": report.recall_at[1],
                "r_at_5": report.recall_at[5],
                "r_at_10": report.recall_at[10],
                "r_at_1pct": report.recall_at_1pct,
                "hit_rate": report.hit_rate,
            }
            per_seed.append(metrics)
            detail["runs"].append(metrics)
        row = {"strategy": strategy, "seeds": args.seeds, "dataset_hash": dataset_hash}
        for key in ("r_at_1", "r_at_5", "r_at_10", "r_at_1pct", "hit_rate"):
            values = [m[key] for m in per_seed if m[key] is not None]
            row[key] = statistics.median(values) if values else None
        rows.append(row)

    out_csv = Path(args.out)
    fields = ["strategy", "r_at_1", "r_at_5", "r_at_10", "r_at_1pct", "hit_rate",
              "seeds", "dataset_hash"]
    with out_csv.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    out_json = out_csv.with_suffix(".json")
    out_json.write_text(json.dumps(detail, sort_keys=True, indent=2) + "\n", encoding="utf-8")

    for row in rows:
        print(
            f"{row['strategy']:>12}  R@1={row['r_at_1']:.4f}  "
            f"hit_rate={row['hit_rate']:.4f}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossview",
        description="Two-view contrastive retrieval: training, sampling, and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="config override, applied after the file")

    p = sub.add_parser("gen-synth", help="generate a synthetic two-view dataset")
    add_config(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("plan", help="plan one epoch of batches")
    add_config(p)
    p.add_argument("--embeddings", nargs=2, metavar=("Q.emb", "R.emb"))
    p.add_argument("--manifest", default=None)
    p.add_argument("--epoch", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("train", help="train the encoder")
    add_config(p)
    p.add_argument("--data", required=True, help="directory from gen-synth")
    p.add_argument("--out", required=True, help="artifact directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="retrieval metrics for embedding tables")
    p.add_argument("--query", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="check analytic gradients against finite differences")
    add_config(p)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--inits", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="compare sampling strategies on shared synthetic data")
    add_config(p)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--out", required=True, help="CSV path (a .json sibling is written too)")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
