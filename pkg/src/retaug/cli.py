"""Command line pipeline around the library modules.

Every subcommand reads declared input files, writes artifacts plus a
manifest echoing the resolved configuration into the output directory, and
exits nonzero with a one-line error JSON on stderr when anything in the
library raises.  Runs are reproducible: the same config and seed produce
bit-identical artifacts.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import augmenter, synth, tableio
from .concepts import (
    ConceptRecord,
    ConceptStore,
    ingest_concepts,
    read_concept_jsonl,
    retrieve,
    write_concept_jsonl,
)
from .config import (
    DATASET_TRUNCATE_TOP,
    PipelineConfig,
    default_config,
    load_config,
    resolve_out_dir,
    write_manifest,
)
from .ensemble import MODE_ALIASES, canonical_mode, classify, ensemble_matrix
from .errors import AlignmentMismatch, ConfigError, RetaugError
from .negatives import (
    NegativeVocabularySets,
    VocabularyStore,
    build_negative_sets,
    build_store,
    compute_ranks,
    derive_item_seed,
    filter_by_rank_variance,
    sample_iteration,
)
from .ral import RalBatchItem, ral_total
from .store import build_table, load_table, save_table, subset, union_tables

_D = default_config()

_EPILOG = f"""shipped defaults:
  negatives   m={_D.retrieval.m} per set, n={_D.ral.n} sampled per iteration,
              keep_fraction={_D.retrieval.keep_fraction} of the vocabulary kept by rank variance
  hinge loss  lambda_hard={_D.ral.lambda_hard}, lambda_easy={_D.ral.lambda_easy},
              alpha_hard={_D.ral.alpha_hard}, alpha_easy={_D.ral.alpha_easy},
              beta_hard={_D.ral.beta_hard}, beta_easy={_D.ral.beta_easy}
  augmenter   k={_D.raf.k} concepts, layers={_D.raf.layers}, heads={_D.raf.heads},
              ffn_dim={_D.raf.ffn_dim}, beta_cls={_D.raf.beta_cls}, beta_reg={_D.raf.beta_reg}
  ensembling  truncate_top defaults: coco={DATASET_TRUNCATE_TOP['coco']}, lvis={DATASET_TRUNCATE_TOP['lvis']}
"""


def _json_line(data: dict) -> str:
    return json.dumps(data, sort_keys=True)


def _write_json(path: Path, data) -> Path:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _read_json(path: str | Path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _resolved(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _with(cfg: PipelineConfig, section: str, **updates) -> PipelineConfig:
    updates = {k: v for k, v in updates.items() if v is not None}
    if not updates:
        return cfg
    return replace(cfg, **{section: replace(getattr(cfg, section), **updates)})


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _resolved(args)
    out = resolve_out_dir(args.out_dir)
    paths = synth.generate(
        out,
        cfg.seed,
        n_base=args.base,
        n_novel=args.novel,
        n_vocab=args.vocab,
        n_concepts=args.concepts,
        n_proposals=args.proposals,
        n_boxes=args.boxes,
        dim=args.dim,
        noise=args.noise,
    )
    write_manifest(
        out, "synth", cfg, {}, {k: str(p) for k, p in paths.items()},
        extra={
            "counts": {
                "base": args.base, "novel": args.novel, "vocab": args.vocab,
                "concepts": args.concepts, "proposals": args.proposals,
                "boxes": args.boxes, "dim": args.dim,
            },
            "noise": args.noise,
        },
    )
    print(f"wrote {len(paths)} fixture files to {out}")
    return 0


def cmd_build_store(args) -> int:
    cfg = _resolved(args)
    out = resolve_out_dir(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names, vectors = tableio.read_matrix(args.vocabulary)
    novel_names, _ = tableio.read_matrix(args.novel)
    vs = build_store(names, vectors, novel_names)
    store_path = out / "store.bin"
    save_table(store_path, vs.table)
    excluded_path = _write_json(
        out / "store.excluded.json",
        [{"name": n, "reason": r} for n, r in vs.excluded],
    )
    write_manifest(
        out, "build-store", cfg,
        {"vocabulary": args.vocabulary, "novel": args.novel},
        {"store": str(store_path), "excluded": str(excluded_path)},
        extra={"kept": vs.table.count, "excluded": len(vs.excluded)},
    )
    print(f"store: kept {vs.table.count} rows, excluded {len(vs.excluded)}")
    return 0


def cmd_filter_vocab(args) -> int:
    cfg = _with(_resolved(args), "retrieval", keep_fraction=args.keep_fraction)
    out = resolve_out_dir(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = load_table(args.store)
    base = load_table(args.base)
    ranks = compute_ranks(VocabularyStore(table, ()), base)
    kept_idx = filter_by_rank_variance(ranks, cfg.retrieval.keep_fraction)
    kept = subset(table, kept_idx)
    kept_path = out / "kept.bin"
    save_table(kept_path, kept)
    variance_path = _write_json(
        out / "rank_variance.json",
        {
            "variance": [float(v) for v in ranks.variance],
            "kept_names": list(kept.names),
        },
    )
    write_manifest(
        out, "filter-vocab", cfg,
        {"store": args.store, "base": args.base},
        {"kept": str(kept_path), "rank_variance": str(variance_path)},
        extra={"kept": kept.count, "total": table.count},
    )
    print(f"kept {kept.count} of {table.count} vocabulary rows by rank variance")
    return 0


def cmd_retrieve_negatives(args) -> int:
    cfg = _with(_resolved(args), "retrieval", m=args.m)
    out = resolve_out_dir(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = load_table(args.store)
    base = load_table(args.base)
    sets = build_negative_sets(
        VocabularyStore(table, ()), base, np.arange(table.count), cfg.retrieval.m
    )
    sets_path = _write_json(out / "negatives.json", sets.to_json_dict())
    write_manifest(
        out, "retrieve-negatives", cfg,
        {"store": args.store, "base": args.base},
        {"negatives": str(sets_path)},
        extra={"m": sets.m, "categories": len(sets.categories)},
    )
    print(f"negative sets: {len(sets.categories)} categories, m={sets.m}")
    return 0


def cmd_ral_loss(args) -> int:
    cfg = _with(
        _resolved(args), "ral",
        n=args.n, lambda_hard=args.lambda_hard, lambda_easy=args.lambda_easy,
        alpha_hard=args.alpha_hard, alpha_easy=args.alpha_easy,
        beta_hard=args.beta_hard, beta_easy=args.beta_easy,
    )
    cfg = _with(cfg, "retrieval", sample_mode=args.sample_mode)
    out = resolve_out_dir(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    boxes = load_table(args.boxes)
    labels = _read_json(args.labels)
    base = load_table(args.base)
    vocab = load_table(args.vocab)
    sets = NegativeVocabularySets.from_json_dict(_read_json(args.negatives))
    items = []
    for i, name in enumerate(boxes.names):
        if name not in labels:
            raise ConfigError(f"no label for box {name!r} in {args.labels}")
        hard, easy = sample_iteration(
            sets, labels[name], cfg.ral.n,
            derive_item_seed(cfg.seed, i), cfg.retrieval.sample_mode,
        )
        items.append(RalBatchItem(boxes.vectors[i], labels[name], hard, easy))
    result = ral_total(items, base, vocab, cfg.ral)
    loss_path = _write_json(
        out / "ral.json",
        {
            "loss": result.loss,
            "loss_hard": result.loss_hard,
            "loss_easy": result.loss_easy,
            "items": list(result.items),
        },
    )
    grads_path = out / "ral_grads.bin"
    tableio.write_matrix(grads_path, list(boxes.names), result.grads)
    write_manifest(
        out, "ral-loss", cfg,
        {
            "boxes": args.boxes, "labels": args.labels, "base": args.base,
            "vocab": args.vocab, "negatives": args.negatives,
        },
        {"loss": str(loss_path), "grads": str(grads_path)},
        extra={
            "loss": result.loss,
            "loss_hard": result.loss_hard,
            "loss_easy": result.loss_easy,
        },
    )
    print(
        f"ral loss={result.loss:.6f} "
        f"(hard={result.loss_hard:.6f}, easy={result.loss_easy:.6f})"
    )
    return 0


def cmd_ingest_concepts(args) -> int:
    cfg = _resolved(args)
    out = resolve_out_dir(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = read_concept_jsonl(args.records)
    _, vectors = tableio.read_matrix(args.embeddings)
    novel_names, _ = tableio.read_matrix(args.novel)
    cs = ingest_concepts(records, vectors, novel_names)
    table_path = out / "concept_store.bin"
    save_table(table_path, cs.table)
    records_path = out / "concept_store.jsonl"
    write_concept_jsonl(records_path, cs.records)
    write_manifest(
        out, "ingest-concepts", cfg,
        {"records": args.records, "embeddings": args.embeddings, "novel": args.novel},
        {"table": str(table_path), "records": str(records_path)},
        extra={"ingested": len(records), "kept": cs.size},
    )
    print(f"concept store: {cs.size} concepts from {len(records)} records")
    return 0


def cmd_retrieve_concepts(args) -> int:
    cfg = _with(_resolved(args), "raf", k=args.k)
    out = resolve_out_dir(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = load_table(args.concepts)
    if args.records:
        records = tuple(read_concept_jsonl(args.records))
    else:
        records = tuple(ConceptRecord(t) for t in table.names)
    cs = ConceptStore(records, table)
    proposals = load_table(args.proposals)
    indices, scores = [], []
    for i in range(proposals.count):
        r = retrieve(cs, proposals.vectors[i], cfg.raf.k)
        indices.append([int(j) for j in r.indices])
        scores.append([float(v) for v in r.scores])
    retrieved_path = _write_json(
        out / "retrieved.json",
        {
            "k": cfg.raf.k,
            "proposals": list(proposals.names),
            "indices": indices,
            "scores": scores,
        },
    )
    write_manifest(
        out, "retrieve-concepts", cfg,
        {"concepts": args.concepts, "proposals": args.proposals},
        {"retrieved": str(retrieved_path)},
        extra={"k": cfg.raf.k, "proposals": proposals.count},
    )
    print(f"retrieved top-{cfg.raf.k} concepts for {proposals.count} proposals")
    return 0


def _load_raf_inputs(args, cfg: PipelineConfig):
    """Shared plumbing for train-raf and augment."""
    proposals = load_table(args.proposals)
    concept_table = load_table(args.concepts)
    retrieved = _read_json(args.retrieved)
    if list(retrieved["proposals"]) != list(proposals.names):
        raise AlignmentMismatch("retrieved.json rows do not match the proposals file")
    k = int(retrieved["k"])
    indices = np.asarray(retrieved["indices"], dtype=np.int64)
    scores = np.asarray(retrieved["scores"], dtype=np.float64)
    h = concept_table.vectors[indices]  # (N, k, dim)
    batch = augmenter.RafBatch(proposals.vectors, h, scores)
    return proposals, k, batch


def cmd_train_raf(args) -> int:
    cfg = _with(
        _resolved(args), "raf",
        k=args.k, layers=args.layers, heads=args.heads, ffn_dim=args.ffn_dim,
        beta_cls=args.beta_cls, beta_reg=args.beta_reg,
        learning_rate=args.learning_rate, iterations=args.iterations,
        activation=args.activation,
    )
    out = resolve_out_dir(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    proposals, k, full = _load_raf_inputs(args, cfg)
    if k != cfg.raf.k:
        raise ConfigError(f"retrieved k={k} does not match configured k={cfg.raf.k}")
    train_cats = union_tables(load_table(args.base), load_table(args.vocab))
    params = augmenter.init_params(proposals.dim, cfg.raf, cfg.seed)
    step = max(1, args.batch_size)
    batches = [
        augmenter.RafBatch(
            full.visual_features[i : i + step],
            full.concept_embeddings[i : i + step],
            full.concept_scores[i : i + step],
        )
        for i in range(0, proposals.count, step)
    ]
    trained, trace = augmenter.train(batches, params, train_cats, cfg.raf)
    ckpt_path = out / "raf.ckpt"
    augmenter.save_checkpoint(ckpt_path, trained)
    trace_path = out / "raf_trace.csv"
    with open(trace_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("iteration,loss,cls,reg\n")
        for it, loss, cls, reg in trace:
            fh.write(f"{it},{loss!r},{cls!r},{reg!r}\n")
    write_manifest(
        out, "train-raf", cfg,
        {
            "proposals": args.proposals, "concepts": args.concepts,
            "retrieved": args.retrieved, "base": args.base, "vocab": args.vocab,
        },
        {"checkpoint": str(ckpt_path), "trace": str(trace_path)},
        extra={
            "parameters": trained.n_parameters(),
            "initial_loss": trace[0][1],
            "final_loss": trace[-1][1],
            "iterations": len(trace),
            "train_categories": train_cats.count,
        },
    )
    print(
        f"trained augmenter: {trained.n_parameters()} parameters, "
        f"loss {trace[0][1]:.6f} -> {trace[-1][1]:.6f} over {len(trace)} iterations"
    )
    return 0


def cmd_augment(args) -> int:
    cfg = _resolved(args)
    out = resolve_out_dir(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = augmenter.load_checkpoint(args.checkpoint, cfg.raf.activation)
    proposals, k, batch = _load_raf_inputs(args, cfg)
    if k != params.k:
        raise ConfigError(f"retrieved k={k} does not match checkpoint k={params.k}")
    augmented = augmenter.augment_batch(batch, params)
    aug_path = out / "augmented.bin"
    tableio.write_matrix(aug_path, list(proposals.names), augmented)
    write_manifest(
        out, "augment", cfg,
        {
            "proposals": args.proposals, "concepts": args.concepts,
            "retrieved": args.retrieved, "checkpoint": args.checkpoint,
        },
        {"augmented": str(aug_path)},
        extra={"proposals": proposals.count},
    )
    print(f"augmented {proposals.count} proposals")
    return 0


def cmd_ensemble(args) -> int:
    cfg = _with(
        _resolved(args), "ensemble",
        mode=args.mode, dataset=args.dataset, truncate_top=args.truncate_top,
    )
    out = resolve_out_dir(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cats = load_table(args.categories)
    row_names, base_mat = tableio.read_matrix(args.base_logits)
    columns_path = Path(args.base_logits).with_name(Path(args.base_logits).stem + ".columns.json")
    columns = [str(c) for c in _read_json(columns_path)]
    if columns != list(cats.names):
        raise AlignmentMismatch("logit columns do not match the categories table")
    aug = load_table(args.augmented)
    if list(aug.names) != row_names:
        raise AlignmentMismatch("augmented rows do not match the base logit rows")
    aux = aug.vectors @ cats.vectors.T
    truncate_top = cfg.ensemble.resolved_truncate_top()
    final = ensemble_matrix(base_mat, aux, cfg.ensemble.mode, truncate_top)
    final_path = out / "final_logits.bin"
    tableio.write_matrix(final_path, row_names, final)
    final_columns = _write_json(out / "final_logits.columns.json", columns)
    predictions = {
        name: {"index": classify(final[i]), "category": columns[classify(final[i])]}
        for i, name in enumerate(row_names)
    }
    pred_path = _write_json(out / "predictions.json", predictions)
    write_manifest(
        out, "ensemble", cfg,
        {
            "base_logits": args.base_logits, "augmented": args.augmented,
            "categories": args.categories,
        },
        {
            "final_logits": str(final_path),
            "final_columns": str(final_columns),
            "predictions": str(pred_path),
        },
        extra={
            "mode": canonical_mode(cfg.ensemble.mode),
            "truncate_top": truncate_top,
            "proposals": len(row_names),
        },
    )
    print(
        f"ensembled {len(row_names)} proposals "
        f"(mode={canonical_mode(cfg.ensemble.mode)}, truncate_top={truncate_top})"
    )
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _resolved(args)
    hp = augmenter.RafHyperParams(
        k=args.k, layers=args.layers, heads=args.heads, ffn_dim=args.ffn_dim
    )
    worst = 0.0
    for offset in range(args.seeds):
        seed = cfg.seed + offset
        rng = np.random.default_rng(seed)
        cats = build_table(
            [f"cat_{i:02d}" for i in range(args.categories)],
            rng.normal(size=(args.categories, args.dim)),
        )
        v = rng.normal(size=(args.batch, args.dim))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        h = rng.normal(size=(args.batch, args.k, args.dim))
        h /= np.linalg.norm(h, axis=2, keepdims=True)
        s = rng.normal(size=(args.batch, args.k))
        batch = augmenter.RafBatch(v, h, s)
        params = augmenter.init_params(args.dim, hp, seed)
        analytic = augmenter.raf_grad(batch, params, cats, hp)
        numeric = augmenter.finite_difference_grads(
            lambda p: augmenter.raf_loss(batch, p, cats, hp).loss, params, args.step
        )
        worst = max(worst, augmenter.max_relative_error(analytic, numeric))
    print(f"max relative error: {worst:.6e} over {args.seeds} seed(s)")
    if worst >= args.tol:
        print(f"FAIL: exceeds tolerance {args.tol:.1e}")
        return 1
    print(f"OK: within tolerance {args.tol:.1e}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int, help="global seed override")
    p.add_argument(
        "--out-dir",
        help="output directory (default: $RETAUG_OUT_DIR or the working directory)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="retaug",
        description="retrieval-augmented detection toolkit: negative mining, "
        "concept retrieval, feature augmentation, logit ensembling",
        epilog=_EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate clustered synthetic fixture files")
    _add_common(p)
    p.add_argument("--base", type=int, default=8, help="base category count")
    p.add_argument("--novel", type=int, default=4, help="novel category count")
    p.add_argument("--vocab", type=int, default=100, help="vocabulary size before filtering")
    p.add_argument("--concepts", type=int, default=64, help="concept count")
    p.add_argument("--proposals", type=int, default=64, help="region proposal count")
    p.add_argument("--boxes", type=int, default=48, help="ground-truth box count")
    p.add_argument("--dim", type=int, default=16, help="embedding dimension")
    p.add_argument("--noise", type=float, default=0.1, help="cluster noise scale")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser(
        "build-store", help="filter a raw vocabulary against novel categories and duplicates"
    )
    _add_common(p)
    p.add_argument("--vocabulary", required=True, help="raw vocabulary matrix file")
    p.add_argument("--novel", required=True, help="novel categories matrix file")
    p.set_defaults(func=cmd_build_store)

    p = sub.add_parser(
        "filter-vocab", help="keep the highest rank-variance fraction of the store"
    )
    _add_common(p)
    p.add_argument("--store", required=True, help="vocabulary store matrix file")
    p.add_argument("--base", required=True, help="base categories matrix file")
    p.add_argument(
        "--keep-fraction", type=float,
        help=f"fraction kept (default {_D.retrieval.keep_fraction})",
    )
    p.set_defaults(func=cmd_filter_vocab)

    p = sub.add_parser(
        "retrieve-negatives", help="top-m hard and bottom-m easy vocabulary per base category"
    )
    _add_common(p)
    p.add_argument("--store", required=True, help="filtered vocabulary matrix file")
    p.add_argument("--base", required=True, help="base categories matrix file")
    p.add_argument("--m", type=int, help=f"negative set size (default {_D.retrieval.m})")
    p.set_defaults(func=cmd_retrieve_negatives)

    p = sub.add_parser(
        "ral-loss", help="hinge losses and box-embedding gradients over sampled negatives"
    )
    _add_common(p)
    p.add_argument("--boxes", required=True, help="box embeddings matrix file")
    p.add_argument("--labels", required=True, help="JSON box name -> base category")
    p.add_argument("--base", required=True, help="base categories matrix file")
    p.add_argument("--vocab", required=True, help="vocabulary matrix the negative names resolve in")
    p.add_argument("--negatives", required=True, help="negative sets JSON")
    p.add_argument("--n", type=int, help=f"samples per set per iteration (default {_D.ral.n})")
    p.add_argument(
        "--sample-mode", choices=("random", "similarity"),
        help="negative sampling mode (default random)",
    )
    p.add_argument("--lambda-hard", type=float, help="hard hinge multiplier")
    p.add_argument("--lambda-easy", type=float, help="easy hinge multiplier")
    p.add_argument("--alpha-hard", type=float, help="hard hinge margin")
    p.add_argument("--alpha-easy", type=float, help="easy hinge margin")
    p.add_argument("--beta-hard", type=float, help="hard loss weight")
    p.add_argument("--beta-easy", type=float, help="easy loss weight")
    p.set_defaults(func=cmd_ral_loss)

    p = sub.add_parser(
        "ingest-concepts", help="deduplicate concept records into a store table"
    )
    _add_common(p)
    p.add_argument("--records", required=True, help="concept JSONL (text + sources)")
    p.add_argument("--embeddings", required=True, help="matrix file aligned with the records")
    p.add_argument("--novel", required=True, help="novel categories matrix file")
    p.set_defaults(func=cmd_ingest_concepts)

    p = sub.add_parser(
        "retrieve-concepts", help="top-k concepts per proposal by cosine similarity"
    )
    _add_common(p)
    p.add_argument("--concepts", required=True, help="concept store matrix file")
    p.add_argument("--records", help="concept JSONL for text provenance (optional)")
    p.add_argument("--proposals", required=True, help="proposal features matrix file")
    p.add_argument("--k", type=int, help=f"concepts per proposal (default {_D.raf.k})")
    p.set_defaults(func=cmd_retrieve_concepts)

    p = sub.add_parser("train-raf", help="train the augmenter by gradient descent")
    _add_common(p)
    p.add_argument("--proposals", required=True, help="proposal features matrix file")
    p.add_argument("--concepts", required=True, help="concept store matrix file")
    p.add_argument("--retrieved", required=True, help="retrieval JSON from retrieve-concepts")
    p.add_argument("--base", required=True, help="base categories matrix file")
    p.add_argument("--vocab", required=True, help="filtered vocabulary matrix file")
    p.add_argument("--batch-size", type=int, default=32, help="proposals per batch")
    p.add_argument("--k", type=int, help=f"concepts per proposal (default {_D.raf.k})")
    p.add_argument("--layers", type=int, help=f"decoder layers (default {_D.raf.layers})")
    p.add_argument("--heads", type=int, help=f"attention heads (default {_D.raf.heads})")
    p.add_argument("--ffn-dim", type=int, help=f"FFN width (default {_D.raf.ffn_dim})")
    p.add_argument("--beta-cls", type=float, help=f"classification weight (default {_D.raf.beta_cls})")
    p.add_argument("--beta-reg", type=float, help=f"regularization weight (default {_D.raf.beta_reg})")
    p.add_argument("--learning-rate", type=float, help=f"step size (default {_D.raf.learning_rate})")
    p.add_argument("--iterations", type=int, help=f"update count (default {_D.raf.iterations})")
    p.add_argument("--activation", choices=("gelu", "relu"), help="FFN activation (default gelu)")
    p.set_defaults(func=cmd_train_raf)

    p = sub.add_parser("augment", help="augment proposal features with a trained checkpoint")
    _add_common(p)
    p.add_argument("--proposals", required=True, help="proposal features matrix file")
    p.add_argument("--concepts", required=True, help="concept store matrix file")
    p.add_argument("--retrieved", required=True, help="retrieval JSON from retrieve-concepts")
    p.add_argument("--checkpoint", required=True, help="trained augmenter checkpoint")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser(
        "ensemble", help="fuse baseline and auxiliary logits into final scores"
    )
    _add_common(p)
    p.add_argument("--base-logits", required=True, help="baseline logits matrix file")
    p.add_argument("--augmented", required=True, help="augmented features matrix file")
    p.add_argument("--categories", required=True, help="categories table matching logit columns")
    p.add_argument(
        "--mode", choices=sorted(MODE_ALIASES),
        help="fusion rule: ocovd adds sigmoid(aux), detpro multiplies by "
        "(sigmoid(aux) - 0.25), oadp adds raw aux (default oadp)",
    )
    p.add_argument(
        "--dataset", choices=sorted(DATASET_TRUNCATE_TOP),
        help="selects the default truncation: coco fuses the top-1 auxiliary "
        "logit, lvis fuses the top-20 (default lvis)",
    )
    p.add_argument(
        "--truncate-top", type=int,
        help="auxiliary logits fused per proposal; overrides the dataset "
        f"default (coco={DATASET_TRUNCATE_TOP['coco']}, lvis={DATASET_TRUNCATE_TOP['lvis']})",
    )
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser(
        "gradcheck", help="compare analytic augmenter gradients with finite differences"
    )
    _add_common(p)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--ffn-dim", type=int, default=16)
    p.add_argument("--batch", type=int, default=4, help="proposals in the probe batch")
    p.add_argument("--categories", type=int, default=6, help="classification table size")
    p.add_argument("--seeds", type=int, default=1, help="independent random fixtures")
    p.add_argument("--step", type=float, default=1e-4, help="finite-difference step")
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error allowed")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (RetaugError, ValueError, OSError) as exc:
        print(
            _json_line({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
