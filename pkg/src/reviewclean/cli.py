"""Command-line front end.

Subcommands: ingest, classify, clean, control, eval-classify, eval-bleu,
cluster, quality-report, annotate, sample. Each writes its artifacts plus
a manifest into the output directory and never mutates its inputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__, bleu, cleaning, config as config_mod, corpus, gateway, metrics, topics

log = logging.getLogger("reviewclean")


class CliError(Exception):
    pass


class ResumeCorrupt(CliError):
    pass


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int, help="seed recorded in artifacts")
    common.add_argument("--out", help="output directory (default: .)")
    common.add_argument("--parallelism", type=int, help="max in-flight requests")
    common.add_argument("--trace", action="store_true", help="log request/response bodies")

    parser = argparse.ArgumentParser(prog="reviewclean", description=__doc__)
    parser.add_argument("--version", action="version", version=f"reviewclean {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="parse, validate, and normalize a record file")
    p.add_argument("--input", required=True)
    p.add_argument("--split", default="train", help="default split for records without one")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("classify", parents=[common], help="label every instance valid/noisy via the model endpoint")
    p.add_argument("--input", required=True)
    p.add_argument("--prompt-variant", choices=("definition", "auxiliary"), dest="prompt_variant")
    p.add_argument("--input-mode", choices=("comment_only", "comment_plus_diff"), dest="input_mode")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("clean", parents=[common], help="retain instances predicted valid")
    p.add_argument("--input", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--treat-errors-as", choices=("valid", "noisy"), default="noisy")
    p.set_defaults(func=cmd_clean)

    p = sub.add_parser("control", parents=[common], help="size-matched uniform random sample")
    p.add_argument("--input", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--match", help="dataset whose per-split sizes to match")
    group.add_argument("--target-size", type=int, help="global sample size")
    p.set_defaults(func=cmd_control)

    p = sub.add_parser("eval-classify", parents=[common], help="score predictions against gold labels")
    p.add_argument("--gold", required=True, help="dataset file with gold labels")
    p.add_argument("--predictions", required=True)
    p.add_argument("--exclude-errors", action="store_true",
                   help="drop error-marked predictions instead of counting them as noisy")
    p.add_argument("--name", default="model", help="row name in the printed table")
    p.set_defaults(func=cmd_eval_classify)

    p = sub.add_parser("eval-bleu", parents=[common], help="BLEU-4 of generations vs. references")
    p.add_argument("--references", required=True, help="dataset file with reference comments")
    p.add_argument("--generations", required=True, help="record file {id, text}")
    p.add_argument("--baseline", help="baseline generations for deltas and significance")
    p.add_argument("--subsets", help="label file {id, label, source}")
    p.add_argument("--drop-stopwords", action="store_true")
    p.add_argument("--stopwords", help="custom stop-word list file")
    p.set_defaults(func=cmd_eval_bleu)

    p = sub.add_parser("cluster", parents=[common], help="cluster comments and emit the annotation sheet")
    p.add_argument("--input", required=True, help="record file {id, text} or a dataset file")
    p.add_argument("--input-format", choices=("generations", "dataset"), default="generations")
    p.add_argument("--k", type=int, default=topics.DEFAULT_CLUSTER_COUNT)
    p.add_argument("--top-terms", type=int, default=topics.DEFAULT_TOP_TERMS)
    p.add_argument("--coherence-gate", type=float, default=0.67,
                   help="warn when mean coherence falls below this")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("quality-report", parents=[common], help="propagate annotated scores to clusters")
    p.add_argument("--topic-model", required=True)
    p.add_argument("--annotations", required=True, help="filled annotation sheet")
    p.set_defaults(func=cmd_quality_report)

    p = sub.add_parser("annotate", parents=[common], help="label instances interactively")
    p.add_argument("--input", required=True, help="sample file to annotate")
    p.add_argument("--labels", required=True, help="label file to create/resume")
    p.add_argument("--guidelines", help="guidelines file shown before the session")
    p.add_argument("--kappa-against", help="second annotator's label file for agreement")
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("sample", parents=[common], help="draw a seed-recorded uniform sample")
    p.add_argument("--input", required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--split", help="restrict to one split before sampling")
    p.set_defaults(func=cmd_sample)

    return parser


def _run_config(args) -> config_mod.RunConfig:
    overrides = {
        "seed": getattr(args, "seed", None),
        "out": getattr(args, "out", None),
        "parallelism": getattr(args, "parallelism", None),
        "trace": getattr(args, "trace", False),
        "prompt_variant": getattr(args, "prompt_variant", None),
        "input_mode": getattr(args, "input_mode", None),
    }
    cfg = config_mod.load_config(getattr(args, "config", None), overrides)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    return cfg


def _load_dataset(path, cfg: config_mod.RunConfig, default_split="train") -> corpus.Dataset:
    result = corpus.parse_dataset(path, cfg.fields, default_split=default_split)
    if result.rejects:
        log.warning("%s: %d records rejected", path, len(result.rejects))
    return result.dataset


def _read_generations(path) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            out[str(record["id"])] = record["text"]
    return out


def _write_json(path: Path, payload) -> None:
    path.write_text(
        json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


# ---------------------------------------------------------------------------
# Commands

def cmd_ingest(args, cfg: config_mod.RunConfig) -> int:
    result = corpus.parse_dataset(args.input, cfg.fields, default_split=args.split)
    out = cfg.out_dir
    corpus.write_dataset(result.dataset, out / "dataset.jsonl", cfg.fields)
    corpus.write_rejects(result.rejects, out / "rejects.jsonl")
    _write_json(out / "stats.json", corpus.dataset_stats(result.dataset).to_dict())
    config_mod.write_manifest(out, "ingest", {"input": args.input}, cfg)
    print(f"accepted {result.accepted} records, rejected {result.rejected}")
    stats = corpus.dataset_stats(result.dataset)
    for split, count in sorted(stats.per_split.items()):
        print(f"  {split}: {count}")
    return 0


def cmd_classify(args, cfg: config_mod.RunConfig) -> int:
    if cfg.model is None:
        raise CliError("classify requires a model section in the config")
    dataset = _load_dataset(args.input, cfg)
    backend = gateway.backend_for(cfg.model)
    cache = gateway.ResponseCache(cfg.out_dir / "response_cache.jsonl")
    try:
        predictions = gateway.classify_batch(
            dataset,
            cfg.prompt_config(),
            cfg.model,
            backend,
            parallelism=cfg.parallelism,
            checkpoint_path=cfg.out_dir / "classify.checkpoint.jsonl",
            cache=cache,
        )
    finally:
        cache.close()
    gateway.write_predictions(predictions, cfg.out_dir / "predictions.jsonl")
    config_mod.write_manifest(cfg.out_dir, "classify", {"input": args.input}, cfg)
    counts = {}
    for pred in predictions:
        counts[pred.label] = counts.get(pred.label, 0) + 1
    print(f"classified {len(predictions)} instances: " +
          ", ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    return 0


def cmd_clean(args, cfg: config_mod.RunConfig) -> int:
    dataset = _load_dataset(args.input, cfg)
    predictions = gateway.read_predictions(args.predictions)
    provenance = {}
    if predictions:
        provenance = {"model_id": predictions[0].model_id,
                      "prompt_fingerprint": predictions[0].prompt_fingerprint}
    cleaned, report = cleaning.apply_clean(
        dataset, predictions, treat_errors_as=args.treat_errors_as, provenance=provenance
    )
    corpus.write_dataset(cleaned, cfg.out_dir / "cleaned.jsonl", cfg.fields)
    _write_json(cfg.out_dir / "clean_report.json", report.to_dict())
    config_mod.write_manifest(
        cfg.out_dir, "clean",
        {"input": args.input, "predictions": args.predictions}, cfg,
    )
    print(f"retained {report.retained}/{report.input_size} "
          f"({metrics.format_percent(report.retained_ratio)}%)")
    return 0


def cmd_control(args, cfg: config_mod.RunConfig) -> int:
    dataset = _load_dataset(args.input, cfg)
    inputs = {"input": args.input}
    if args.match:
        inputs["match"] = args.match
        match = _load_dataset(args.match, cfg)
        pieces = []
        for split in dataset.splits():
            target = len(match.for_split(split))
            pool = dataset.for_split(split)
            if target:
                pieces.append(cleaning.sample_controlled(pool, target, cfg.seed))
        chosen = {inst.id for piece in pieces for inst in piece}
        controlled = dataset.subset(chosen)
    else:
        controlled = cleaning.sample_controlled(dataset, args.target_size, cfg.seed)
    out_path = cfg.out_dir / f"controlled_seed{cfg.seed}.jsonl"
    corpus.write_dataset(controlled, out_path, cfg.fields)
    _write_json(
        cfg.out_dir / "control_report.json",
        {
            "input_size": len(dataset),
            "controlled_size": len(controlled),
            "seed": cfg.seed,
            "per_split": corpus.dataset_stats(controlled).per_split,
        },
    )
    config_mod.write_manifest(cfg.out_dir, "control", inputs, cfg)
    print(f"sampled {len(controlled)}/{len(dataset)} -> {out_path.name}")
    return 0


def cmd_eval_classify(args, cfg: config_mod.RunConfig) -> int:
    dataset = _load_dataset(args.gold, cfg)
    gold = {inst.id: inst.gold_label for inst in dataset if inst.gold_label}
    if not gold:
        raise CliError(f"{args.gold} carries no gold labels")
    predictions = gateway.read_predictions(args.predictions)
    labels = {p.instance_id: p.label for p in predictions}
    missing = [gid for gid in gold if gid not in labels]
    if missing:
        raise CliError(f"predictions missing for {len(missing)} gold instances")

    pairs = []
    excluded = 0
    for gid in gold:
        label = labels[gid]
        if label == gateway.ERROR_LABEL:
            if args.exclude_errors:
                excluded += 1
                continue
            label = metrics.NOISY
        pairs.append((gold[gid], label))
    cm = metrics.confusion([g for g, _ in pairs], [p for _, p in pairs])
    summary = metrics.classification_summary(cm)

    payload = {"summary": summary, "excluded_errors": excluded}
    try:
        ratio = cleaning.valid_ratio({gid: labels[gid] for gid in gold}, gold)
        payload["valid_ratio"] = ratio.to_dict()
    except cleaning.CleaningError:
        ratio = None
    _write_json(cfg.out_dir / "eval_classify.json", payload)
    config_mod.write_manifest(
        cfg.out_dir, "eval-classify",
        {"gold": args.gold, "predictions": args.predictions}, cfg,
    )
    print(metrics.format_classification_table({args.name: summary}))
    if ratio is not None:
        print(
            f"valid ratio {metrics.format_percent(ratio.ratio)}% "
            f"vs baseline {metrics.format_percent(ratio.baseline)}% "
            f"({'+' if ratio.delta >= 0 else ''}{metrics.format_percent(ratio.delta)} points)"
        )
    if excluded:
        print(f"excluded {excluded} error-marked predictions")
    return 0


def cmd_eval_bleu(args, cfg: config_mod.RunConfig) -> int:
    dataset = _load_dataset(args.references, cfg, default_split="test")
    references = {inst.id: inst.comment for inst in dataset}
    generations = _read_generations(args.generations)
    inputs = {"references": args.references, "generations": args.generations}

    subset_labels = []
    if args.subsets:
        inputs["subsets"] = args.subsets
        with open(args.subsets, "r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                record = json.loads(line)
                subset_labels.append(
                    bleu.SubsetLabel(
                        id=str(record["id"]),
                        label=record["label"],
                        source=record.get("source", "our"),
                    )
                )

    mode = bleu.DROP_STOPWORDS if args.drop_stopwords else bleu.KEEP_STOPWORDS
    stopwords = bleu.load_stopwords(args.stopwords) if args.stopwords else None
    baseline_report = None
    if args.baseline:
        inputs["baseline"] = args.baseline
        baseline_report = bleu.bleu_report(
            _read_generations(args.baseline), references, subset_labels,
            mode=mode, stopwords=stopwords,
        )
    report = bleu.bleu_report(
        generations, references, subset_labels,
        baseline=baseline_report, mode=mode, stopwords=stopwords,
    )
    _write_json(cfg.out_dir / "bleu_report.json", report.to_records())
    config_mod.write_manifest(cfg.out_dir, "eval-bleu", inputs, cfg)
    print(report.format_table())
    return 0


def cmd_cluster(args, cfg: config_mod.RunConfig) -> int:
    if cfg.model is None:
        raise CliError("cluster requires a model section in the config (for embeddings)")
    if args.input_format == "dataset":
        dataset = _load_dataset(args.input, cfg, default_split="test")
        comments = {inst.id: inst.comment for inst in dataset}
    else:
        comments = _read_generations(args.input)
    ids = list(comments)
    texts = [comments[i] for i in ids]

    backend = gateway.backend_for(cfg.model)
    cache = gateway.ResponseCache(cfg.out_dir / "response_cache.jsonl")
    try:
        embeddings = gateway.embed_texts(texts, cfg.model, backend, cache=cache)
    finally:
        cache.close()
    token_lists = [bleu.tokenize(text).tokens for text in texts]
    model = topics.build_topic_model(
        ids, token_lists, embeddings, k=args.k, n_top_terms=args.top_terms
    )

    payload = {
        "k": model.k,
        "assignment": model.assignment,
        "cluster_members": {str(c): list(m) for c, m in model.cluster_members.items()},
        "representatives": {str(c): list(r) for c, r in model.representatives.items()},
        "top_terms": {
            str(c): topics.top_terms(model.term_weights[c], args.top_terms)
            for c in model.term_weights
        },
        "coherence": {
            "per_cluster": {str(c): v for c, v in model.coherence.per_cluster.items()},
            "mean": model.coherence.mean,
            "insufficient": model.coherence.insufficient,
        },
    }
    _write_json(cfg.out_dir / "topic_model.json", payload)
    with open(cfg.out_dir / "annotation_sheet.jsonl", "w", encoding="utf-8") as fh:
        for cid in sorted(model.representatives):
            for rep in model.representatives[cid]:
                fh.write(
                    json.dumps(
                        {
                            "cluster": cid,
                            "id": rep,
                            "comment": comments[rep],
                            "information": None,
                            "relevance": None,
                        },
                        ensure_ascii=False,
                    )
                    + "\n"
                )
    config_mod.write_manifest(cfg.out_dir, "cluster", {"input": args.input}, cfg)
    print(f"clustered {len(ids)} comments into {model.k} clusters; "
          f"mean coherence {model.coherence.mean:.3f}")
    if model.coherence.mean < args.coherence_gate:
        print(f"warning: mean coherence below gate {args.coherence_gate}")
    print(f"annotation sheet: {cfg.out_dir / 'annotation_sheet.jsonl'}")
    return 0


def cmd_quality_report(args, cfg: config_mod.RunConfig) -> int:
    model = json.loads(Path(args.topic_model).read_text("utf-8"))
    members = {int(c): tuple(m) for c, m in model["cluster_members"].items()}
    reps = {int(c): tuple(r) for c, r in model["representatives"].items()}
    annotations = {}
    with open(args.annotations, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            if record.get("information") is None or record.get("relevance") is None:
                continue
            annotations[str(record["id"])] = (
                float(record["information"]),
                float(record["relevance"]),
            )
    scores = topics.propagate_scores(members, reps, annotations)
    _write_json(cfg.out_dir / "quality_report.json", scores.to_dict())
    config_mod.write_manifest(
        cfg.out_dir, "quality-report",
        {"topic_model": args.topic_model, "annotations": args.annotations}, cfg,
    )
    print(f"{'Cluster':>8} {'Size':>6} {'Information':>12} {'Relevance':>10}")
    for cid in sorted(members):
        print(f"{cid:>8} {len(members[cid]):>6} "
              f"{scores.per_cluster_information[cid]:>12.2f} "
              f"{scores.per_cluster_relevance[cid]:>10.2f}")
    print(f"{'overall':>8} {sum(len(m) for m in members.values()):>6} "
          f"{scores.overall_information:>12.2f} {scores.overall_relevance:>10.2f}")
    return 0


# ---------------------------------------------------------------------------
# Annotation flow

def _load_annotation_file(path: Path) -> list:
    if not path.exists():
        return []
    decisions = []
    try:
        for line in path.read_text("utf-8").splitlines():
            if not line.strip():
                continue
            record = json.loads(line)
            decisions.append({"id": str(record["id"]), "label": record["label"]})
    except (json.JSONDecodeError, KeyError) as err:
        raise ResumeCorrupt(f"{path}: {err}") from err
    return decisions


def _save_annotation_file(path: Path, decisions: list) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for decision in decisions:
            fh.write(json.dumps(decision, ensure_ascii=False) + "\n")
    tmp.replace(path)


def cmd_annotate(args, cfg: config_mod.RunConfig) -> int:
    dataset = _load_dataset(args.input, cfg)
    labels_path = Path(args.labels)
    decisions = _load_annotation_file(labels_path)
    for i, decision in enumerate(decisions):
        if i >= len(dataset) or decision["id"] != dataset[i].id:
            raise ResumeCorrupt(
                f"{labels_path}: decision {i + 1} does not match the sample order"
            )

    if args.guidelines:
        print(Path(args.guidelines).read_text("utf-8"))

    idx = len(decisions)
    print(f"{len(dataset)} instances, {idx} already decided. "
          f"Keys: [v]alid [n]oisy [s]kip [b]ack [q]uit")
    while idx < len(dataset):
        inst = dataset[idx]
        print("\n" + "=" * 72)
        print(f"[{idx + 1}/{len(dataset)}] id={inst.id} lang={inst.lang}")
        print(f"comment: {inst.comment}")
        print("-" * 72)
        print(inst.patch)
        try:
            answer = input("label> ").strip().lower()
        except EOFError:
            break
        key = answer[:1]
        if key == "v" or key == "n":
            decisions.append({"id": inst.id, "label": "valid" if key == "v" else "noisy"})
            _save_annotation_file(labels_path, decisions)
            idx += 1
        elif key == "s":
            decisions.append({"id": inst.id, "label": "skip"})
            _save_annotation_file(labels_path, decisions)
            idx += 1
        elif key == "b":
            if decisions:
                decisions.pop()
                _save_annotation_file(labels_path, decisions)
                idx -= 1
            else:
                print("nothing to go back to")
        elif key == "q":
            break
        else:
            print("keys: v=valid n=noisy s=skip b=back q=quit")

    decided = sum(1 for d in decisions if d["label"] in ("valid", "noisy"))
    print(f"\n{decided} labeled, {len(decisions) - decided} skipped, "
          f"{len(dataset) - len(decisions)} remaining -> {labels_path}")

    if args.kappa_against:
        other = _load_annotation_file(Path(args.kappa_against))
        mine = {d["id"]: d["label"] for d in decisions if d["label"] in ("valid", "noisy")}
        theirs = {d["id"]: d["label"] for d in other if d["label"] in ("valid", "noisy")}
        common = [gid for gid in mine if gid in theirs]
        if len(common) < 2:
            raise CliError("fewer than 2 commonly labeled instances; cannot compute kappa")
        kappa = metrics.cohens_kappa([mine[g] for g in common], [theirs[g] for g in common])
        _write_json(
            cfg.out_dir / "kappa_report.json",
            {"kappa": kappa, "n_common": len(common),
             "files": [str(labels_path), args.kappa_against]},
        )
        print(f"Cohen's kappa over {len(common)} instances: {kappa:.4f}")
    return 0


def cmd_sample(args, cfg: config_mod.RunConfig) -> int:
    dataset = _load_dataset(args.input, cfg)
    if args.split:
        dataset = dataset.for_split(args.split)
        if not len(dataset):
            raise CliError(f"no instances in split {args.split!r}")
    sampled = cleaning.sample_controlled(dataset, args.size, cfg.seed)
    out_path = cfg.out_dir / f"sample_seed{cfg.seed}.jsonl"
    corpus.write_dataset(sampled, out_path, cfg.fields)
    config_mod.write_manifest(cfg.out_dir, "sample", {"input": args.input}, cfg)
    print(f"sampled {len(sampled)} instances -> {out_path.name}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "trace", False) else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _run_config(args)
        return args.func(args, cfg)
    except (
        CliError,
        bleu.BleuError,
        cleaning.CleaningError,
        config_mod.ConfigError,
        corpus.CorpusError,
        gateway.GatewayError,
        metrics.MetricsError,
        topics.TopicsError,
        FileNotFoundError,
    ) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
