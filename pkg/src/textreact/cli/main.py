"""``textreact <subcommand> --config path [--key value ...]``"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .. import data as D
from ..data.records import ConditionSet, Dataset
from ..data.splits import RCR_TIME_SPLIT, RETRO_TIME_SPLIT, DatasetSplit, make_random_split, make_time_split
from ..data.synthetic import SyntheticParams, generate_synthetic, template_table
from ..data.vocab import Vocabs, build_vocabs
from ..errors import TextReactError
from ..eval import (
    FingerprintIndex,
    NoMappableNeighbors,
    Scenario,
    build_scenario,
    config_hash,
    neighbor_distance_stats,
    recall_report,
    rxnfp_baseline,
    topk_accuracy,
)
from ..predictor import (
    IndexEncoderDimMismatch,
    PredictOptions,
    PredictorConfig,
    TrainingExample,
    expand_templates,
    load_predictor,
    predict_topn,
    prediction_line,
    save_predictor,
    text_cache_for,
    train_predictor,
)
from ..retriever import (
    EmbeddingIndex,
    RetrieverConfig,
    build_index,
    load_retriever,
    rank_records,
    recall_at_k,
    save_retriever,
    train_retriever,
)
from .config import ConfigError, MissingRequired, RunConfig, parse_config

log = logging.getLogger("textreact")

COMMANDS = (
    "gen-synth",
    "split",
    "train-retriever",
    "build-index",
    "retrieve",
    "train-predictor",
    "predict",
    "evaluate",
    "sweep",
    "grad-check",
)


class ScenarioViolation(TextReactError, RuntimeError):
    pass


# ---------------------------------------------------------------- helpers


def data_task(cfg: RunConfig) -> str:
    return "rcr" if cfg.task == "rcr" else "retro"


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_jsonl(path, rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_data(cfg: RunConfig):
    corpus = D.load_corpus(cfg.require("corpus"))
    src = cfg.path("sources")
    if src.exists():
        corpus.sources.update(D.load_sources(src))
    dataset = D.load_reactions(cfg.require("dataset"), data_task(cfg), corpus)
    split = DatasetSplit.load(cfg.require("splits"))
    return corpus, dataset, split


def train_records(cfg: RunConfig, dataset: Dataset, split: DatasetSplit):
    records = dataset.select(split.train)
    if cfg.train_frac < 1.0:
        rng = np.random.default_rng(cfg.seed)
        keep = sorted(rng.permutation(len(records))[: max(1, int(cfg.train_frac * len(records)))])
        records = [records[i] for i in keep]
    return records


def get_vocabs(cfg: RunConfig, dataset: Dataset, split: DatasetSplit, corpus) -> Vocabs:
    path = cfg.path("vocab")
    if path.exists():
        return Vocabs.load(path)
    vocabs = build_vocabs(dataset.select(split.train), corpus)
    path.parent.mkdir(parents=True, exist_ok=True)
    vocabs.save(path)
    return vocabs


def retriever_config(cfg: RunConfig) -> RetrieverConfig:
    return RetrieverConfig(
        cfg.d_model, cfg.n_heads, cfg.n_layers, cfg.d_ff, cfg.ret_max_len, cfg.dropout_rate,
        cfg.ret_epochs, cfg.ret_batch_size, cfg.ret_lr, cfg.ret_warmup, cfg.seed,
    )


def predictor_config(cfg: RunConfig) -> PredictorConfig:
    return PredictorConfig(
        task=cfg.task, d_model=cfg.d_model, n_heads=cfg.n_heads, n_layers=cfg.n_layers, dec_layers=cfg.dec_layers,
        d_ff=cfg.d_ff, max_len=cfg.max_len, max_target_len=cfg.max_target_len, dropout_rate=cfg.dropout_rate,
        alpha=cfg.alpha, K=cfg.K, k=cfg.k, mask_lambda=cfg.mask_lambda, mask_ratio=cfg.mask_ratio,
        max_span=cfg.max_span, lambda_mlm=cfg.lambda_mlm, use_masking=cfg.use_masking, epochs=cfg.epochs,
        batch_size=cfg.batch_size, lr=cfg.lr, warmup_fraction=cfg.warmup, randomize_prob=cfg.randomize_prob,
        seed=cfg.seed,
    )


def scenario_of(cfg: RunConfig) -> Scenario:
    return Scenario(cfg.scenario, cfg.ts_cutoff if cfg.scenario == "ts_corpus" else None)


def allowed_rows(index: EmbeddingIndex, corpus_view) -> np.ndarray:
    keep = set(corpus_view.ids)
    return np.array([pid in keep for pid in index.ids], dtype=bool)


def load_templates_if_any(cfg: RunConfig):
    path = cfg.path("templates")
    return D.load_templates(path) if cfg.task == "retro_tb" and path.exists() else None


# ---------------------------------------------------------------- commands


def cmd_gen_synth(cfg: RunConfig, args) -> int:
    params = SyntheticParams(
        n_reactions=cfg.n_reactions, n_types=cfg.n_types, n_fragments=cfg.n_fragments,
        distractor_rate=cfg.distractor_rate, condition_noise=cfg.condition_noise, n_unlabeled=cfg.n_unlabeled,
    )
    corpus, dataset = generate_synthetic(params, seed=cfg.seed, task=data_task(cfg))
    D.ensure_dir(cfg.out_dir)
    D.save_corpus(corpus, cfg.path("corpus"))
    D.save_reactions(dataset, cfg.path("dataset"))
    D.save_sources(corpus.sources, cfg.path("sources"))
    if dataset.task == "retro":
        D.save_templates(template_table(dataset), cfg.path("templates"))
    log.info("wrote %d paragraphs and %d reactions", len(corpus), len(dataset))
    return 0


def cmd_split(cfg: RunConfig, args) -> int:
    dataset = D.load_reactions(cfg.require("dataset"), data_task(cfg))
    if cfg.split_kind == "random":
        split = make_random_split(dataset.ids, seed=cfg.seed)
    else:
        windows = RCR_TIME_SPLIT if cfg.task == "rcr" else RETRO_TIME_SPLIT
        split = make_time_split(dataset.records, **windows)
    D.ensure_dir(cfg.path("splits").parent)
    split.save(cfg.path("splits"))
    log.info("split: %d train / %d valid / %d test", len(split.train), len(split.valid), len(split.test))
    return 0


def cmd_train_retriever(cfg: RunConfig, args) -> int:
    corpus, dataset, split = load_data(cfg)
    vocabs = get_vocabs(cfg, dataset, split, corpus)
    rcfg = retriever_config(cfg)
    model, hist = train_retriever(rcfg, dataset.select(split.train), corpus, vocabs, dataset.select(split.valid))
    save_retriever(cfg.path("retriever_ckpt"), model, rcfg, {"config_hash": config_hash(cfg.to_dict())})
    write_json(
        Path(cfg.out_dir) / "retriever_history.json",
        {"losses": hist.losses, "valid_r1": hist.valid_r1, "best_epoch": hist.best_epoch, "config_hash": config_hash(cfg.to_dict())},
    )
    return 0


def cmd_build_index(cfg: RunConfig, args) -> int:
    corpus = D.load_corpus(cfg.require("corpus"))
    model, _ = load_retriever(cfg.require("retriever_ckpt"))
    vocabs = Vocabs.load(cfg.require("vocab"))
    index = build_index(model.text, corpus, vocabs)
    index.save(cfg.path("index"))
    log.info("indexed %d paragraphs (d=%d)", len(index), index.dim)
    return 0


def retrieve_for(cfg, model, index, vocabs, records, corpus_view=None, append_gold=False, audit=None):
    allowed = None if corpus_view is None else allowed_rows(index, corpus_view)
    ranked = rank_records(model, index, records, vocabs, cfg.K, allowed, append_gold)
    if audit is not None:
        for rid, hits in ranked.items():
            for pid, _ in hits:
                audit(rid, pid)
    return ranked


def _scenario_audit(cfg: RunConfig, corpus, view, counter: list):
    """Checks every retrieved id against the scenario's corpus."""
    keep = set(view.ids)

    def audit(rid, pid):
        counter[0] += 1
        if pid not in keep:
            raise ScenarioViolation(f"{rid}: retrieved {pid} outside the {cfg.scenario} corpus")
        if cfg.scenario == "ts_corpus" and corpus[pid].year > cfg.ts_cutoff:
            raise ScenarioViolation(f"{rid}: retrieved {pid} from {corpus[pid].year} > {cfg.ts_cutoff}")

    return audit


def cmd_retrieve(cfg: RunConfig, args) -> int:
    corpus, dataset, split = load_data(cfg)
    model, _ = load_retriever(cfg.require("retriever_ckpt"))
    index = EmbeddingIndex.load(cfg.require("index"))
    vocabs = Vocabs.load(cfg.require("vocab"))
    view = build_scenario(corpus, dataset, split, scenario_of(cfg))
    counter = [0]
    audit = _scenario_audit(cfg, corpus, view, counter)
    rows = []
    train_ranked = retrieve_for(cfg, model, index, vocabs, dataset.select(split.train), append_gold=True)
    other = retrieve_for(cfg, model, index, vocabs, dataset.select(split.valid) + dataset.select(split.test), view, audit=audit)
    part_of = {rid: name for name, ids in split.parts().items() for rid in ids}
    for rid, hits in {**train_ranked, **other}.items():
        rows.append({"id": rid, "split": part_of[rid], "hits": [[p, s] for p, s in hits]})
    write_jsonl(cfg.path("neighbors"), rows)
    test = [r for r in dataset.select(split.test) if r.text_id is not None]
    if test:
        recalls = recall_at_k([[p for p, _ in other[r.id]] for r in test], [r.text_id for r in test], (1, 3, 10))
        report = recall_report(recalls, len(test), cfg.task, scenario=scenario_of(cfg).describe(), config_hash=config_hash(cfg.to_dict()))
        report.counts["audited_retrievals"] = counter[0]
        report.save(Path(cfg.out_dir) / "retrieval_metrics.json")
        log.info("test recall %s", recalls)
    return 0


def load_neighbors(cfg: RunConfig) -> dict[str, list[tuple[str, float]]]:
    return {row["id"]: [(p, s) for p, s in row["hits"]] for row in read_jsonl(cfg.require("neighbors"))}


def cmd_train_predictor(cfg: RunConfig, args) -> int:
    corpus, dataset, split = load_data(cfg)
    vocabs = get_vocabs(cfg, dataset, split, corpus)
    pcfg = predictor_config(cfg)
    neighbors = load_neighbors(cfg) if pcfg.k > 0 else {}
    if pcfg.k > 0:
        index = EmbeddingIndex.load(cfg.require("index"))
        retriever, _ = load_retriever(cfg.require("retriever_ckpt"))
        if index.dim != retriever.dim:
            raise IndexEncoderDimMismatch(f"index dim {index.dim} vs retriever encoder dim {retriever.dim}")
    train = [TrainingExample(r, [p for p, _ in neighbors.get(r.id, [])]) for r in train_records(cfg, dataset, split)]
    valid = [(r, neighbors.get(r.id, [])) for r in dataset.select(split.valid)]
    cache = text_cache_for(vocabs, corpus)
    model, hist = train_predictor(pcfg, train, vocabs, cache, valid, table=load_templates_if_any(cfg))
    save_predictor(cfg.path("predictor_ckpt"), model, {"config_hash": config_hash(cfg.to_dict())})
    write_json(
        Path(cfg.path("predictor_ckpt")).with_suffix(".history.json"),
        {"losses": hist.losses, "valid": hist.valid_acc, "best_epoch": hist.best_epoch, "config_hash": config_hash(cfg.to_dict())},
    )
    return 0


def options_of(cfg: RunConfig) -> PredictOptions:
    return PredictOptions(
        ensemble_separate=cfg.mode == "ensemble_separate",
        smiles_only=cfg.mode == "smiles_only",
        text_only=cfg.mode == "text_only",
        beam_width=cfg.beam_width,
    )


def run_predictions(cfg: RunConfig) -> tuple[list[dict], list, dict]:
    """Predictions for the test split under the configured scenario."""
    corpus, dataset, split = load_data(cfg)
    test = dataset.select(split.test)
    n = max(cfg.ks)
    counts: dict = {}
    if cfg.baseline == "rxnfp":
        if cfg.task != "rcr":
            raise ConfigError("the fingerprint baseline predicts reaction conditions (task rcr)")
        fps = FingerprintIndex(train_records(cfg, dataset, split))
        rows = []
        for r in test:
            conds = rxnfp_baseline(fps, r, n)
            preds = [{"rank": i + 1, "score": -float(i), "conditions": dict(zip(D.SLOTS, c.as_tuple()))} for i, c in enumerate(conds)]
            rows.append({"id": r.id, "predictions": preds, "neighbors": []})
        return rows, test, counts
    model, meta = load_predictor(cfg.require("predictor_ckpt"))
    vocabs = Vocabs.load(cfg.require("vocab"))
    retrieved: dict = {r.id: [] for r in test}
    if model.cfg.k > 0 and cfg.mode != "smiles_only":
        retriever, _ = load_retriever(cfg.require("retriever_ckpt"))
        index = EmbeddingIndex.load(cfg.require("index"))
        view = build_scenario(corpus, dataset, split, scenario_of(cfg))
        counter = [0]
        retrieved = retrieve_for(cfg, retriever, index, vocabs, test, view, audit=_scenario_audit(cfg, corpus, view, counter))
        counts["audited_retrievals"] = counter[0]
    cache = text_cache_for(vocabs, corpus)
    table = load_templates_if_any(cfg)
    opts = options_of(cfg)
    rows = []
    for r in test:
        hits = retrieved[r.id]
        preds = predict_topn(model, vocabs, r, hits, n, cache, opts)
        if cfg.task == "retro_tb":
            preds = expand_templates(preds, r.product, table)
        rows.append(prediction_line(r.id, preds, [p for p, _ in hits[: model.cfg.k]]))
    return rows, test, counts


def cmd_predict(cfg: RunConfig, args) -> int:
    rows, _, _ = run_predictions(cfg)
    h = config_hash(cfg.to_dict())
    write_jsonl(cfg.path("predictions"), [{**row, "config_hash": h} for row in rows])
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    if cfg.baseline == "none":
        cfg.require("predictor_ckpt")
    rows, test, counts = run_predictions(cfg)
    h = config_hash(cfg.to_dict())
    write_jsonl(cfg.path("predictions"), [{**row, "config_hash": h} for row in rows])
    preds = {row["id"]: row["predictions"] for row in rows}
    report = topk_accuracy(preds, test, cfg.task, cfg.ks, scenario=scenario_of(cfg).describe(), config_hash=h)
    report.counts.update(counts)
    report.save(cfg.path("metrics"))
    log.info("top-k accuracy %s", report.values)
    write_neighbor_csv(cfg, rows, test, h)
    return 0


def write_neighbor_csv(cfg: RunConfig, rows, test, h: str) -> None:
    """Per-record fingerprint distances to the neighbours used, for external plotting."""
    src = cfg.path("sources")
    neighbors = {row["id"]: row["neighbors"] for row in rows if row.get("neighbors")}
    if not neighbors or not src.exists():
        return
    try:
        stats = neighbor_distance_stats(test, neighbors, D.load_sources(src))
    except NoMappableNeighbors:
        return
    path = Path(cfg.path("metrics")).with_name("neighbor_distances.csv")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        fh.write(f"# config_hash={h}\n")
        writer.writerow(["id", "avg_input_neighbor_dist", "avg_inter_neighbor_dist"])
        for rid, v in stats.per_record.items():
            inter = v["avg_inter_neighbor_dist"]
            writer.writerow([rid, repr(v["avg_input_neighbor_dist"]), "" if inter is None else repr(inter)])


SWEEP_PARAMS = {"alpha": float, "k": int, "train_frac": float}


def cmd_sweep(cfg: RunConfig, args) -> int:
    if args.param not in SWEEP_PARAMS:
        raise ConfigError(f"--param must be one of {sorted(SWEEP_PARAMS)}")
    if not args.values:
        raise MissingRequired("values")
    base = Path(cfg.out_dir)
    for raw in args.values.split(","):
        value = SWEEP_PARAMS[args.param](raw)
        sub = base / "sweep" / f"{args.param}={raw.strip()}"
        shared = {role: str(cfg.path(role)) for role in ("corpus", "dataset", "sources", "templates", "splits", "vocab", "retriever_ckpt", "index", "neighbors")}
        run = cfg.replace(
            **{args.param: value},
            **shared,
            predictor_ckpt=str(sub / "predictor.ckpt"),
            predictions=str(sub / "predictions.jsonl"),
            metrics=str(sub / "metrics.json"),
        )
        sub.mkdir(parents=True, exist_ok=True)
        cmd_train_predictor(run, args)
        cmd_evaluate(run, args)
    return 0


def cmd_grad_check(cfg: RunConfig, args) -> int:
    from ..gradsuite import run_suite

    results = run_suite(seed=cfg.seed)
    write_json(Path(cfg.out_dir) / "gradcheck.json", {"results": results, "config_hash": config_hash(cfg.to_dict())})
    failed = [r for r in results if not r["passed"]]
    for r in results:
        log.info("%s %s max_rel_err=%.3g (%s)", r["name"], "ok" if r["passed"] else "FAIL", r["max_rel_err"], r["worst_param"])
    return 1 if failed else 0


HANDLERS: dict[str, Callable] = {
    "gen-synth": cmd_gen_synth,
    "split": cmd_split,
    "train-retriever": cmd_train_retriever,
    "build-index": cmd_build_index,
    "retrieve": cmd_retrieve,
    "train-predictor": cmd_train_predictor,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "grad-check": cmd_grad_check,
}


# ---------------------------------------------------------------- entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="textreact", description="Text-augmented reaction prediction")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", default=None, help="flat key = value file")
    parser.add_argument("--param", default=None, help="sweep parameter: alpha, k or train_frac")
    parser.add_argument("--values", default=None, help="comma-separated sweep values")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def split_overrides(rest: Sequence[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    i = 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:].replace("-", "_")
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(rest):
                raise ConfigError(f"flag {tok} needs a value")
            value = rest[i + 1]
            i += 2
        out[key] = value
    return out


def set_threads() -> None:
    torch.set_num_threads(max(1, int(os.environ.get("TEXTREACT_THREADS", "1"))))


def run_command(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, rest = build_parser().parse_known_args(argv)
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.INFO,
            stream=sys.stderr,
            format="%(asctime)s %(name)s %(levelname)s %(message)s",
        )
        cfg = parse_config(args.config, split_overrides(rest))
    except ConfigError as exc:
        print(f"textreact: {exc}", file=sys.stderr)
        return 2
    set_threads()
    t0 = time.time()
    try:
        code = HANDLERS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"textreact {args.command}: {exc}", file=sys.stderr)
        return 2
    except (TextReactError, OSError, ValueError, KeyError) as exc:
        print(f"textreact {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    log.info("%s finished in %.1fs", args.command, time.time() - t0)
    return code


def main() -> None:
    sys.exit(run_command())
