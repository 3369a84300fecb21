"""Metrics, evaluation scenarios, the reaction-fingerprint baseline and neighbour-distance analysis."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .chem import fp_distance, reaction_fingerprint_smiles
from .data.records import SLOTS, Center, ConditionSet, Corpus, Dataset, ReactionRecord, RetroLabel
from .data.splits import DatasetSplit
from .errors import TextReactError


class EmptyResultCorpus(TextReactError, ValueError):
    pass


class TaskMismatch(TextReactError, ValueError):
    pass


class EmptyTrainSet(TextReactError, ValueError):
    pass


class NoMappableNeighbors(TextReactError, ValueError):
    pass


def config_hash(config: Mapping) -> str:
    """Stable 16-hex-digit fingerprint of a JSON-serializable config."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------- scenarios


SCENARIOS = ("full", "gold_removed", "ts_corpus")


@dataclass(frozen=True)
class Scenario:
    kind: str = "full"
    cutoff: int | None = None  # ts_corpus: keep paragraphs with year <= cutoff

    def __post_init__(self):
        if self.kind not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.kind!r}")
        if self.kind == "ts_corpus" and self.cutoff is None:
            raise ValueError("ts_corpus needs a year cutoff")

    def describe(self) -> dict:
        return {"kind": self.kind, "cutoff": self.cutoff}


def test_gold_ids(dataset: Dataset, split: DatasetSplit) -> set[str]:
    return {r.text_id for r in dataset.select(split.test) if r.text_id is not None}


def build_scenario(corpus: Corpus, dataset: Dataset, split: DatasetSplit, scenario: Scenario) -> Corpus:
    """full: the corpus itself; gold_removed: minus every test gold paragraph;
    ts_corpus: only paragraphs with year <= cutoff."""
    if scenario.kind == "full":
        return corpus
    if scenario.kind == "gold_removed":
        gold = test_gold_ids(dataset, split)
        out = corpus.subset(lambda p: p.id not in gold)
    else:
        out = corpus.subset(lambda p: p.year <= scenario.cutoff)
    if not len(out):
        raise EmptyResultCorpus(f"scenario {scenario.kind} leaves no paragraphs")
    return out


# ---------------------------------------------------------------- accuracy


def prediction_key(task: str, payload: Mapping):
    """Hashable identity of a prediction used for matching and deduplication."""
    if task == "rcr":
        if "conditions" not in payload:
            raise TaskMismatch("rcr prediction without conditions")
        return tuple(payload["conditions"][s] for s in SLOTS)
    if "reactants" in payload:
        return tuple(sorted(payload["reactants"]))
    if "template_id" in payload:
        c = payload["center"]
        return ("template", payload["template_id"], c["kind"], c["atom_a"], c.get("atom_b"))
    raise TaskMismatch(f"{task} prediction carries no reactants or template")


def gold_keys(record: ReactionRecord) -> list:
    if isinstance(record.label, ConditionSet):
        return [record.label.as_tuple()]
    keys = [tuple(sorted(record.reactants))]
    lab = record.label
    if isinstance(lab, RetroLabel) and lab.template_id is not None and lab.center is not None:
        keys.append(("template", lab.template_id, lab.center.kind, lab.center.atom_a, lab.center.atom_b))
    return keys


@dataclass
class MetricsReport:
    task: str
    kind: str  # "accuracy" or "recall"
    values: dict[int, float]
    counts: dict
    scenario: dict = field(default_factory=lambda: {"kind": "full", "cutoff": None})
    split: str = "test"
    config_hash: str = ""

    @property
    def ks(self) -> list[int]:
        return sorted(self.values)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "scenario": self.scenario,
            "split": self.split,
            "ks": self.ks,
            self.kind: {str(k): self.values[k] for k in self.ks},
            "counts": self.counts,
            "config_hash": self.config_hash,
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def gold_ranks(predictions: Mapping[str, Sequence[Mapping]], records: Sequence[ReactionRecord], task: str) -> dict[str, int | None]:
    """1-based rank of the gold answer after deduplication, None when absent."""
    expected = "rcr" if task == "rcr" else "retro"
    ranks: dict[str, int | None] = {}
    for r in records:
        if r.task != expected:
            raise TaskMismatch(f"record {r.id} is a {r.task} record, evaluation task is {task}")
        preds = predictions.get(r.id)
        if not preds:
            raise ValueError(f"record {r.id} has no predictions")
        gold = gold_keys(r)
        seen: list = []
        rank = None
        for p in sorted(preds, key=lambda p: p.get("rank", 0)):
            key = prediction_key(task, p)
            if key in seen:
                continue
            seen.append(key)
            if key in gold:
                rank = len(seen)
                break
        ranks[r.id] = rank
    return ranks


def topk_accuracy(predictions, records: Sequence[ReactionRecord], task: str, ks=(1, 3, 10, 15), **meta) -> MetricsReport:
    if not records:
        raise ValueError("no records to evaluate")
    ranks = gold_ranks(predictions, records, task)
    values = {k: sum(1 for v in ranks.values() if v is not None and v <= k) / len(records) for k in ks}
    counts = {"records": len(records), "found": sum(v is not None for v in ranks.values())}
    return MetricsReport(task, "accuracy", values, counts, **meta)


def recall_report(recalls: Mapping[int, float], n_queries: int, task: str, **meta) -> MetricsReport:
    return MetricsReport(task, "recall", dict(recalls), {"queries": n_queries}, **meta)


# ---------------------------------------------------------------- fingerprint baseline


class FingerprintIndex:
    """Precomputed reaction fingerprints of the training reactions."""

    def __init__(self, records: Sequence[ReactionRecord]):
        if not records:
            raise EmptyTrainSet("fingerprint baseline needs training reactions")
        self.records = list(records)
        self.fps = np.stack([reaction_fingerprint_smiles(r.reactants, r.product) for r in self.records]).astype(np.float64)

    def distances(self, fp: np.ndarray) -> np.ndarray:
        diff = self.fps - np.asarray(fp, dtype=np.float64)
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))

    def nearest(self, reactants, product) -> np.ndarray:
        """Train positions by ascending distance, ties by position."""
        d = self.distances(reaction_fingerprint_smiles(reactants, product))
        return np.lexsort((np.arange(len(d)), d))


def rxnfp_baseline(train: FingerprintIndex | Sequence[ReactionRecord], query: ReactionRecord, n: int) -> list[ConditionSet]:
    """Condition sets of the nearest training reactions, deduplicated in distance order."""
    index = train if isinstance(train, FingerprintIndex) else FingerprintIndex(train)
    out: list[ConditionSet] = []
    for i in index.nearest(query.reactants, query.product):
        cond = index.records[i].label
        if cond not in out:
            out.append(cond)
            if len(out) == n:
                break
    return out


def rxnfp_oracle(train: Sequence[ReactionRecord], query: ReactionRecord, n: int) -> list[ConditionSet]:
    """Brute-force reference for :func:`rxnfp_baseline` using a direct scan."""
    if not train:
        raise EmptyTrainSet("fingerprint baseline needs training reactions")
    q = reaction_fingerprint_smiles(query.reactants, query.product)
    scored = sorted(
        ((fp_distance(q, reaction_fingerprint_smiles(r.reactants, r.product)), i) for i, r in enumerate(train)),
    )
    out: list[ConditionSet] = []
    for _, i in scored:
        if train[i].label not in out:
            out.append(train[i].label)
        if len(out) == n:
            break
    return out


# ---------------------------------------------------------------- neighbour distances


@dataclass
class NeighborDistances:
    per_record: dict[str, dict]
    skipped_neighbors: int

    def binned(self, n_bins: int = 10) -> list[dict]:
        """Mean inter-neighbour distance grouped into equal-width bins of input-neighbour distance."""
        rows = [v for v in self.per_record.values() if v["avg_inter_neighbor_dist"] is not None]
        if not rows:
            return []
        x = np.array([v["avg_input_neighbor_dist"] for v in rows])
        y = np.array([v["avg_inter_neighbor_dist"] for v in rows])
        edges = np.linspace(x.min(), x.max() if x.max() > x.min() else x.min() + 1, n_bins + 1)
        which = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, n_bins - 1)
        out = []
        for b in range(n_bins):
            sel = which == b
            if sel.any():
                out.append({"lo": float(edges[b]), "hi": float(edges[b + 1]), "count": int(sel.sum()), "mean_inter": float(y[sel].mean())})
        return out


def neighbor_distance_stats(
    records: Sequence[ReactionRecord], neighbors: Mapping[str, Sequence[str]], sources: Mapping[str, tuple]
) -> NeighborDistances:
    """Per record: mean distance from the input reaction to each mappable neighbour's
    reaction, and mean pairwise distance between those neighbours (None for fewer than two)."""
    cache: dict[str, np.ndarray] = {}

    def fp_of(pid):
        if pid not in cache:
            reactants, product = sources[pid]
            cache[pid] = reaction_fingerprint_smiles(reactants, product)
        return cache[pid]

    per, skipped = {}, 0
    for r in records:
        mapped = [pid for pid in neighbors.get(r.id, []) if pid in sources]
        skipped += len(neighbors.get(r.id, [])) - len(mapped)
        if not mapped:
            continue
        q = reaction_fingerprint_smiles(r.reactants, r.product)
        fps = [fp_of(pid) for pid in mapped]
        d_in = float(np.mean([fp_distance(q, f) for f in fps]))
        pairs = [fp_distance(fps[i], fps[j]) for i in range(len(fps)) for j in range(i + 1, len(fps))]
        per[r.id] = {"avg_input_neighbor_dist": d_in, "avg_inter_neighbor_dist": float(np.mean(pairs)) if pairs else None}
    if not per:
        raise NoMappableNeighbors("no retrieved paragraph maps to a known reaction")
    return NeighborDistances(per, skipped)


def is_monotone(report: MetricsReport) -> bool:
    vals = [report.values[k] for k in report.ks]
    return all(a <= b + 1e-12 for a, b in zip(vals, vals[1:])) and all(0 <= v <= 1 for v in vals)


def mean_or_nan(xs) -> float:
    xs = list(xs)
    return float(np.mean(xs)) if xs else math.nan
