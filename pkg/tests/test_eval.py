import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from textreact import eval as E
from textreact.chem import fp_distance, reaction_fingerprint_smiles
from textreact.data.records import Center, ConditionSet, Corpus, Dataset, Paragraph, ReactionRecord, RetroLabel
from textreact.data.splits import DatasetSplit, make_random_split
from textreact.data.synthetic import SyntheticParams, generate_synthetic


@pytest.fixture(scope="module")
def synth():
    corpus, ds = generate_synthetic(SyntheticParams(n_reactions=300, n_types=10, n_unlabeled=50), seed=3)
    return corpus, ds, make_random_split(ds.ids, seed=3)


def cond(*values):
    return ConditionSet(*values, *["[NONE]"] * (5 - len(values)))


def rcr_record(rid, label, reactants=("CC(=O)O", "NC"), product="CC(=O)NC", text_id=None, year=2012):
    return ReactionRecord(rid, tuple(reactants), product, label, text_id, year)


def rcr_preds(*conds):
    return [{"rank": i + 1, "conditions": dict(zip(("catalyst", "solvent1", "solvent2", "reagent1", "reagent2"), c.as_tuple()))} for i, c in enumerate(conds)]


# ---------------------------------------------------------------- scenarios


def test_gold_removed_drops_every_test_gold(synth):
    corpus, ds, split = synth
    out = E.build_scenario(corpus, ds, split, E.Scenario("gold_removed"))
    gold = {r.text_id for r in ds.select(split.test)}
    assert gold and not any(g in out for g in gold)
    assert len(out) == len(corpus) - len(gold)


def test_full_scenario_is_identity(synth):
    corpus, ds, split = synth
    assert E.build_scenario(corpus, ds, split, E.Scenario("full")) is corpus


def test_ts_corpus_cutoff():
    corpus = Corpus([Paragraph("a", "x", 2013), Paragraph("b", "y", 2015), Paragraph("c", "z", 2014)])
    ds = Dataset([], "rcr")
    out = E.build_scenario(corpus, ds, DatasetSplit([], [], []), E.Scenario("ts_corpus", 2014))
    assert out.ids == ["a", "c"]
    two = Corpus([Paragraph("a", "x", 2013), Paragraph("b", "y", 2015)])
    assert E.build_scenario(two, ds, DatasetSplit([], [], []), E.Scenario("ts_corpus", 2014)).ids == ["a"]


def test_empty_result_corpus():
    corpus = Corpus([Paragraph("a", "x", 2015)])
    with pytest.raises(E.EmptyResultCorpus):
        E.build_scenario(corpus, Dataset([], "rcr"), DatasetSplit([], [], []), E.Scenario("ts_corpus", 2014))
    ds = Dataset([rcr_record("r", cond("a"), text_id="a")], "rcr")
    with pytest.raises(E.EmptyResultCorpus):
        E.build_scenario(corpus, ds, DatasetSplit([], [], ["r"]), E.Scenario("gold_removed"))


def test_scenario_validation():
    with pytest.raises(ValueError):
        E.Scenario("nope")
    with pytest.raises(ValueError):
        E.Scenario("ts_corpus")


@pytest.mark.parametrize("scenario", [E.Scenario("full"), E.Scenario("gold_removed"), E.Scenario("ts_corpus", 2013)])
def test_scenarios_idempotent_and_subsets(synth, scenario):
    corpus, ds, split = synth
    once = E.build_scenario(corpus, ds, split, scenario)
    twice = E.build_scenario(once, ds, split, scenario)
    assert once.ids == twice.ids
    assert set(once.ids) <= set(corpus.ids)
    if scenario.kind == "ts_corpus":
        assert all(p.year <= 2013 for p in once)


# ---------------------------------------------------------------- accuracy


def test_rank_three_counts_for_top3_only():
    gold = cond("pd", "thf")
    r = rcr_record("r", gold)
    preds = {"r": rcr_preds(cond("cu"), cond("ni"), gold)}
    rep = E.topk_accuracy(preds, [r], "rcr", ks=(1, 3, 10))
    assert rep.values == {1: 0.0, 3: 1.0, 10: 1.0}


def test_duplicates_removed_before_ranking():
    gold = cond("pd", "thf")
    r = rcr_record("r", gold)
    preds = {"r": rcr_preds(cond("cu"), cond("cu"), cond("cu"), gold)}
    assert E.gold_ranks(preds, [r], "rcr") == {"r": 2}
    assert E.topk_accuracy(preds, [r], "rcr", ks=(1, 3)).values == {1: 0.0, 3: 1.0}


def test_four_records_arithmetic():
    gold = cond("pd")
    others = [cond(f"x{i}") for i in range(5)]
    records = [rcr_record(f"r{i}", gold) for i in range(4)]
    preds = {
        "r0": rcr_preds(gold, *others[:3]),
        "r1": rcr_preds(others[0], gold),
        "r2": rcr_preds(*others[:3], gold),
        "r3": rcr_preds(*others),
    }
    rep = E.topk_accuracy(preds, records, "rcr", ks=(1, 3, 10))
    assert rep.values == {1: 0.25, 3: 0.5, 10: 0.75}
    assert rep.counts == {"records": 4, "found": 3}


def test_rcr_needs_all_five_slots():
    gold = cond("pd", "thf", "[NONE]", "tea")
    r = rcr_record("r", gold)
    near = cond("pd", "thf", "[NONE]", "tea", "dipea")
    assert E.topk_accuracy({"r": rcr_preds(near)}, [r], "rcr", ks=(1,)).values[1] == 0.0


def test_retro_matches_sorted_reactants_and_template():
    label = RetroLabel(("NC", "CC(=O)O"), 0, Center("bond", 1, 3))
    r = ReactionRecord("r", ("NC", "CC(=O)O"), "CC(=O)NC", label, None, 2012)
    swapped = {"r": [{"rank": 1, "reactants": ["CC(=O)O", "NC"]}]}
    assert E.topk_accuracy(swapped, [r], "retro_tf", ks=(1,)).values[1] == 1.0
    tb = {"r": [{"rank": 1, "template_id": 0, "center": {"kind": "bond", "atom_a": 1, "atom_b": 3}}]}
    assert E.topk_accuracy(tb, [r], "retro_tb", ks=(1,)).values[1] == 1.0
    wrong = {"r": [{"rank": 1, "template_id": 0, "center": {"kind": "bond", "atom_a": 1, "atom_b": 2}}]}
    assert E.topk_accuracy(wrong, [r], "retro_tb", ks=(1,)).values[1] == 0.0


def test_task_mismatch():
    r = rcr_record("r", cond("pd"))
    with pytest.raises(E.TaskMismatch):
        E.topk_accuracy({"r": [{"rank": 1, "reactants": ["C"]}]}, [r], "retro_tf")
    with pytest.raises(E.TaskMismatch):
        E.topk_accuracy({"r": [{"rank": 1, "reactants": ["C"]}]}, [r], "rcr")


def test_missing_predictions_rejected():
    with pytest.raises(ValueError):
        E.topk_accuracy({}, [rcr_record("r", cond("pd"))], "rcr")


@given(st.lists(st.one_of(st.none(), st.integers(1, 20)), min_size=1, max_size=30))
def test_topk_monotone(ranks):
    gold = cond("gold")
    records, preds = [], {}
    for i, rank in enumerate(ranks):
        rid = f"r{i}"
        records.append(rcr_record(rid, gold))
        wrong = [cond(f"w{j}") for j in range(20)]
        if rank is not None:
            wrong.insert(rank - 1, gold)
        preds[rid] = rcr_preds(*wrong)
    rep = E.topk_accuracy(preds, records, "rcr", ks=(1, 3, 10, 15))
    assert E.is_monotone(rep)
    for k in rep.ks:
        expected = sum(1 for r in ranks if r is not None and r <= k) / len(ranks)
        assert rep.values[k] == pytest.approx(expected, abs=1e-12)


def test_metrics_json_schema(tmp_path):
    rep = E.topk_accuracy({"r": rcr_preds(cond("pd"))}, [rcr_record("r", cond("pd"))], "rcr", ks=(1, 3),
                          scenario=E.Scenario("gold_removed").describe(), config_hash=E.config_hash({"seed": 1}))
    rep.save(tmp_path / "metrics.json")
    got = json.loads((tmp_path / "metrics.json").read_text())
    assert set(got) == {"task", "scenario", "split", "ks", "accuracy", "counts", "config_hash"}
    assert got["ks"] == [1, 3] and got["accuracy"] == {"1": 1.0, "3": 1.0}
    assert got["scenario"] == {"kind": "gold_removed", "cutoff": None}
    assert len(got["config_hash"]) == 16
    rec = E.recall_report({1: 0.5, 3: 1.0}, 2, "rcr").to_dict()
    assert "recall" in rec and "accuracy" not in rec


def test_config_hash_stable_and_sensitive():
    assert E.config_hash({"a": 1, "b": 2}) == E.config_hash({"b": 2, "a": 1})
    assert E.config_hash({"a": 1}) != E.config_hash({"a": 2})


# ---------------------------------------------------------------- fingerprint baseline


def test_identical_query_ranks_first(synth):
    _, ds, split = synth
    train = ds.select(split.train)
    q = train[17]
    assert E.rxnfp_baseline(train, q, 3)[0] == q.label


def test_n_larger_than_distinct_sets():
    a, b = cond("pd"), cond("cu")
    train = [rcr_record("t1", a), rcr_record("t2", b), rcr_record("t3", a, reactants=("CC(=O)O", "NCC"), product="CC(=O)NCC")]
    out = E.rxnfp_baseline(train, train[0], 10)
    assert out == [a, b]


def test_empty_train_set():
    with pytest.raises(E.EmptyTrainSet):
        E.rxnfp_baseline([], rcr_record("q", cond("pd")), 3)


def _scan_oracle(train, query, n):
    q = reaction_fingerprint_smiles(query.reactants, query.product).astype(np.float64)
    dists = []
    for i, r in enumerate(train):
        f = reaction_fingerprint_smiles(r.reactants, r.product).astype(np.float64)
        dists.append((math.sqrt(float(((q - f) ** 2).sum())), i))
    out = []
    for _, i in sorted(dists):
        if train[i].label not in out:
            out.append(train[i].label)
        if len(out) == n:
            break
    return out


def test_baseline_matches_full_scan_on_100_queries(synth):
    _, ds, split = synth
    train = ds.select(split.train)
    index = E.FingerprintIndex(train)
    queries = ds.select(split.test + split.valid)[:100]
    assert len(queries) >= 60
    for q in queries:
        assert E.rxnfp_baseline(index, q, 5) == _scan_oracle(train, q, 5) == E.rxnfp_oracle(train, q, 5)


# ---------------------------------------------------------------- neighbour distances


def test_identical_neighbours_distance_zero():
    r = rcr_record("r", cond("pd"))
    sources = {"p1": (r.reactants, r.product), "p2": (r.reactants, r.product)}
    out = E.neighbor_distance_stats([r], {"r": ["p1", "p2"]}, sources)
    assert out.per_record["r"] == {"avg_input_neighbor_dist": 0.0, "avg_inter_neighbor_dist": 0.0}


def test_single_neighbour_has_no_inter_distance():
    r = rcr_record("r", cond("pd"))
    sources = {"p1": (("CC(=O)O", "OC"), "CC(=O)OC")}
    out = E.neighbor_distance_stats([r], {"r": ["p1"]}, sources)
    assert out.per_record["r"]["avg_inter_neighbor_dist"] is None
    assert out.per_record["r"]["avg_input_neighbor_dist"] > 0


def test_unmapped_neighbours_skipped_and_counted():
    r = rcr_record("r", cond("pd"))
    out = E.neighbor_distance_stats([r], {"r": ["p1", "ghost"]}, {"p1": (r.reactants, r.product)})
    assert out.skipped_neighbors == 1
    with pytest.raises(E.NoMappableNeighbors):
        E.neighbor_distance_stats([r], {"r": ["ghost"]}, {})


def test_neighbour_stats_match_loop_oracle(synth):
    corpus, ds, split = synth
    records = ds.select(split.test)[:20]
    rng = np.random.default_rng(0)
    ids = corpus.ids
    neighbors = {r.id: [ids[i] for i in rng.choice(len(ids), 3, replace=False)] for r in records}
    out = E.neighbor_distance_stats(records, neighbors, corpus.sources)

    def fp(reactants, product):
        return reaction_fingerprint_smiles(reactants, product).astype(np.float64)

    for r in records:
        q = fp(r.reactants, r.product)
        fps = [fp(*corpus.sources[pid]) for pid in neighbors[r.id]]
        d_in = sum(np.linalg.norm(q - f) for f in fps) / 3
        d_inter = sum(np.linalg.norm(fps[i] - fps[j]) for i in range(3) for j in range(i + 1, 3)) / 3
        got = out.per_record[r.id]
        assert got["avg_input_neighbor_dist"] == pytest.approx(d_in, rel=1e-12)
        assert got["avg_inter_neighbor_dist"] == pytest.approx(d_inter, rel=1e-12)
    bins = out.binned(4)
    assert sum(b["count"] for b in bins) == 20
    assert fp_distance(fps[0], fps[0]) == 0.0
