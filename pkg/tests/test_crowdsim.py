import numpy as np
import pytest

import phonetemp.nn as nn
from phonetemp.crowdsim import (
    CrowdGroup,
    LabeledByCrowd,
    build_group_set,
    answer_groups_for,
    answers_for_group,
    infer_labels_for_participant,
    label_key,
    label_quality,
)
from phonetemp.data import (
    PhoneDataset,
    Sample,
    SynthPhoneParams,
    fit_normalizer,
    synth_generate,
)
from phonetemp.estimator import EstimatorModel
from phonetemp.truthinf import AggregatorModel


def sample_with_label(label: float) -> Sample:
    return Sample(0.0, 3.9, label + 1.0, 0.0, 10.0, 5.0, 8.0, label + 1.0, label + 1.0, label)


def make_corpus(n_phones=4, labels=(18.0, 20.0, 22.0, 24.0), per_label=3):
    corpus = []
    for p in range(n_phones):
        samples = [sample_with_label(l) for l in labels for _ in range(per_label)]
        corpus.append(PhoneDataset(f"C{p + 1}", samples))
    return corpus


def test_label_key_quantizes_to_grid():
    assert label_key(20.0) == label_key(20.04999)
    assert label_key(20.0) != label_key(20.06)


def test_build_group_set_invariants():
    corpus = make_corpus()
    groups = build_group_set(corpus, 200, seed=3)
    assert len(groups) == 200
    for g in groups:
        assert 2 <= len(g) <= 4  # capped at available phones
        ids = [pid for pid, _ in g.members]
        assert len(set(ids)) == len(ids)
        for _, s in g.members:
            assert label_key(s.label) == label_key(g.common_label)


def test_build_group_set_deterministic():
    corpus = make_corpus()
    a = build_group_set(corpus, 50, seed=9)
    b = build_group_set(corpus, 50, seed=9)
    assert [(g.common_label, [pid for pid, _ in g.members]) for g in a] == [
        (g.common_label, [pid for pid, _ in g.members]) for g in b
    ]


def test_build_group_set_single_shared_label_forced():
    a = PhoneDataset("A", [sample_with_label(20.0)] * 3 + [sample_with_label(25.0)] * 2)
    b = PhoneDataset("B", [sample_with_label(20.0)] * 3 + [sample_with_label(30.0)] * 2)
    groups = build_group_set([a, b], 30, seed=1)
    for g in groups:
        assert len(g) == 2
        assert label_key(g.common_label) == label_key(20.0)


def test_build_group_set_requires_two_contributors():
    with pytest.raises(ValueError):
        build_group_set(make_corpus(n_phones=1), 5, seed=0)


def test_build_group_set_retry_exhaustion():
    a = PhoneDataset("A", [sample_with_label(20.0)] * 3)
    b = PhoneDataset("B", [sample_with_label(25.0)] * 3)
    with pytest.raises(RuntimeError, match="common label"):
        build_group_set([a, b], 5, seed=0)


def test_crowd_group_contracts():
    s = sample_with_label(20.0)
    with pytest.raises(ValueError):
        CrowdGroup([("A", s)], 20.0)
    with pytest.raises(ValueError):
        CrowdGroup([("A", s), ("A", s)], 20.0)
    with pytest.raises(ValueError):
        CrowdGroup([("A", s), ("B", sample_with_label(30.0))], 20.0)


@pytest.fixture(scope="module")
def trained_registry():
    """Small trained estimators over a shared synthetic grid."""
    from phonetemp.estimator import TrainConfig, train
    from phonetemp.data import split

    corpus, trains, vals = [], [], []
    for i in range(3):
        params = SynthPhoneParams(150.0 + 60 * i, 1.0, 0.8, 0.3 * i - 0.3, 0.08 + 0.05 * i)
        ds = synth_generate(params, 24, 240.0, 5.0, (15.0, 26.5), seed=70 + i,
                            grid_step=0.5, phone_id=f"C{i + 1}")
        corpus.append(ds)
        tr, va = split(ds, 0.7, seed=80 + i)
        trains.append(tr)
        vals.append(va)
    norm = fit_normalizer(trains)
    registry = {
        ds.phone_id: train(tr, TrainConfig(seed=90 + i, max_epochs=350), norm=norm)
        for i, (ds, tr) in enumerate(zip(corpus, trains))
    }
    return corpus, trains, vals, registry, norm


def test_answers_for_group_shape(trained_registry):
    corpus, trains, _, registry, _ = trained_registry
    groups = build_group_set(trains, 40, seed=5)
    for g in groups[:10]:
        ag = answers_for_group(g, registry)
        assert len(ag) == len(g)
        assert ag.true_label == g.common_label
        assert ag.phone_ids == [pid for pid, _ in g.members]


def test_answers_for_group_missing_model(trained_registry):
    _, trains, _, registry, _ = trained_registry
    groups = build_group_set(trains, 5, seed=5)
    with pytest.raises(KeyError):
        answers_for_group(groups[0], {"nobody": None})


def test_answer_groups_for_matches_per_group(trained_registry):
    _, trains, _, registry, _ = trained_registry
    groups = build_group_set(trains, 30, seed=6)
    batched = answer_groups_for(groups, registry)
    for g, ag in zip(groups, batched):
        single = answers_for_group(g, registry)
        assert ag.phone_ids == single.phone_ids
        # batched matmuls may differ from per-sample ones in the last ulp
        for a, b in zip(ag.answers, single.answers):
            assert a.mu == pytest.approx(b.mu, abs=1e-9)
            assert a.sigma == pytest.approx(b.sigma, abs=1e-9)


def test_answer_quality_within_three_times_standalone(trained_registry):
    from phonetemp.estimator import evaluate_mae

    corpus, trains, vals, registry, _ = trained_registry
    standalone = np.mean([evaluate_mae(registry[ds.phone_id], va)
                          for ds, va in zip(corpus, vals)])
    groups = build_group_set(vals, 300, seed=7)
    answer_groups = answer_groups_for(groups, registry)
    errs = []
    for ag in answer_groups:
        errs.extend(abs(a.mu - ag.true_label) for a in ag.answers)
    assert np.mean(errs) <= 3 * standalone


def test_infer_labels_perfect_estimators(monkeypatch):
    import phonetemp.crowdsim as cs

    corpus = make_corpus()
    registry = {ds.phone_id: "stub" for ds in corpus}

    def fake_predict_batch(model, samples):
        mus = np.array([s.label for s in samples])
        return mus, np.full(len(samples), 0.2)

    def fake_fold(model, group):
        from phonetemp.estimator import Answer

        return Answer(float(np.mean([a.mu for a in group.answers])), 0.2)

    monkeypatch.setattr(cs, "predict_batch", fake_predict_batch)
    monkeypatch.setattr(cs, "cbts_fold", fake_fold)
    participant = PhoneDataset("P1", [sample_with_label(20.0), sample_with_label(22.0)])
    labeled, skipped = infer_labels_for_participant(
        participant, corpus, registry, AggregatorModel.__new__(AggregatorModel), seed=1
    )
    assert skipped == 0
    for lb in labeled:
        assert lb.inferred_label == lb.sample.label
        assert 2 <= lb.contributor_count <= 4


def test_infer_labels_skips_unmatchable(monkeypatch):
    import phonetemp.crowdsim as cs

    corpus = make_corpus(labels=(20.0,))
    registry = {ds.phone_id: "stub" for ds in corpus}
    monkeypatch.setattr(
        cs, "predict_batch",
        lambda model, samples: (np.array([s.label for s in samples]), np.full(len(samples), 0.2)),
    )
    monkeypatch.setattr(
        cs, "cbts_fold",
        lambda model, group: group.answers[0],
    )
    participant = PhoneDataset("P1", [sample_with_label(20.0), sample_with_label(29.0)])
    labeled, skipped = infer_labels_for_participant(
        participant, corpus, registry, AggregatorModel.__new__(AggregatorModel), seed=1
    )
    assert len(labeled) == 1 and skipped == 1


def test_labeled_by_crowd_contracts():
    s = sample_with_label(20.0)
    with pytest.raises(ValueError):
        LabeledByCrowd(s, 20.0, 0.2, contributor_count=1)
    with pytest.raises(ValueError):
        LabeledByCrowd(s, 20.0, 1e-5, contributor_count=2)


def test_label_quality_examples():
    s = sample_with_label(20.0)
    labeled = [LabeledByCrowd(s, 20.0, 0.2, 2), LabeledByCrowd(s, 21.0, 0.2, 2)]
    assert label_quality(labeled, [20.0, 21.0]) == 0.0
    assert label_quality(labeled, [19.5, 20.5]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        label_quality([], [])
