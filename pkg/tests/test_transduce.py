import io
import json
from dataclasses import replace

import numpy as np
import pytest

from cezsl.cvae import CvaeConfig, CvaeModel, train_cvae
from cezsl.datamodel import SynthSpec, generate_synthetic
from cezsl.embednet import (PARAM_NAMES, EmbedModel, LossWeights, TrainConfig, UnseenPool,
                            _class_targets, train_inductive)
from cezsl.transduce import (PseudoState, init_pseudo_labels, kmeans, matched_accuracy,
                             prune_pseudo_labels, train_transductive)


def blobs(rng, centers, per=40, spread=0.1):
    x = np.vstack([c + spread * rng.standard_normal((per, len(c))) for c in centers])
    return x, np.repeat(np.arange(len(centers)), per)


def test_kmeans_on_distinct_points(rng):
    x = rng.normal(size=(4, 3))
    res = kmeans(x, 4, seed=0)
    assert res.inertia == 0.0
    np.testing.assert_allclose(np.sort(res.centers, axis=0), np.sort(x, axis=0))


def test_kmeans_inertia_never_increases(rng):
    x, _ = blobs(rng, [[0, 0], [1, 1], [0, 1], [1, 0]], spread=0.4)
    res = kmeans(x, 4, seed=3, max_iter=50)
    assert all(b <= a + 1e-9 for a, b in zip(res.inertia_history, res.inertia_history[1:]))
    assert res.n_iter <= 50 and res.inertia >= 0
    assert set(res.assignments) <= set(range(4))


def test_kmeans_max_iter_bound(rng):
    x, _ = blobs(rng, [[0, 0], [0.3, 0.3]], spread=1.0)
    assert kmeans(x, 2, seed=0, max_iter=1).n_iter <= 1


def test_kmeans_two_blobs_pure(rng):
    x, truth = blobs(rng, [[0, 0], [20, 20]])
    assert matched_accuracy(kmeans(x, 2, seed=1).assignments, truth) == 1.0


def test_kmeans_errors(rng):
    with pytest.raises(ValueError):
        kmeans(rng.normal(size=(2, 2)), 3)
    with pytest.raises(ValueError):
        kmeans(rng.normal(size=(2, 2)), 0)


def test_kmeans_handles_duplicates():
    x = np.zeros((5, 2))
    res = kmeans(x, 3, seed=0)
    assert res.inertia == 0.0 and len(res.assignments) == 5


def test_matched_accuracy_ignores_names():
    assert matched_accuracy([2, 2, 0, 0, 1], [0, 0, 1, 1, 2]) == 1.0
    assert matched_accuracy([0, 0, 0, 0], [0, 0, 1, 1]) == 0.5


@pytest.fixture(scope="module")
def trained_cvae(synth_ds):
    m = CvaeModel.init(synth_ds.d, synth_ds.k, seed=0)
    return train_cvae(m, synth_ds, CvaeConfig(seed=0))[0]


def test_init_pseudo_labels_purity(synth_ds, trained_cvae):
    state = init_pseudo_labels(synth_ds, trained_cvae, seed=0)
    assert state.revision == 0
    assert state.labels.min() >= synth_ds.s and state.labels.max() < synth_ds.s + synth_ds.u
    truth = synth_ds.labels[synth_ds.unseen_test]
    assert matched_accuracy(state.labels, truth) >= 0.95
    again = init_pseudo_labels(synth_ds, trained_cvae, seed=0)
    np.testing.assert_array_equal(state.labels, again.labels)
    np.testing.assert_array_equal(state.semantics, again.semantics)


def test_single_unseen_class_gets_one_label():
    ds = generate_synthetic(SynthSpec(seen=3, unseen=1, visual_dim=6, prototype_dim=3,
                                      samples_per_class=10, seed=0))
    cvae = CvaeModel.init(ds.d, ds.k, hidden=8)
    assert set(init_pseudo_labels(ds, cvae).labels) == {ds.s}


def test_pseudo_state_invariants():
    with pytest.raises(AssertionError):
        PseudoState(np.array([1, 3]), np.zeros((2, 2)), n_seen=3, n_unseen=2)
    with pytest.raises(AssertionError):
        PseudoState(np.array([3, 4]), np.zeros((3, 2)), n_seen=3, n_unseen=2)


def test_prune_ties_go_to_lowest_slot(small_ds):
    m = EmbedModel.init(small_ds.d, small_ds.k, small_ds.s + small_ds.u, 8, 6)
    m.params["W_c"][:] = 0.0
    state = PseudoState(np.full(len(small_ds.unseen_test), small_ds.s + 1),
                        np.zeros((len(small_ds.unseen_test), small_ds.k)), small_ds.s, small_ds.u)
    new = prune_pseudo_labels(m, small_ds, state)
    assert (new.labels == small_ds.s).all() and new.revision == 1


def test_prune_idempotent_and_unseen_only(small_ds, rng):
    m = EmbedModel.init(small_ds.d, small_ds.k, small_ds.s + small_ds.u, 8, 6, seed=2)
    # make the seen slots dominant: pruning must still pick an unseen slot
    m.params["b_c"][0, :small_ds.s] = 1e6
    n = len(small_ds.unseen_test)
    state = PseudoState(np.full(n, small_ds.s), rng.normal(size=(n, small_ds.k)),
                        small_ds.s, small_ds.u)
    first = prune_pseudo_labels(m, small_ds, state)
    second = prune_pseudo_labels(m, small_ds, first)
    np.testing.assert_array_equal(first.labels, second.labels)
    assert (first.labels >= small_ds.s).all()
    with pytest.raises(ValueError):
        prune_pseudo_labels(EmbedModel.init(small_ds.d, small_ds.k, small_ds.s, 8, 6),
                            small_ds, state)


def fast_cfg(**kw):
    return TrainConfig(**{"epochs": 3, "latent_dim": 16, "semantic_hidden": 12,
                          "mode": "transductive", **kw})


@pytest.fixture(scope="module")
def small_cvae(small_ds):
    return train_cvae(CvaeModel.init(small_ds.d, small_ds.k, hidden=16, seed=0), small_ds,
                      CvaeConfig(epochs=5, hidden=16))[0]


def test_zero_epochs(small_ds, small_cvae):
    m = EmbedModel.init(small_ds.d, small_ds.k, small_ds.s + small_ds.u, 16, 12)
    state = init_pseudo_labels(small_ds, small_cvae)
    out, final, history = train_transductive(m, small_ds, small_cvae, fast_cfg(epochs=0), state)
    assert history == [] and final is state
    for k in PARAM_NAMES:
        np.testing.assert_array_equal(out.params[k], m.params[k])


def test_reproducible_history_and_log(small_ds, small_cvae):
    labels_before = small_ds.labels.copy()
    runs = []
    for _ in range(2):
        log = io.StringIO()
        m = EmbedModel.init(small_ds.d, small_ds.k, small_ds.s + small_ds.u, 16, 12, seed=1)
        _, state, history = train_transductive(m, small_ds, small_cvae,
                                               fast_cfg(seed=1, relabel_gate=0.0), log_file=log)
        runs.append((state, history, log.getvalue()))
    assert runs[0][1] == runs[1][1] and runs[0][2] == runs[1][2]
    records = [json.loads(line) for line in runs[0][2].splitlines()]
    assert [r["epoch"] for r in records] == [1, 2, 3]
    assert {"churn", "agreement", "ce", "le", "sa", "clfr", "reg"} <= set(records[0])
    # with the gate open every epoch relabels
    assert runs[0][0].revision == 3
    np.testing.assert_array_equal(small_ds.labels, labels_before)


def test_gate_blocks_disagreeing_classifier(small_ds, small_cvae):
    m = EmbedModel.init(small_ds.d, small_ds.k, small_ds.s + small_ds.u, 16, 12)
    state = init_pseudo_labels(small_ds, small_cvae)
    _, final, history = train_transductive(m, small_ds, small_cvae,
                                           fast_cfg(epochs=4, relabel_gate=1.0), state)
    opened = [r for r in history if r["agreement"] >= 1.0]
    assert final.revision == len(opened)
    assert all(r["churn"] == 0 for r in history)
    if not opened:
        np.testing.assert_array_equal(final.labels, state.labels)


def test_wrong_mode_or_width(small_ds, small_cvae):
    m = EmbedModel.init(small_ds.d, small_ds.k, small_ds.s + small_ds.u, 16, 12)
    with pytest.raises(ValueError):
        train_transductive(m, small_ds, small_cvae, fast_cfg(mode="inductive"))
    narrow = EmbedModel.init(small_ds.d, small_ds.k, small_ds.s, 16, 12)
    with pytest.raises(ValueError):
        train_transductive(narrow, small_ds, small_cvae, fast_cfg())


def test_empty_pseudo_class_skipped():
    x = np.arange(12.0).reshape(6, 2)
    slots = np.array([0, 0, 1, 1, 1, 0])
    pool = UnseenPool(np.ones((3, 2)), np.zeros((3, 4)), np.array([2, 2, 2]))
    means, sems = _class_targets(x, slots, np.zeros((2, 4)), pool)
    assert len(means) == len(sems) == 3


def test_empty_pool_reduces_to_inductive(small_ds, small_cvae):
    keep = np.concatenate([small_ds.seen_train, small_ds.seen_heldout])
    index = np.full(small_ds.n, -1)
    index[keep] = np.arange(len(keep))
    seen_only = replace(small_ds, visual=small_ds.visual[keep], labels=small_ds.labels[keep],
                        seen_train=index[small_ds.seen_train],
                        seen_heldout=index[small_ds.seen_heldout],
                        unseen_test=np.zeros(0, dtype=np.int64))
    # the classifier term differs by construction (wider softmax), so it is switched off
    weights = LossWeights(alpha4=0.0)
    state = PseudoState(np.zeros(0, dtype=np.int64), np.zeros((0, small_ds.k)),
                        small_ds.s, small_ds.u)
    ind = EmbedModel.init(small_ds.d, small_ds.k, small_ds.s, 16, 12, seed=4)
    tra = EmbedModel.init(small_ds.d, small_ds.k, small_ds.s + small_ds.u, 16, 12, seed=4)
    ind, h_ind = train_inductive(ind, seen_only, fast_cfg(mode="inductive", seed=4,
                                                           loss_weights=weights))
    tra, _, h_tra = train_transductive(tra, seen_only, small_cvae,
                                       fast_cfg(seed=4, loss_weights=weights), state)
    for a, b in zip(h_ind, h_tra):
        for term in ("ce", "le", "sa"):
            assert a[term] == pytest.approx(b[term], rel=1e-12, abs=1e-12)
    for name in ("W_v", "b_v", "b_dec", "W_s1", "b_s1", "W_s2", "b_s2"):
        np.testing.assert_allclose(ind.params[name], tra.params[name], rtol=1e-12, atol=1e-12)
