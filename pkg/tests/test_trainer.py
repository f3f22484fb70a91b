import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from strokeclot import metrics
from strokeclot.trainer import (
    Action, AdamState, NonFiniteGradient, ScheduleState, ShapeMismatch, TrainConfig,
    adam_step, head_backward, head_forward, head_loss, init_head, load_embeddings, load_head,
    predict_proba, save_head, schedule_step, train_fold, train_head, write_embeddings, write_history,
)
from oracles import adam_scalar, central_difference, head_logits_loops
from synthetic import toy_embedding_set


def zero_head(dim):
    p = init_head(dim, 0, dropout_rate=0.0)
    return p.with_arrays({n: np.zeros_like(a) for n, a in p.arrays().items()})


def test_zero_weights_give_uniform_probabilities():
    logits, _ = head_forward(np.arange(5.0), zero_head(5))
    assert np.array_equal(logits, [0.0, 0.0])
    assert np.allclose(metrics.softmax(logits), 0.5)


def test_forward_matches_loop_oracle():
    rng = np.random.default_rng(2)
    p = init_head(6, rng)
    x = rng.normal(size=6)
    logits, _ = head_forward(x, p)
    np.testing.assert_allclose(logits, head_logits_loops(x, p.arrays()), rtol=1e-12, atol=1e-12)


def test_batch_equals_rowwise():
    rng = np.random.default_rng(3)
    p = init_head(4, rng)
    x = rng.normal(size=(7, 4))
    batch, _ = head_forward(x, p)
    for i in range(7):
        np.testing.assert_allclose(batch[i], head_forward(x[i], p)[0], rtol=1e-13)


def test_dropout_zero_training_equals_eval():
    rng = np.random.default_rng(4)
    p = init_head(8, rng, dropout_rate=0.0)
    x = rng.normal(size=(5, 8))
    np.testing.assert_array_equal(head_forward(x, p, train=True, rng=rng)[0], head_forward(x, p)[0])


def test_eval_mode_is_deterministic_and_training_is_stochastic():
    rng = np.random.default_rng(5)
    p = init_head(8, rng, dropout_rate=0.5)
    x = rng.normal(size=(3, 8))
    assert np.array_equal(head_forward(x, p)[0], head_forward(x, p)[0])
    a = head_forward(x, p, train=True, rng=np.random.default_rng(1))[0]
    b = head_forward(x, p, train=True, rng=np.random.default_rng(2))[0]
    assert not np.array_equal(a, b)
    with pytest.raises(ValueError):
        head_forward(x, p, train=True)


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        head_forward(np.zeros(3), init_head(4, 0))


def test_loss_is_stationary_when_softmax_equals_targets():
    p = zero_head(3)
    logits, cache = head_forward(np.ones((2, 3)), p)
    grads = head_backward(cache, np.full((2, 2), 0.5))
    assert all(np.all(g == 0) for g in grads.values())


def _check_gradients(seed, relu=False, dropout=0.0, per_array=48):
    rng = np.random.default_rng(seed)
    dim = int(rng.integers(1, 17))
    n = int(rng.integers(1, 6))
    p = init_head(dim, rng, dropout_rate=dropout, relu=relu)
    x = rng.normal(size=(n, dim))
    y = rng.integers(0, 2, size=n)
    t = metrics.smooth_labels(y, 0.01)
    w = rng.uniform(0.1, 1.0, size=n)
    mask_rng_seed = int(rng.integers(2**31))

    def loss():
        logits, _ = head_forward(x, p, train=dropout > 0, rng=np.random.default_rng(mask_rng_seed))
        return head_loss(logits, t, w)

    _, cache = head_forward(x, p, train=dropout > 0, rng=np.random.default_rng(mask_rng_seed))
    grads = head_backward(cache, t, w)
    return max(fd_relative_error(loss, p, grads, rng, per_array))


def fd_relative_error(loss, params, grads, rng, per_array):
    """Per-array max |numeric - analytic| / max magnitude over sampled entries."""
    out = []
    for name, arr in params.arrays().items():
        flat = rng.choice(arr.size, size=min(per_array, arr.size), replace=False)
        idx = [np.unravel_index(i, arr.shape) for i in flat]
        num = central_difference(loss, arr, 1e-5, idx)
        ana = np.array([grads[name][i] for i in idx])
        got = np.array([num[i] for i in idx])
        denom = max(np.abs(got).max(), np.abs(ana).max(), 1e-8)
        out.append(np.abs(got - ana).max() / denom)
    return out


def test_gradients_match_finite_differences():
    assert max(_check_gradients(s) for s in range(100)) < 1e-5


def test_gradients_with_relu_and_dropout():
    assert max(_check_gradients(100 + s, relu=True, dropout=0.3) for s in range(30)) < 1e-5


def test_duplicate_sample_doubles_gradient():
    rng = np.random.default_rng(8)
    p = init_head(5, rng, dropout_rate=0.0)
    x = rng.normal(size=(1, 5))
    t = np.array([[0.995, 0.005]])
    g1 = head_backward(head_forward(x, p)[1], t)
    g2 = head_backward(head_forward(np.vstack([x, x]), p)[1], np.vstack([t, t]))
    for n in g1:
        np.testing.assert_allclose(g2[n], 2 * g1[n], rtol=1e-12, atol=1e-15)


def _scalar_params(theta):
    p = init_head(1, 0, dropout_rate=0.0)
    arrays = {n: np.zeros_like(a) for n, a in p.arrays().items()}
    arrays["W1"][0, 0] = theta
    return p.with_arrays(arrays)


def _scalar_grads(p, g):
    grads = {n: np.zeros_like(a) for n, a in p.arrays().items()}
    grads["W1"][0, 0] = g
    return grads


def test_adam_single_step_frozen_value():
    p = _scalar_params(1.0)
    state = AdamState.zeros_like(p, weight_decay=0.0)
    p2, state2 = adam_step(p, _scalar_grads(p, 0.5), state, 1e-3)
    # mpmath, 40 digits
    assert abs(p2.W1[0, 0] - 0.9990000000199999996) < 1e-15
    assert state2.t == 1 and state.t == 0
    assert p.W1[0, 0] == 1.0  # input untouched


def test_adam_with_decay_two_steps_frozen_values():
    p = _scalar_params(1.0)
    state = AdamState.zeros_like(p, weight_decay=0.01)
    p, state = adam_step(p, _scalar_grads(p, 0.5), state, 1e-3)
    assert abs(p.W1[0, 0] - 0.99900000001960784275) < 1e-15
    p, state = adam_step(p, _scalar_grads(p, -0.25), state, 1e-3)
    assert abs(p.W1[0, 0] - 0.99871077022548484813) < 1e-15


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.lists(st.floats(-5, 5), min_size=1, max_size=8),
       st.sampled_from([0.0, 1e-6, 0.1]))
def test_adam_matches_scalar_oracle(theta, grads, wd):
    p = _scalar_params(theta)
    state = AdamState.zeros_like(p, weight_decay=wd)
    expected = adam_scalar(theta, grads, 1e-3, wd)
    for g, e in zip(grads, expected):
        p, state = adam_step(p, _scalar_grads(p, g), state, 1e-3)
        assert math.isclose(p.W1[0, 0], e, rel_tol=1e-12, abs_tol=1e-15)


def test_adam_rejects_non_finite():
    p = _scalar_params(1.0)
    with pytest.raises(NonFiniteGradient):
        adam_step(p, _scalar_grads(p, float("nan")), AdamState.zeros_like(p), 1e-3)


def run_schedule(losses, **kw):
    state = ScheduleState.fresh(**kw)
    decisions, lrs = [], []
    for loss in losses:
        state, d = schedule_step(state, loss)
        decisions.append(str(d))
        lrs.append(state.lr)
        if d.action is Action.STOP:
            break
    return decisions, lrs, state


# hand-simulated with max 1e-4, min 1e-5, factor 0.1, patience 1, stop after 6, cap 30
SCHEDULE_TRACES = {
    "improving": ([1.0, 0.9, 0.8], ["Checkpoint"] * 3, [1e-4] * 3),
    "six_bad_epochs": (
        [1.0] + [1.1] * 6,
        ["Checkpoint", "Continue", "ReduceLr(1e-05)", "Continue", "Continue", "Continue", "Stop"],
        [1e-4, 1e-4, 1e-5, 1e-5, 1e-5, 1e-5, 1e-5],
    ),
    "epoch_cap": ([1.0 - 0.01 * i for i in range(30)], ["Checkpoint"] * 29 + ["Stop"], [1e-4] * 30),
    "mixed": (
        [1.0, 1.2, 0.9, 1.0, 1.0, 0.8],
        ["Checkpoint", "Continue", "Checkpoint", "Continue", "ReduceLr(1e-05)", "Checkpoint"],
        [1e-4, 1e-4, 1e-4, 1e-4, 1e-5, 1e-5],
    ),
    "ties_are_not_improvements": (
        [0.5] * 7,
        ["Checkpoint", "Continue", "ReduceLr(1e-05)", "Continue", "Continue", "Continue", "Stop"],
        [1e-4, 1e-4, 1e-5, 1e-5, 1e-5, 1e-5, 1e-5],
    ),
    "recover_then_stop": (
        [1.0, 1.0, 1.0, 0.9] + [1.0] * 6,
        ["Checkpoint", "Continue", "ReduceLr(1e-05)", "Checkpoint"] + ["Continue"] * 5 + ["Stop"],
        [1e-4, 1e-4, 1e-5] + [1e-5] * 7,
    ),
}


@pytest.mark.parametrize("name", sorted(SCHEDULE_TRACES))
def test_schedule_traces(name):
    losses, want_decisions, want_lrs = SCHEDULE_TRACES[name]
    decisions, lrs, _ = run_schedule(losses)
    assert decisions == want_decisions
    assert lrs == pytest.approx(want_lrs, rel=1e-12)


def test_schedule_epoch_cap_best_epoch():
    _, _, state = run_schedule(SCHEDULE_TRACES["epoch_cap"][0])
    assert state.epoch == 30 and state.best_epoch == 30


def test_schedule_lr_never_below_floor():
    _, lrs, _ = run_schedule([1.0] + [2.0] * 40, stop_patience=100, max_epochs=50)
    assert min(lrs) == pytest.approx(1e-5) and max(lrs) == pytest.approx(1e-4)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 5.0), min_size=1, max_size=40))
def test_schedule_invariants(losses):
    decisions, lrs, state = run_schedule(losses)
    assert len(decisions) <= 30
    assert all(1e-5 - 1e-18 <= lr <= 1e-4 + 1e-18 for lr in lrs)
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert decisions.count("Stop") <= 1
    assert state.best_loss == min(losses[: len(decisions)])


def test_schedule_rejects_nan():
    with pytest.raises(ValueError):
        schedule_step(ScheduleState.fresh(), float("nan"))


def test_toy_training_reaches_low_loss():
    ids, x, labels, folds = toy_embedding_set(seed=0)
    results = train_head(ids, x, labels, folds, TrainConfig(seed=0))
    assert len(results) == 5
    for r in results:
        assert r.best_val_loss < 0.1
        assert len(r.history) <= 30
        assert r.history[-1].decision == "Stop"


def test_toy_training_is_deterministic():
    ids, x, labels, folds = toy_embedding_set(seed=1)
    a = train_head(ids, x, labels, folds, TrainConfig(seed=3, max_epochs=5))
    b = train_head(ids, x, labels, folds, TrainConfig(seed=3, max_epochs=5))
    for ra, rb in zip(a, b):
        assert ra.history == rb.history
        for n in ra.params.arrays():
            assert np.array_equal(ra.params.arrays()[n], rb.params.arrays()[n])


def test_permuted_labels_do_not_learn():
    ids, x, labels, folds = toy_embedding_set(seed=0, permute=True)
    results = train_head(ids, x, labels, folds, TrainConfig(seed=0))
    losses = [r.best_val_loss for r in results]
    assert np.mean(losses) > 0.6


def test_pseudo_labels_join_training_only():
    ids, x, labels, folds = toy_embedding_set(seed=2)
    extra_ids = [f"u{i}" for i in range(10)]
    x_all = np.vstack([x, np.ones((10, x.shape[1]))])
    results = train_head(ids + extra_ids, x_all, labels, folds, TrainConfig(seed=0, max_epochs=2),
                         extra_train={s: 1 for s in extra_ids})
    assert len(results) == folds.k
    with pytest.raises(KeyError):
        train_head(ids, x, labels, folds, TrainConfig(max_epochs=1), extra_train={"ghost": 0})


def test_predict_proba_on_simplex():
    ids, x, labels, folds = toy_embedding_set(seed=3)
    heads = [init_head(x.shape[1], s) for s in range(3)]
    p = predict_proba(heads, x)
    assert p.shape == (len(ids), 2)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_train_fold_returns_best_epoch_weights():
    ids, x, labels, folds = toy_embedding_set(seed=4)
    tr, va = folds.train_patients(0), folds.patients_in(0)
    row = {s: i for i, s in enumerate(ids)}
    xv = x[[row[s] for s in va]]
    yv = [labels[s] for s in va]
    r = train_fold(x[[row[s] for s in tr]], [labels[s] for s in tr], xv, yv, TrainConfig(seed=1), 0)
    val = metrics.wmcll(yv, predict_proba(r.params, xv))
    assert val == pytest.approx(r.best_val_loss, rel=1e-12)
    assert r.best_val_loss == min(h.val_loss for h in r.history)


def test_head_weights_round_trip(tmp_path):
    p = init_head(7, 9, dropout_rate=0.25, relu=True)
    save_head(p, tmp_path / "h.head")
    q = load_head(tmp_path / "h.head")
    assert q.dropout_rate == 0.25 and q.relu
    for n in p.arrays():
        assert np.array_equal(p.arrays()[n], q.arrays()[n])
    (tmp_path / "bad.head").write_bytes(b"nothing here")
    with pytest.raises(ValueError):
        load_head(tmp_path / "bad.head")


def test_embeddings_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    m = rng.normal(size=(4, 3))
    write_embeddings(["a", "b", "c", "d"], m, tmp_path / "e.csv")
    ids, back = load_embeddings(tmp_path / "e.csv")
    assert ids == ["a", "b", "c", "d"] and np.array_equal(back, m)
    np.savez(tmp_path / "e.npz", subject_id=np.array(ids), embedding=m)
    ids2, back2 = load_embeddings(tmp_path / "e.npz")
    assert ids2 == ids and np.array_equal(back2, m)


def test_history_csv(tmp_path):
    ids, x, labels, folds = toy_embedding_set(seed=5)
    r = train_head(ids, x, labels, folds, TrainConfig(seed=0, max_epochs=3))[0]
    write_history(r.history, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,lr,decision"
    assert len(lines) == 1 + len(r.history)
