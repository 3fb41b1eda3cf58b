import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmlego import tensor as T
from mmlego.errors import ConfigError, InvalidBin, NoComparablePairs, SingleClass
from mmlego.training import (Adam, EarlyStopping, ReduceLROnPlateau, TaskSpec, assign_bins,
                             auc, concordance_index, cross_entropy_loss, hazards_and_survival,
                             macro_auc, nll_survival_loss, survival_bin_edges)


# -- brute-force oracles ----------------------------------------------------------------

def brute_cindex(risk, times, cens):
    num = den = 0.0
    for i, j in itertools.permutations(range(len(risk)), 2):
        if times[i] < times[j] and cens[i] == 0:
            den += 1
            if risk[i] > risk[j]:
                num += 1
            elif risk[i] == risk[j]:
                num += 0.5
    return num / den


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def test_metric_oracles_over_random_instances():
    rng = np.random.default_rng(0)
    checked = 0
    for trial in range(200):
        n = int(rng.integers(2, 13))
        # coarse values force ties in scores and in times
        risk = rng.integers(0, 4, size=n).astype(float)
        times = rng.integers(1, 6, size=n).astype(float)
        cens = rng.integers(0, 2, size=n)
        try:
            want = brute_cindex(risk, times, cens)
        except ZeroDivisionError:
            with pytest.raises(NoComparablePairs):
                concordance_index(risk, times, cens)
            continue
        assert concordance_index(risk, times, cens) == want
        labels = rng.integers(0, 2, size=n)
        if 0 < labels.sum() < n:
            assert auc(risk, labels) == pytest.approx(brute_auc(risk, labels), abs=1e-15)
        k = 3
        mc = rng.integers(0, k, size=n)
        scores = rng.integers(0, 3, size=(n, k)).astype(float)
        present = np.unique(mc)
        if present.size >= 2:
            want_macro = np.mean([brute_auc(scores[:, c], mc == c) for c in present])
            assert macro_auc(scores, mc) == pytest.approx(want_macro, abs=1e-15)
        checked += 1
    assert checked > 150


def test_cindex_trivial_cases():
    t = np.array([1.0, 2.0, 3.0, 4.0])
    assert concordance_index([4, 3, 2, 1], t, [0, 0, 0, 0]) == 1.0
    assert concordance_index([1, 1, 1, 1], t, [0, 0, 0, 0]) == 0.5


def test_auc_trivial_cases():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.5] * 4, [0, 1, 0, 1]) == 0.5
    with pytest.raises(SingleClass):
        auc([1.0, 2.0], [1, 1])


@given(st.lists(st.integers(-50, 50), min_size=4, max_size=12), st.integers(0, 1000))
@settings(max_examples=50, deadline=None)
def test_metrics_invariant_to_monotone_maps(scores, seed):
    rng = np.random.default_rng(seed)
    # a coarse grid keeps distinct scores distinct after exp
    s = np.array(scores) / 10.0
    labels = np.arange(len(s)) % 2
    times = rng.permutation(len(s)).astype(float) + 1
    cens = rng.integers(0, 2, size=len(s))
    cens[0] = 0
    for f in (np.exp, lambda v: 3.0 * v - 7.0):
        assert auc(f(s), labels) == auc(s, labels)
        try:
            base = concordance_index(s, times, cens)
        except NoComparablePairs:
            continue
        assert concordance_index(f(s), times, cens) == base


# -- survival ---------------------------------------------------------------------------

def test_zero_logits_survival_curve():
    h, s = hazards_and_survival(np.zeros(4))
    np.testing.assert_allclose(h, 0.5)
    np.testing.assert_allclose(s, [0.5, 0.25, 0.125, 0.0625], atol=1e-15)


def test_very_negative_logits_survive():
    h, s = hazards_and_survival(np.full(4, -50.0))
    assert h.max() < 1e-20 and s.min() > 1 - 1e-15


def test_survival_matches_scalar_product(rng):
    logits = rng.normal(size=(5, 4))
    _, s = hazards_and_survival(logits)
    for i in range(5):
        acc = 1.0
        for k in range(4):
            acc *= 1.0 - 1.0 / (1.0 + math.exp(-logits[i, k]))
            assert abs(s[i, k] - acc) < 1e-12


@pytest.mark.parametrize("censored", [0, 1])
def test_single_sample_nll_closed_form(censored):
    loss = nll_survival_loss(T.Tensor(np.zeros((1, 4))), [0], [censored])
    assert abs(float(loss.data) - math.log(2.0)) < 1e-9


def test_nll_matches_scalar_formula(rng):
    logits = rng.normal(size=(6, 4))
    bins = rng.integers(0, 4, size=6)
    cens = rng.integers(0, 2, size=6)
    h, s = hazards_and_survival(logits)
    total = 0.0
    for i in range(6):
        k = bins[i]
        prev = 1.0 if k == 0 else s[i, k - 1]
        total += -math.log(s[i, k]) if cens[i] else -(math.log(prev) + math.log(h[i, k]))
    got = float(nll_survival_loss(T.Tensor(logits), bins, cens).data)
    assert abs(got - total / 6) < 1e-9


def test_perfect_survival_prediction_has_near_zero_loss():
    logits = np.array([[-40.0, -40.0, 40.0, 0.0]])
    assert float(nll_survival_loss(T.Tensor(logits), [2], [0]).data) < 1e-15


def test_invalid_bin():
    with pytest.raises(InvalidBin):
        nll_survival_loss(T.Tensor(np.zeros((1, 4))), [4], [0])


def test_loss_gradients(rng):
    logits = T.Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    bins, cens = rng.integers(0, 4, size=5), rng.integers(0, 2, size=5)
    rep = T.gradcheck(lambda: nll_survival_loss(logits, bins, cens), [logits])
    assert max(rep.values()) < 1e-5
    labels = rng.integers(0, 4, size=5)
    rep = T.gradcheck(lambda: cross_entropy_loss(logits, labels), [logits])
    assert max(rep.values()) < 1e-5


def test_cross_entropy_examples(rng):
    assert abs(float(cross_entropy_loss(T.Tensor(np.zeros((1, 3))), [1]).data)
               - math.log(3)) < 1e-12
    assert float(cross_entropy_loss(T.Tensor(np.array([[50.0, 0.0]])), [0]).data) < 1e-20
    logits = rng.normal(size=(4, 3))
    y = rng.integers(0, 3, size=4)
    want = np.mean([-(logits[i, y[i]] - math.log(sum(math.exp(v) for v in logits[i])))
                    for i in range(4)])
    assert abs(float(cross_entropy_loss(T.Tensor(logits), y).data) - want) < 1e-12


def test_bin_edges_are_quartiles_of_events():
    times = np.arange(1.0, 13.0)
    cens = np.array([0] * 8 + [1] * 4)
    edges = survival_bin_edges(times, cens, 4)
    np.testing.assert_allclose(edges, np.quantile(times[:8], [0.25, 0.5, 0.75]))
    assert list(assign_bins([0.5, 2.75, 100.0], edges)) == [0, 1, 3]


def test_task_spec_validation():
    with pytest.raises(ConfigError):
        TaskSpec("survival", n_bins=1)
    with pytest.raises(ConfigError):
        TaskSpec("regression")
    assert TaskSpec("multiclass", n_classes=5).n_outputs == 5


# -- optimisation -----------------------------------------------------------------------

def test_adam_first_step_closed_form():
    w = T.Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam({"w": w}, lr=0.003)
    w.grad = np.array([1.0])
    opt.step()
    assert abs(w.data[0] - 0.997) < 1e-8


def test_adam_on_quadratic_bowl_decreases_monotonically():
    w = T.Tensor(np.array([1.5, -2.0, 0.7]), requires_grad=True)
    opt = Adam({"w": w}, lr=0.1)
    losses = []
    for _ in range(100):
        opt.zero_grad()
        loss = (w * w).sum()
        loss.backward()
        opt.step()
        losses.append(float(loss.data))
    assert all(b < a for a, b in zip(losses[:20], losses[1:21]))
    assert losses[-1] < losses[0] * 1e-2


def test_early_stopping_on_constant_loss_fires_at_epoch_8():
    stop = EarlyStopping(patience=7)
    fired = [e for e in range(1, 11) if stop.step(10.0, None, e)]
    assert fired[0] == 8


def test_plateau_halves_lr_after_three_bad_epochs():
    w = T.Tensor(np.zeros(1), requires_grad=True)
    opt = Adam({"w": w}, lr=0.004)
    sched = ReduceLROnPlateau(opt, factor=0.5, patience=3)
    lrs = []
    for v in [1.0, 1.0, 1.0, 1.0, 0.5, 0.6]:
        sched.step(v)
        lrs.append(opt.lr)
    assert lrs == [0.004, 0.004, 0.004, 0.002, 0.002, 0.002]
