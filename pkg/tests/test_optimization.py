from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from floodtile.optimization import (
    DEFAULT_LR,
    Adam,
    EarlyStopper,
    NonFiniteGradientError,
    PlateauScheduler,
    adam_step,
    early_stop_observe,
    scheduler_observe,
)


def _params(value=0.0):
    return OrderedDict(w=np.array([value]))


class TestAdam:
    def test_defaults(self):
        opt = Adam(_params())
        assert (opt.lr, opt.beta1, opt.beta2, opt.eps) == (4.27e-5, 0.9, 0.999, 1e-8)

    def test_zero_gradient_identity(self):
        p = _params(1.5)
        opt = Adam(p)
        for _ in range(3):
            opt.step(p, {"w": np.zeros(1)})
        assert p["w"][0] == 1.5

    def test_first_step_moves_by_lr(self):
        p = _params()
        adam_step(p, {"w": np.ones(1)}, Adam(p, lr=0.1))
        # m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
        assert p["w"][0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-12)

    def test_momentum_accumulates(self):
        p1, p2 = _params(), _params()
        o1, o2 = Adam(p1, lr=0.1), Adam(p2, lr=0.1)
        o1.step(p1, {"w": np.array([1.0])})
        o2.step(p2, {"w": np.array([1.0])})
        o2.step(p2, {"w": np.array([-0.5])})
        assert p1["w"][0] != p2["w"][0]
        assert o2.step_count == 2

    def test_reference_two_steps(self):
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        g = [0.3, -1.2]
        m = v = 0.0
        x = 2.0
        for t, gt in enumerate(g, start=1):
            m = b1 * m + (1 - b1) * gt
            v = b2 * v + (1 - b2) * gt * gt
            x -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        p = _params(2.0)
        opt = Adam(p, lr=lr)
        for gt in g:
            opt.step(p, {"w": np.array([gt])})
        assert p["w"][0] == pytest.approx(x, rel=1e-14)

    def test_non_finite_names_parameter(self):
        p = OrderedDict(a=np.zeros(2), bad=np.zeros(2))
        with pytest.raises(NonFiniteGradientError, match="bad"):
            Adam(p).step(p, {"a": np.zeros(2), "bad": np.array([0.0, np.nan])})

    def test_shape_mismatch(self):
        p = _params()
        with pytest.raises(ValueError):
            Adam(p).step(p, {"w": np.zeros(2)})

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=5))
    def test_zero_gradient_after_history_follows_momentum(self, history):
        # with zero-initialized moments a zero gradient is a no-op; after real
        # steps the update is driven by the decayed first moment alone
        p = _params(0.25)
        opt = Adam(p, lr=0.01)
        for g in history:
            opt.step(p, {"w": np.array([g])})
        m = opt.m["w"][0] * 0.9
        v = opt.v["w"][0] * 0.999
        t = opt.step_count + 1
        expected = p["w"][0] - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        opt.step(p, {"w": np.zeros(1)})
        assert p["w"][0] == pytest.approx(expected, rel=1e-12, abs=1e-15)


class TestPlateauScheduler:
    def test_eleven_stale_epochs_reduce(self):
        s = PlateauScheduler(lr=DEFAULT_LR)
        s.observe(1.0)
        lrs = [scheduler_observe(s, 1.0) for _ in range(11)]
        assert all(lr == DEFAULT_LR for lr in lrs[:10])
        assert lrs[10] == pytest.approx(4.27e-6, rel=1e-12)
        assert s.stale_count == 0

    def test_improvement_resets(self):
        s = PlateauScheduler()
        s.observe(1.0)
        for _ in range(9):
            s.observe(1.0)
        s.observe(0.5)
        for _ in range(10):
            s.observe(0.5)
        assert s.lr == DEFAULT_LR

    def test_strictly_decreasing_never_changes(self):
        s = PlateauScheduler()
        for k in range(100):
            s.observe(1.0 / (k + 1))
        assert s.lr == DEFAULT_LR

    def test_floor(self):
        s = PlateauScheduler(lr=1e-7, patience=0)
        for _ in range(5):
            s.observe(1.0)
        assert s.lr == 1e-8

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=80))
    def test_lr_non_increasing_with_exact_jumps(self, losses):
        s = PlateauScheduler(lr=1.0, min_lr=0.0, patience=3)
        prev = s.lr
        for loss in losses:
            lr = s.observe(loss)
            assert lr == prev or lr == pytest.approx(prev * 0.1)
            prev = lr


class TestEarlyStopper:
    def test_constant_loss_stops_after_patience_beyond_first(self):
        es = EarlyStopper()
        epochs = 0
        while True:
            epochs += 1
            if es.observe(1.0, lambda: epochs):
                break
        assert epochs == 76
        assert es.best_epoch == 1 and es.best_state == 1

    def test_strict_improvement_never_stops(self):
        es = EarlyStopper(patience=3)
        for k in range(50):
            assert not es.observe(1.0 / (k + 1), lambda k=k: k)
        assert es.best_state == 49

    def test_late_improvement_resets(self):
        es = EarlyStopper()
        es.observe(1.0, lambda: 0)
        for _ in range(74):
            assert not es.observe(1.0, lambda: None)
        assert not es.observe(0.9, lambda: 75)
        assert es.counter == 0

    def test_snapshot_is_copy(self):
        p = _params(1.0)
        es = EarlyStopper()
        early_stop_observe(es, 0.5, p)
        p["w"][0] = 9.0
        assert es.best_state["w"][0] == 1.0

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.sampled_from([0.1, 0.2, 0.3, 0.4]), min_size=1, max_size=40))
    def test_best_is_earliest_minimum(self, losses):
        es = EarlyStopper(patience=1000)
        for i, loss in enumerate(losses):
            es.observe(loss, lambda i=i: i)
        assert es.best_state == losses.index(min(losses))
