"""Adam, the training loop, UAR and the bootstrap interval."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from tornet.data import SplitData, SynthSpec, generate_synth, load_split
from tornet.errors import ConfigError, DataError
from tornet.metrics import (
    EvalReport,
    bootstrap_ci,
    bootstrap_uars,
    confusion_matrix,
    evaluate_predictions,
    uar,
)
from tornet.network import build_model
from tornet.numerics import RngStreams
from tornet.train import (
    Adam,
    AdamState,
    TrainConfig,
    adam_step,
    class_weights,
    evaluate_uar,
    load_model,
    predict_logits,
    save_model,
    checkpoint_metadata,
    train,
)


class TestAdamStep:
    def _step(self, g, eps=1e-8, lr=1e-3, t=1, p=None):
        p = np.zeros_like(g) if p is None else p
        state = AdamState.zeros_like([p])
        adam_step([p], [g], state, t, lr, 0.9, 0.999, eps)
        return p, state

    def test_zero_gradient_no_change(self):
        p0 = np.array([1.5, -2.0])
        p, _ = self._step(np.zeros(2), p=p0.copy())
        assert_array_equal(p, p0)

    def test_first_step_closed_form(self):
        lr, eps = 1e-3, 1e-8
        p, _ = self._step(np.ones(4), eps, lr)
        assert_allclose(p, -lr / (1 + eps), rtol=1e-12)

    def test_odd_symmetry(self, rng):
        g = rng.standard_normal(6)
        a, _ = self._step(g)
        b, _ = self._step(-g)
        assert_array_equal(a, -b)

    def test_huge_eps_stalls(self):
        lr = 1e-3
        p, _ = self._step(np.ones(3), eps=1e12, lr=lr)
        assert np.abs(p).max() < 1e-9 * lr

    def test_step_shrinks_with_eps(self, rng):
        g = rng.standard_normal(5)
        sizes = [np.abs(self._step(g, eps=e)[0]).max() for e in (1e-8, 1e-4, 1e-1, 1e2)]
        assert all(a > b for a, b in zip(sizes, sizes[1:]))

    def test_moments_follow_recurrence(self):
        g1, g2 = np.array([1.0, -2.0]), np.array([0.5, 4.0])
        p = np.zeros(2)
        state = AdamState.zeros_like([p])
        adam_step([p], [g1], state, 1, 0.1)
        adam_step([p], [g2], state, 2, 0.1)
        m = 0.9 * (0.1 * g1) + 0.1 * g2
        v = 0.999 * (0.001 * g1 ** 2) + 0.001 * g2 ** 2
        assert_allclose(state.m[0], m, rtol=1e-12)
        assert_allclose(state.v[0], v, rtol=1e-12)
        assert state.t == 2

    def test_shape_mismatch(self):
        state = AdamState.zeros_like([np.zeros(3)])
        with pytest.raises(ConfigError):
            adam_step([np.zeros(3)], [np.zeros(4)], state, 1, 0.1)

    def test_t_must_be_positive(self):
        with pytest.raises(ConfigError):
            adam_step([np.zeros(1)], [np.zeros(1)], AdamState.zeros_like([np.zeros(1)]), 0, 0.1)

    def test_minimizes_quadratic(self):
        from tornet.numerics import Parameter

        w = Parameter(np.array([3.0, -4.0]))
        opt = Adam([w], lr=0.05)
        for _ in range(500):
            w.grad = 2 * w.data
            opt.step()
        assert np.abs(w.data).max() < 1e-2


class TestTrainConfig:
    @pytest.mark.parametrize(
        "kw",
        [dict(max_epochs=0), dict(max_epochs=1, lr=-1), dict(max_epochs=1, eps=0),
         dict(max_epochs=1, batch_size=0), dict(max_epochs=1, class_weighting="x")],
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_defaults(self):
        cfg = TrainConfig(max_epochs=3)
        assert (cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.batch_size) == (1e-5, 0.9, 0.999, 1e-8, 16)
        assert cfg.class_weighting == "off"


@pytest.fixture(scope="module")
def tiny_splits(tmp_path_factory):
    """Synthetic corpus features cropped to 16 frames for the tiny model."""
    out = tmp_path_factory.mktemp("corpus")
    m = generate_synth(SynthSpec(n_per_class_per_split=8, seed=7), out)

    def crop(split):
        d = load_split(m, split)
        return SplitData(np.ascontiguousarray(d.x[..., :16]), d.y, d.paths, split)

    return crop("train"), crop("devel")


class TestTrainLoop:
    def test_lr_zero_leaves_parameters(self, tiny_config, tiny_splits):
        tr, va = tiny_splits
        model = build_model(tiny_config, seed=0)
        before = {n: p.data.copy() for n, p in model.named_parameters()}
        train(model, tr, va, TrainConfig(max_epochs=2, lr=0.0, batch_size=4))
        for n, p in model.named_parameters():
            assert_array_equal(p.data, before[n]), n

    def test_history_and_best(self, tiny_config, tiny_splits):
        tr, va = tiny_splits
        res = train(build_model(tiny_config, seed=1), tr, va, TrainConfig(max_epochs=3, lr=1e-3, batch_size=4, seed=1))
        assert [h["epoch"] for h in res.history] == [1, 2, 3]
        assert set(res.history[0]) == {"epoch", "train_loss", "val_uar", "seconds"}
        uars = [h["val_uar"] for h in res.history]
        assert res.best_uar == max(uars)
        assert res.best_epoch == uars.index(max(uars)) + 1  # earliest epoch wins ties

    def test_best_state_reproduces_best_uar(self, tiny_config, tiny_splits):
        tr, va = tiny_splits
        model = build_model(tiny_config, seed=2)
        res = train(model, tr, va, TrainConfig(max_epochs=3, lr=1e-3, batch_size=4, seed=2))
        model.load_state_dict(res.best_state)
        assert evaluate_uar(model, va)[0] == res.best_uar

    def test_loss_decreases_over_five_epochs(self, tiny_config, tiny_splits):
        tr, va = tiny_splits
        curves = []
        for seed in range(3):
            res = train(build_model(tiny_config, seed=seed), tr, va,
                        TrainConfig(max_epochs=5, lr=1e-3, batch_size=4, seed=seed))
            curves.append([h["train_loss"] for h in res.history])
        mean = np.mean(curves, axis=0)
        assert mean[-1] < mean[0]

    def test_single_class_validation(self, tiny_config, tiny_splits):
        tr, va = tiny_splits
        keep = va.y == 0
        one_class = SplitData(va.x[keep], va.y[keep], [], "devel")
        with pytest.raises(ConfigError, match="validation"):
            train(build_model(tiny_config), tr, one_class, TrainConfig(max_epochs=1))

    def test_target_stops_early(self, tiny_config, tiny_splits):
        tr, va = tiny_splits
        res = train(build_model(tiny_config), tr, va, TrainConfig(max_epochs=5, lr=1e-3, batch_size=4, target_uar=0.0))
        assert len(res.history) == 1 and res.stop_reason == "target_uar"

    def test_patience(self, tiny_config, tiny_splits):
        tr, va = tiny_splits
        res = train(build_model(tiny_config), tr, va, TrainConfig(max_epochs=10, lr=0.0, batch_size=4, patience=2))
        assert len(res.history) == 3 and res.stop_reason == "patience"

    def test_untimed_history(self, tiny_config, tiny_splits):
        tr, va = tiny_splits
        res = train(build_model(tiny_config), tr, va, TrainConfig(max_epochs=1, batch_size=8), record_time=False)
        assert "seconds" not in res.history[0]

    def test_balanced_weights(self):
        assert_allclose(class_weights(np.array([0, 0, 0, 1]), 2), [4 / 6, 4 / 2])

    def test_checkpoint_round_trip_bitwise_logits(self, tiny_config, tiny_splits, tmp_path):
        tr, va = tiny_splits
        model = build_model(tiny_config, seed=4)
        res = train(model, tr, va, TrainConfig(max_epochs=1, lr=1e-3, batch_size=4))
        model.load_state_dict(res.best_state)
        save_model(tmp_path / "m.ckpt", res.best_state, checkpoint_metadata(tiny_config, seed=4))
        loaded, meta = load_model(tmp_path / "m.ckpt")
        assert meta["seed"] == 4
        assert_array_equal(predict_logits(loaded, va.x), predict_logits(model, va.x))


def uar_oracle(labels, preds, k=2):
    recalls = []
    for c in range(k):
        idx = [i for i, y in enumerate(labels) if y == c]
        recalls.append(sum(1 for i in idx if preds[i] == c) / len(idx))
    return sum(recalls) / k


class TestUAR:
    def test_perfect(self):
        assert uar([0, 1, 1, 0], [0, 1, 1, 0]) == 1.0

    def test_hand_example(self):
        labels = [0, 0, 0, 0, 1, 1, 1]
        preds = [0, 0, 1, 1, 1, 1, 1]
        assert uar(labels, preds) == 0.75

    def test_constant_predictor(self):
        assert uar([0, 1] * 10, [1] * 20) == 0.5

    def test_absent_class(self):
        with pytest.raises(DataError, match="absent"):
            uar([0, 0], [0, 1])

    def test_confusion_layout(self):
        assert_array_equal(confusion_matrix([0, 0, 1], [1, 0, 1]), [[1, 1], [0, 1]])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=3, max_size=60), st.permutations([0, 1, 2]))
    def test_relabeling_invariance(self, pairs, perm):
        labels = [p[0] for p in pairs]
        preds = [p[1] for p in pairs]
        if len(set(labels)) < 3:
            labels[:3] = [0, 1, 2]
        a = uar(labels, preds, 3)
        b = uar([perm[y] for y in labels], [perm[y] for y in preds], 3)
        assert a == pytest.approx(b, abs=1e-15)

    def test_matches_oracle_on_random_vectors(self):
        gen = np.random.default_rng(8)
        for _ in range(100):
            n = int(gen.integers(4, 80))
            labels = gen.integers(0, 2, n)
            labels[:2] = [0, 1]
            preds = gen.integers(0, 2, n)
            assert uar(labels, preds) == uar_oracle(list(labels), list(preds))


class TestBootstrap:
    def test_perfect(self):
        assert bootstrap_ci([0, 1] * 20, [0, 1] * 20) == (1.0, 1.0)

    def test_all_wrong(self):
        assert bootstrap_ci([0, 1] * 20, [1, 0] * 20) == (0.0, 0.0)

    def test_seed_determinism(self, rng):
        y = rng.integers(0, 2, 50)
        p = np.where(rng.random(50) < 0.8, y, 1 - y)
        assert bootstrap_ci(y, p, seed=3) == bootstrap_ci(y, p, seed=3)

    def test_exactly_n_valid_resamples(self):
        # one positive among 10: most resamples miss it and must be redrawn
        y = [0] * 9 + [1]
        vals = bootstrap_uars(y, y, n=200)
        assert len(vals) == 200 and np.all(vals == 1.0)

    def test_width_shrinks_with_n(self):
        gen = np.random.default_rng(0)

        def width(n):
            y = np.tile([0, 1], n // 2)
            p = np.where(gen.random(n) < 0.75, y, 1 - y)
            lo, hi = bootstrap_ci(y, p, seed=1)
            return hi - lo

        assert width(500) < width(50)

    def test_nearest_rank_bounds(self):
        y = np.array([0, 1] * 15)
        p = np.where(np.arange(30) % 7 == 0, 1 - y, y)
        vals = np.sort(bootstrap_uars(y, p, 1000, seed=5))
        assert bootstrap_ci(y, p, 1000, seed=5) == (vals[24], vals[974])
        assert (math.ceil(0.025 * 1000), math.ceil(0.975 * 1000)) == (25, 975)

    def test_low_not_above_high(self, rng):
        for _ in range(20):
            y = rng.integers(0, 2, 30)
            y[:2] = [0, 1]
            p = rng.integers(0, 2, 30)
            lo, hi = bootstrap_ci(y, p, 200, seed=int(rng.integers(100)))
            assert lo <= hi


class TestEvalReport:
    def test_fields(self):
        rep = evaluate_predictions([0, 0, 1, 1], [0, 1, 1, 1], n_bootstrap=100, split="test")
        assert rep.uar == pytest.approx(np.mean(rep.recalls))
        assert rep.confusion == [[1, 1], [0, 2]]
        assert rep.ci_low <= rep.ci_high
        assert isinstance(rep, EvalReport)
        assert "UAR: 75.0%" in rep.table(["negative", "positive"])
        assert rep.to_dict()["n_bootstrap"] == 100
