import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from riskdrive.reachability import BarrierPolicy, U3_DEFAULT
from riskdrive.worldmodel import EnsembleWorldModel, ObsLayout

FD_H = 1e-5
FD_RTOL = 1e-4

LAYOUT = ObsLayout(dim=9, d_indices=(0, 3), v_indices=(1, 4), v_ego_index=6)


def make_barrier(seed: int, u3: float = U3_DEFAULT, layout=LAYOUT) -> BarrierPolicy:
    return BarrierPolicy(layout.dim, layout, hidden=(4,), u3=u3,
                         rng=np.random.default_rng(seed))


class _GradRecorder:
    def __init__(self):
        self.grads = None

    def step(self, params, grads):
        self.grads = [np.array(g, copy=True) for g in grads]


class TestFactor:
    def test_in_unit_interval(self):
        bar = make_barrier(0)
        s = np.random.default_rng(1).normal(0, 3, size=(1000, 9))
        b = bar.factor(s)
        assert b.shape == (1000,)
        assert np.all(b > 0.0) and np.all(b < 1.0)

    def test_zero_weights_give_half(self):
        bar = make_barrier(2)
        for p in bar.net.parameters():
            p[...] = 0.0
        assert np.all(bar.factor(np.ones((3, 9))) == 0.5)


class TestAdjust:
    def test_worked_example(self):
        # b=1, sigma=1, |noise|=0.5, u3=2  ->  shrink by exactly 1 meter
        bar = make_barrier(3, u3=2.0)
        s = np.zeros((1, 9))
        s[0, 0] = 0.7
        s[0, 3] = 1.4
        out = bar.adjust_distances(np.array([1.0]), np.array([1.0]), s, np.array([0.5]))
        assert out[0, 0] == 0.0          # max(0.7 - 1, 0)
        assert out[0, 3] == pytest.approx(0.4, abs=1e-15)

    def test_zero_factor_and_zero_sigma_keep_distances(self):
        bar = make_barrier(4)
        s = np.abs(np.random.default_rng(5).normal(0, 2, size=(6, 9)))
        for b, sig in ((0.0, 1.0), (1.0, 0.0)):
            out = bar.adjust_distances(np.full(6, b), np.full(6, sig), s, np.ones(6))
            assert np.array_equal(out, s)

    def test_sensing_cap_passthrough(self):
        # slots at the sensing cap are empty; never adjusted
        bar = make_barrier(6)
        s = np.zeros((2, 9))
        s[:, 0] = 200.0
        s[:, 3] = 3.0
        out = bar.adjust_distances(np.ones(2), np.ones(2), s, np.full(2, 10.0))
        assert np.all(out[:, 0] == 200.0)
        assert np.all(out[:, 3] == 0.0)  # real obstacle shrunk to the floor

    def test_non_distance_dims_bit_identical(self):
        bar = make_barrier(7)
        rng = np.random.default_rng(8)
        s = rng.normal(size=(10, 9))
        out = bar.adjust_distances(rng.uniform(size=10), rng.uniform(size=10), s,
                                   np.abs(rng.normal(size=10)))
        other = [i for i in range(9) if i not in (0, 3)]
        assert np.array_equal(out[:, other], s[:, other])

    @given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 3),
           st.floats(-5, 199), st.floats(0, 199))
    def test_adjusted_bounds(self, b, sig, noise, d0, d1):
        bar = make_barrier(9)
        s = np.zeros((1, 9))
        s[0, 0], s[0, 3] = d0, d1
        out = bar.adjust_distances(np.array([b]), np.array([sig]), s, np.array([noise]))
        for j, d in ((0, d0), (3, d1)):
            assert out[0, j] >= 0.0
            assert out[0, j] <= max(d, 0.0) + 1e-12

    def test_adjust_batch_is_seed_deterministic(self):
        bar = make_barrier(10)
        s = np.abs(np.random.default_rng(11).normal(0, 2, size=(5, 9)))
        sig = np.full(5, 0.5)
        a = bar.adjust_batch(s, sig, np.random.default_rng(42))
        b = bar.adjust_batch(s, sig, np.random.default_rng(42))
        assert np.array_equal(a, b)
        c = bar.adjust_batch(s, sig, np.random.default_rng(43))
        assert not np.array_equal(a, c)


# -- training gradient ---------------------------------------------------------------


def _interior_setup(seed: int):
    """Barrier + model + batch where every clamp sits away from its kink."""
    for attempt in range(80):
        rng = np.random.default_rng(seed + 997 * attempt)
        model = EnsembleWorldModel(9, 2, LAYOUT, n_members=2, k_levels=1,
                                   hidden=(6,), rng=rng)
        bar = make_barrier(seed + attempt, u3=2.0)
        s = rng.normal(0.0, 0.5, size=(4, 9))
        s[:, 1] = s[:, 6] + 2.0          # kappa cap strictly active
        s[:, [0, 3]] = rng.uniform(1.0, 3.0, size=(4, 2))
        actions = rng.normal(0, 0.5, size=(4, 2))
        sigma_hat = rng.uniform(0.3, 0.9, size=4)
        noise = np.abs(np.random.default_rng(seed + attempt + 5).standard_normal(4))

        b = bar.factor(s)
        adjusted = bar.adjust_distances(b, sigma_hat, s, noise)
        # distances must stay clear of the max(., 0) kink under FD wiggles
        if np.min(adjusted[:, [0, 3]]) < 1e-2:
            continue
        est = model.uncertainty(adjusted, actions)
        raw = est.kappa * np.sqrt(est.sigma_a2 + est.sigma_e2)
        model.normalizer.value = float(2.0 * np.max(raw))
        ok = True
        for n in range(model.n):
            prev = None
            for k in range(2):
                x = model._level_input(adjusted, actions, prev)
                raw_out = model.nets[n][k].forward(x)
                if np.any(np.abs(raw_out[:, 9]) < 1e-3) or np.any(np.abs(raw_out[:, 9] - 1) < 1e-3):
                    ok = False
                mu = raw_out[:, :10].copy()
                prev = (mu[:, :-1], np.clip(mu[:, -1:], 0, 1))
        if ok:
            return bar, model, s, sigma_hat, noise, actions
    raise AssertionError("no interior instance found")


class TestTrainStep:
    def test_gradient_matches_finite_differences(self):
        for seed in range(6):
            bar, model, s, sigma_hat, noise, actions = _interior_setup(seed)
            rec = _GradRecorder()
            bar.opt = rec
            noise_seed = 12345 + seed

            loss = bar.train_step(s, sigma_hat, lambda adj: actions, model,
                                  np.random.default_rng(noise_seed))
            assert np.isfinite(loss)
            pinned = np.abs(np.random.default_rng(noise_seed).standard_normal(4))

            def loss_of_params():
                b = bar.factor(s)
                adj = bar.adjust_distances(b, sigma_hat, s, pinned)
                return float(np.mean(model.risk(adj, actions)))

            params = bar.net.parameters()
            rng = np.random.default_rng(seed)
            for _ in range(10):
                pi = rng.integers(len(params))
                flat = params[pi].reshape(-1)
                wi = rng.integers(flat.size)
                orig = flat[wi]
                flat[wi] = orig + FD_H
                hi = loss_of_params()
                flat[wi] = orig - FD_H
                lo = loss_of_params()
                flat[wi] = orig
                fd = (hi - lo) / (2 * FD_H)
                an = rec.grads[pi].reshape(-1)[wi]
                denom = max(abs(fd), abs(an), 1e-6)
                assert abs(fd - an) / denom < FD_RTOL, f"seed {seed}"

    def test_no_obstacles_no_gradient(self):
        bar, model, s, sigma_hat, _, actions = _interior_setup(30)
        s = s.copy()
        s[:, [0, 3]] = 200.0  # both slots empty
        rec = _GradRecorder()
        bar.opt = rec
        bar.train_step(s, sigma_hat, lambda adj: actions, model, np.random.default_rng(0))
        assert max(np.max(np.abs(g)) for g in rec.grads) == 0.0

    def test_learns_to_widen_margin_on_synthetic_risk(self):
        # risk grows with predicted distance -> shrinking distances pays,
        # so the optimal factor saturates high
        bar = make_barrier(31, u3=2.0)

        class RiskStub:
            def risk_input_grads(self, s, a):
                f = s[:, [0, 3]].sum(axis=1)
                g = np.zeros_like(s)
                g[:, [0, 3]] = 1.0
                return f, g, np.zeros((s.shape[0], 1)), None

        rng = np.random.default_rng(32)
        probe = rng.normal(0, 0.5, size=(64, 9))
        probe[:, [0, 3]] = rng.uniform(2.0, 5.0, size=(64, 2))
        before = float(np.mean(bar.factor(probe)))
        stub = RiskStub()
        for _ in range(2500):
            s = rng.normal(0, 0.5, size=(16, 9))
            s[:, [0, 3]] = rng.uniform(2.0, 5.0, size=(16, 2))
            bar.train_step(s, np.full(16, 0.8), lambda adj: np.zeros((16, 1)),
                           stub, rng)
        after = float(np.mean(bar.factor(probe)))
        assert after > before + 0.2
        assert after > 0.9

    def test_returns_mean_risk(self):
        bar, model, s, sigma_hat, _, actions = _interior_setup(33)
        noise_seed = 777
        rec = _GradRecorder()
        bar.opt = rec
        loss = bar.train_step(s, sigma_hat, lambda adj: actions, model,
                              np.random.default_rng(noise_seed))
        pinned = np.abs(np.random.default_rng(noise_seed).standard_normal(4))
        adj = bar.adjust_distances(bar.factor(s), sigma_hat, s, pinned)
        assert loss == pytest.approx(float(np.mean(model.risk(adj, actions))), abs=1e-12)


def test_checkpoint_round_trip():
    bar = make_barrier(40)
    doc = bar.to_networks()
    other = make_barrier(41)
    other.load_networks(doc)
    s = np.random.default_rng(42).normal(size=(5, 9))
    assert np.array_equal(bar.factor(s), other.factor(s))
