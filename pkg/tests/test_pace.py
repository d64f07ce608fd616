import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smartfreeze.errors import ContractError
from smartfreeze.pace import PaceController, block_perturbation, fit_slope, smooth


class TestPerturbation:
    def test_formula_reference_evaluation(self):
        """Evaluate ||sum W|| / sum ||W|| independently on fixed snapshots."""
        rng = np.random.default_rng(7)
        snaps = [rng.normal(size=12) for _ in range(6)]
        Q = 5
        updates = [snaps[i + 1] - snaps[i] for i in range(5)]
        expect = np.linalg.norm(np.sum(updates, axis=0)) / sum(
            np.linalg.norm(u) for u in updates
        )
        assert block_perturbation(snaps, Q) == pytest.approx(expect, abs=1e-12)

    def test_aligned_updates_give_one(self):
        v = np.ones(4)
        snaps = [k * v for k in range(4)]
        assert block_perturbation(snaps, 3) == pytest.approx(1.0, abs=1e-12)

    def test_cancelling_updates_give_zero(self):
        a, b = np.zeros(4), np.ones(4)
        snaps = [a, b, a]  # +v then -v
        assert block_perturbation(snaps, 2) == pytest.approx(0.0, abs=1e-12)

    def test_stalled_parameters_give_zero(self):
        snaps = [np.ones(4)] * 4
        assert block_perturbation(snaps, 3) == 0.0

    def test_too_few_snapshots_rejected(self):
        with pytest.raises(ContractError):
            block_perturbation([np.ones(4)] * 3, 5)

    def test_only_last_window_used(self):
        rng = np.random.default_rng(3)
        tail = [rng.normal(size=6) for _ in range(4)]
        with_prefix = [rng.normal(size=6), rng.normal(size=6)] + tail
        assert block_perturbation(with_prefix, 3) == block_perturbation(tail, 3)

    @given(
        st.lists(
            st.lists(st.floats(-10, 10), min_size=3, max_size=3),
            min_size=4,
            max_size=9,
        )
    )
    @settings(max_examples=60)
    def test_bounded_unit_interval(self, rows):
        # triangle inequality keeps the ratio in [0, 1]
        p = block_perturbation([np.array(r) for r in rows], len(rows) - 1)
        assert 0.0 <= p <= 1.0 + 1e-12


class TestSmoothing:
    def test_full_window_mean(self):
        series = [1.0, 2.0, 3.0, 4.0, 5.0]
        assert smooth(series, 3, 5) == pytest.approx(4.0, abs=1e-12)

    def test_prefix_before_window_fills(self):
        assert smooth([2.0, 4.0], 5, 2) == pytest.approx(3.0, abs=1e-12)

    def test_reference_evaluation(self):
        rng = np.random.default_rng(11)
        series = list(rng.uniform(size=9))
        assert smooth(series, 4, 9) == pytest.approx(np.mean(series[5:]), abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            smooth([], 3, 0)


class TestSlope:
    def test_exact_line_recovered(self):
        y = [0.5 + 0.25 * k for k in range(6)]
        assert fit_slope(y) == pytest.approx(0.25, abs=1e-12)

    def test_constant_series_zero(self):
        assert fit_slope([3.0] * 5) == pytest.approx(0.0, abs=1e-12)

    def test_normal_equation_oracle(self):
        rng = np.random.default_rng(5)
        y = rng.normal(size=8)
        coef = np.polyfit(np.arange(8), y, 1)[0]
        assert fit_slope(y) == pytest.approx(coef, abs=1e-10)

    def test_single_point_rejected(self):
        with pytest.raises(ContractError):
            fit_slope([1.0])


def drive(controller, params_for_round, rounds):
    freeze_round = None
    for r in range(1, rounds + 1):
        rec = controller.observe(params_for_round(r))
        if rec.freeze and freeze_round is None:
            freeze_round = r
    return freeze_round


class TestController:
    def test_warmup_emits_no_statistics(self):
        ctl = PaceController(Q=4, H=3)
        for r in range(1, 5):
            rec = ctl.observe(np.full(6, float(r)))
            assert rec.perturbation is None and not rec.freeze

    def test_geometric_decay_triggers_freeze(self):
        """theta_r = theta* + 0.5^r v: shrinking updates must freeze."""
        theta, v = np.ones(8), np.full(8, 2.0)
        ctl = PaceController(Q=5, H=5, threshold=1e-3, patience=3)
        freeze = drive(ctl, lambda r: theta + 0.5**r * v, 40)
        assert freeze is not None

    def test_constant_direction_never_freezes(self):
        """theta_r = r * v: flat P = 1 but norms never decay."""
        v = np.full(8, 0.3)
        ctl = PaceController(Q=5, H=5, threshold=1e-3, patience=3)
        freeze = drive(ctl, lambda r: r * v, 60)
        assert freeze is None

    def test_noisy_random_walk_never_freezes(self):
        rng = np.random.default_rng(21)
        theta = np.zeros(16)
        history = []
        for _ in range(60):
            theta = theta + rng.normal(size=16)
            history.append(theta.copy())
        ctl = PaceController(Q=5, H=5, threshold=1e-3, patience=3)
        freeze = drive(ctl, lambda r: history[r - 1], 60)
        assert freeze is None

    def test_patience_resets_on_excursion(self):
        # decay_ratio=1.0 makes the norm guard inert; steer via slope alone
        ctl = PaceController(threshold=0.05, patience=3, decay_ratio=1.0)
        ctl.norm_series = [1.0]
        fired = [ctl._decide(s) for s in [0.0, 0.01, 0.2, -0.01, 0.0, 0.02]]
        assert fired == [False, False, False, False, False, True]

    def test_decay_guard_disabled_at_ratio_one(self):
        # verbatim slope-only rule: constant-rate drift then freezes too
        v = np.full(8, 0.3)
        ctl = PaceController(Q=5, H=5, threshold=1e-3, patience=3, decay_ratio=1.0)
        assert drive(ctl, lambda r: r * v, 30) is not None

    def test_observe_copies_input(self):
        ctl = PaceController(Q=2, H=2)
        buf = np.ones(4)
        ctl.observe(buf)
        buf[:] = 99.0
        assert np.array_equal(ctl.snapshots[0], np.ones(4))

    def test_deterministic_records(self):
        rng = np.random.default_rng(2)
        series = [rng.normal(size=10) for _ in range(20)]
        recs1 = [PaceController().observe(s) for s in series]  # noqa: F841
        c1, c2 = PaceController(), PaceController()
        r1 = [c1.observe(s) for s in series]
        r2 = [c2.observe(s) for s in series]
        assert [(x.perturbation, x.smoothed, x.slope, x.freeze) for x in r1] == [
            (x.perturbation, x.smoothed, x.slope, x.freeze) for x in r2
        ]
