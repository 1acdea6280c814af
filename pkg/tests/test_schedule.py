"""Unit tests for schedule module."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.schedule import (
    EvalMode,
    OutOfHorizonError,
    ScheduleConfig,
    ScheduleError,
    ScheduleKind,
    rate_at,
    rates,
    sawtooth_series,
    wrap,
)


def cyclic(amplitude=0.4, frequency=1.0, horizon=100, gamma_fixed=1.0, mode=EvalMode.CLOSED_FORM, terms=1000):
    return ScheduleConfig(
        kind=ScheduleKind.CYCLIC,
        gamma_fixed=gamma_fixed,
        amplitude=amplitude,
        frequency=frequency,
        horizon=horizon,
        eval_mode=mode,
        fourier_terms=terms,
    )


class TestRateAt:
    """Test rate evaluation on the documented examples."""

    def test_zero_amplitude_is_gamma_fixed(self):
        """Test that a zero amplitude collapses to gamma_fixed in both modes."""
        for mode in (EvalMode.CLOSED_FORM, EvalMode.FOURIER):
            cfg = cyclic(amplitude=0.0, frequency=3.0, mode=mode)
            assert rate_at(cfg, 7) == 1.0

    def test_phase_zero(self):
        """Test that round 0 gives gamma_fixed - a/2."""
        assert rate_at(cyclic(), 0) == pytest.approx(0.8, abs=1e-12)
        assert rate_at(cyclic(mode=EvalMode.FOURIER, terms=10_000), 0) == pytest.approx(0.8, abs=1e-12)

    def test_derived_example(self):
        """Test a=0.4, f=2, G=100 at round 10 (phase 0.2)."""
        cfg = cyclic(frequency=2.0)
        assert rate_at(cfg, 10) == pytest.approx(0.88, abs=1e-12)
        oracle = rate_at(cyclic(frequency=2.0, mode=EvalMode.FOURIER, terms=10**6), 10)
        assert abs(oracle - 0.88) < 1e-3

    def test_fixed_schedule(self):
        """Test that a fixed schedule returns gamma_fixed exactly."""
        cfg = ScheduleConfig(kind=ScheduleKind.FIXED, gamma_fixed=1.0, amplitude=0.7, horizon=100)
        assert rate_at(cfg, 42) == 1.0

    def test_fixed_schedule_is_constant(self):
        """Test fixed-mode constancy across the horizon."""
        cfg = ScheduleConfig(kind=ScheduleKind.FIXED, gamma_fixed=0.3, horizon=50)
        assert set(rates(cfg).tolist()) == {0.3}

    def test_round_outside_horizon(self):
        """Test that rounds at or beyond the horizon are rejected."""
        cfg = cyclic(horizon=10)
        with pytest.raises(OutOfHorizonError) as info:
            rate_at(cfg, 10)
        assert info.value.round == 10
        with pytest.raises(OutOfHorizonError):
            rate_at(cfg, -1)

    def test_deterministic(self):
        """Test that repeated calls agree bitwise."""
        cfg = cyclic(frequency=7.0, mode=EvalMode.FOURIER, terms=500)
        assert rate_at(cfg, 33) == rate_at(cfg, 33)


class TestScheduleValidation:
    """Test schedule invariants."""

    def test_amplitude_above_gamma_fixed(self):
        """Test the positivity guard."""
        with pytest.raises(ScheduleError, match="amplitude"):
            cyclic(amplitude=0.4, gamma_fixed=0.3)

    def test_non_positive_gamma_fixed(self):
        """Test that gamma_fixed must be positive."""
        with pytest.raises(ScheduleError):
            ScheduleConfig(gamma_fixed=0.0)

    def test_horizon_and_terms(self):
        """Test horizon >= 1 and K >= 1."""
        with pytest.raises(ScheduleError):
            cyclic(horizon=0)
        with pytest.raises(ScheduleError):
            cyclic(mode=EvalMode.FOURIER, terms=0)

    def test_fixed_ignores_amplitude(self):
        """Test that a fixed schedule does not validate its amplitude."""
        cfg = ScheduleConfig(kind=ScheduleKind.FIXED, gamma_fixed=0.5, amplitude=3.0, horizon=5)
        assert rate_at(cfg, 4) == 0.5


class TestScheduleProperties:
    """Property checks of the cyclic schedule."""

    @settings(max_examples=200, deadline=None)
    @given(
        gamma_fixed=st.floats(0.05, 5.0),
        fraction=st.floats(0.01, 0.99),
        frequency=st.floats(0.5, 10.0),
        horizon=st.integers(1, 500),
        data=st.data(),
    )
    def test_closed_form_range(self, gamma_fixed, fraction, frequency, horizon, data):
        """Test that closed-form rates lie in [gamma_fixed - a, gamma_fixed)."""
        amplitude = gamma_fixed * fraction
        cfg = cyclic(amplitude=amplitude, frequency=frequency, horizon=horizon, gamma_fixed=gamma_fixed)
        r = data.draw(st.integers(0, horizon - 1))
        gamma = rate_at(cfg, r)
        assert gamma_fixed - amplitude - 1e-12 <= gamma <= gamma_fixed
        assert gamma > 0

    @settings(max_examples=100, deadline=None)
    @given(frequency=st.sampled_from([1, 2, 4, 5, 10]), r=st.integers(0, 200))
    def test_periodicity(self, frequency, r):
        """Test that the rate repeats every horizon/frequency rounds."""
        horizon = 400
        period = horizon // frequency
        cfg = cyclic(frequency=float(frequency), horizon=horizon)
        if r + period < horizon:
            assert abs(rate_at(cfg, r) - rate_at(cfg, r + period)) < 1e-12

    def test_wrap_range(self):
        """Test that wrap maps onto [-1/2, 1/2)."""
        for y in np.linspace(-5.0, 5.0, 1001):
            w = wrap(float(y))
            assert -0.5 <= w < 0.5
            assert (y - w) == pytest.approx(round(y - w))


class TestSeriesConvergence:
    """Test agreement of the truncated Fourier series with the closed form."""

    def test_closed_form_matches_series(self):
        """Test 1000 phases away from the jumps at K = 10^4."""
        rng = np.random.default_rng(2024)
        phases = []
        while len(phases) < 1000:
            x = float(rng.uniform(-3.0, 3.0))
            if abs(wrap(x - 0.5)) > 0.05:
                phases.append(x)
        for x in phases:
            assert abs(sawtooth_series(x, 10_000) - wrap(x)) < 1e-3

    def test_error_shrinks_with_terms(self):
        """Test that the mean error decreases as K grows."""
        rng = np.random.default_rng(7)
        phases = [x for x in rng.uniform(-1.0, 1.0, 400) if abs(wrap(x - 0.5)) > 0.05]
        errors = [
            np.mean([abs(sawtooth_series(x, k) - wrap(x)) for x in phases]) for k in (10, 100, 1000)
        ]
        assert errors[0] > errors[1] > errors[2]

    def test_series_midpoint_at_jump(self):
        """Test that the series converges to the midpoint at a half-integer phase."""
        assert abs(sawtooth_series(0.5, 1000)) < 1e-9
        assert wrap(0.5) == -0.5

    def test_rate_agreement_through_config(self):
        """Test rate_at in both modes on in-horizon rounds off the jumps."""
        closed = cyclic(amplitude=0.5, frequency=3.0, horizon=97)
        series = cyclic(amplitude=0.5, frequency=3.0, horizon=97, mode=EvalMode.FOURIER, terms=10_000)
        for r in range(97):
            x = 3.0 * r / 97
            if abs(wrap(x - 0.5)) > 0.05:
                assert math.isclose(rate_at(closed, r), rate_at(series, r), abs_tol=1e-3)
