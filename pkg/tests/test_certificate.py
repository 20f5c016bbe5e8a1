import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stagsynth import Panel, WeightMatrix, certify, dispersion, estimate_kappa, theorem1_bound
from stagsynth.certificate import noise_constant
from stagsynth.errors import DispersionViolation, InvalidScale, ValidationError, WindowTooShort
from stagsynth.panel import sample_panel
from stagsynth.simlab import DgpConfig, generate_panel


def test_worked_example():
    cert = theorem1_bound(0.1, 0.2, 100, 100, 0.5, 1.0)
    assert cert.pooled_term == 0.1
    assert cert.separate_term == pytest.approx(0.02, abs=1e-15)
    assert cert.noise_term == pytest.approx(math.sqrt(24 * math.log(100) / 100), abs=1e-15)
    assert cert.noise_term == pytest.approx(1.05130, abs=1e-5)
    assert cert.total == pytest.approx(1.17130, abs=1e-5)
    assert cert.failure_prob == 2e-4
    assert cert.dispersion_ok


def test_zero_imbalance_is_noise_only():
    cert = theorem1_bound(0.0, 0.0, 50, 10_000, 0.2, 1.3)
    assert cert.total == cert.noise_term


@pytest.mark.parametrize("J", [2, 10, 1000, 10**6])
@pytest.mark.parametrize("L", [1, 100, 10**5])
def test_bias_floor(J, L):
    assert theorem1_bound(0.8, 0.8, L, J, 0.5, 1.0).total >= 0.8


def test_errors_and_lenient_mode():
    with pytest.raises(InvalidScale):
        theorem1_bound(0, 0, 10, 10, 0.5, 0.0)
    with pytest.raises(ValidationError):
        theorem1_bound(0, 0, 10, 1, 0.5, 1.0)
    with pytest.raises(DispersionViolation):
        theorem1_bound(0, 0, 10, 10, 1.0, 1.0)
    with pytest.raises(DispersionViolation):
        theorem1_bound(0, 0, 10, 10, 0.995, 1.0)
    with pytest.raises(DispersionViolation):
        theorem1_bound(0, 0, 10, 10, 0.3, 1.0, max_dispersion=0.5)
    with pytest.warns(UserWarning):
        cert = theorem1_bound(0, 0, 10, 10, 0.3, 1.0, max_dispersion=0.5, strict=False)
    assert not cert.dispersion_ok


def test_dispersion_values():
    p = Panel(np.zeros((4, 5)), [3, None, None, None])
    assert dispersion(WeightMatrix.uniform(p))[1] == pytest.approx(1 / 3)
    g = WeightMatrix.from_rows(p, {"0": {"1": 0.5, "2": 0.3, "3": 0.2}})
    assert dispersion(g)[0][0] == pytest.approx(0.38)
    one = WeightMatrix.from_rows(p, {"0": {"1": 1.0}})
    assert dispersion(one)[1] == 1.0


@settings(max_examples=60, deadline=None)
@given(
    st.floats(0, 5), st.floats(0, 5), st.integers(1, 1000), st.integers(3, 10**6),
    st.floats(0.01, 0.98), st.floats(0.01, 10),
)
def test_invariants(qp, qs, L, J, c, kappa):
    cert = theorem1_bound(qp, qs, L, J, c, kappa)
    assert cert.total == pytest.approx(cert.pooled_term + cert.separate_term + cert.noise_term, rel=1e-15)
    assert cert.failure_prob * J**2 == pytest.approx(2.0, rel=1e-15)
    expected = noise_constant(c, kappa) * math.sqrt(math.log(J) / J)
    assert cert.noise_term == pytest.approx(expected, rel=1e-12)
    # monotone directions
    assert theorem1_bound(qp + 0.1, qs, L, J, c, kappa).total >= cert.total
    assert theorem1_bound(qp, qs + 0.1, L, J, c, kappa).total >= cert.total
    assert theorem1_bound(qp, qs, L, J, c, kappa * 1.1).total >= cert.total
    assert theorem1_bound(qp, qs, L + 1, J, c, kappa).total <= cert.total


def test_noise_term_decreasing_in_j():
    vals = [theorem1_bound(0, 0, 10, J, 0.5, 1.0).noise_term for J in range(3, 2000)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))


def test_kappa_noiseless_is_zero():
    p = sample_panel()
    g = WeightMatrix.uniform(p)
    assert estimate_kappa(p, g) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(InvalidScale):
        certify(p, g)


def test_kappa_window_too_short():
    p = Panel(np.random.default_rng(0).normal(size=(3, 6)), [4, None, None])
    with pytest.raises(WindowTooShort):
        estimate_kappa(p, WeightMatrix.uniform(p))


def test_kappa_recovers_unit_scale():
    cfg = DgpConfig(n_treated=3, n_donors=8, T=401, adoption={"kind": "simultaneous", "t0": 401})
    inside = 0
    for seed in range(40):
        p, _ = generate_panel(cfg, seed=seed)
        inside += 0.9 <= estimate_kappa(p, WeightMatrix.uniform(p)) <= 1.1
    assert inside >= 36


def test_kappa_scale_equivariant():
    p, _ = generate_panel(DgpConfig(n_treated=2, n_donors=4, T=30, adoption={"kind": "simultaneous", "t0": 25}), seed=2)
    g = WeightMatrix.uniform(p)
    doubled = p.with_outcomes(2 * p.outcomes)
    assert estimate_kappa(doubled, g) == pytest.approx(2 * estimate_kappa(p, g), rel=1e-12)


def test_certify_plugs_in_empirical_q():
    p, _ = generate_panel(DgpConfig(n_treated=4, n_donors=6, T=40, adoption={"kind": "simultaneous", "t0": 35}), seed=5)
    g = WeightMatrix.uniform(p)
    cert = certify(p, g, kappa=1.0)
    assert cert.kappa_source == "user" and cert.plug_in
    assert cert.c_used == pytest.approx(1 / 6)
    h = certify(p, g)
    assert h.kappa_source == "heuristic"
    d = h.to_dict()
    assert "kappa" in d["note"]


def test_certify_single_donor_row():
    p = Panel(np.random.default_rng(1).normal(size=(3, 12)), [10, 10, None])
    g = WeightMatrix.uniform(p)
    with pytest.raises(DispersionViolation):
        certify(p, g, kappa=1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cert = certify(p, g, kappa=1.0, strict=False)
    assert not cert.dispersion_ok and cert.c_used == 1.0
