import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pagcert import bounds
from pagcert.bounds import CertificateParams
from pagcert.certifier import (
    RULE_FLOOR,
    PagCertificate,
    RobustnessMap,
    build_map,
    certify,
    compute_kappa_max,
    emit_certificate,
    map_lookup,
)
from pagcert.errors import InconsistentParamsError, ParameterError
from pagcert.oracles import ADVERSARIAL_UPPER, EXACT
from pagcert.quality import QualitySample


def brute_force_m(sample, kappa):
    return min(r for r, k in zip(sample.rho, sample.kappa) if k >= kappa)


def test_hand_trace_increasing():
    s = QualitySample.from_points([(0.1, 0.3), (0.2, 0.7), (0.3, 0.9)])
    m = build_map(s, 0.9)
    assert m.steps == [(0.3, 0.1), (0.7, 0.2), (0.9, 0.3)]
    assert m.size == 3


def test_hand_trace_dominated_and_above_kappa_max():
    s = QualitySample.from_points([(0.1, 0.9), (0.2, 0.5), (0.3, 0.95)])
    m = build_map(s, 0.9)
    assert m.steps == [(0.9, 0.1)]
    assert m.size == 1


def test_kappa_max_below_all_keeps_one_step():
    # every point has conf >= kappa_max, so M(kappa_max) is the smallest rho
    s = QualitySample.from_points([(0.1, 0.6), (0.2, 0.7)])
    m = build_map(s, 0.5)
    assert m.steps == [(0.5, 0.1)]
    assert m.lookup(0.5) == brute_force_m(s, 0.5)


def test_lookup_examples():
    m = RobustnessMap([0.3, 0.7, 0.9], [0.1, 0.2, 0.3], 0.9)
    assert map_lookup(m, 0.5) == 0.2
    assert map_lookup(m, 0.95) is None
    assert map_lookup(m, 0.2) == 0.1
    assert map_lookup(m, 0.5, RULE_FLOOR) == 0.1


def test_clamping_keeps_high_confidence_points_binding():
    # the high-confidence point with small rho must still bound M at kappa_max
    s = QualitySample.from_points([(0.5, 0.8), (0.05, 0.99)])
    m = build_map(s, 0.8)
    assert m.lookup(0.8) == 0.05 == brute_force_m(s, 0.8)


def test_map_validation():
    with pytest.raises(ParameterError):
        RobustnessMap([0.5, 0.4], [0.1, 0.2], 0.9)
    with pytest.raises(ParameterError):
        RobustnessMap([0.5, 0.95], [0.1, 0.2], 0.9)


@settings(max_examples=150, deadline=None)
@given(
    pts=st.lists(st.tuples(st.integers(0, 20), st.integers(0, 20)), min_size=1, max_size=60),
    q=st.integers(0, 20),
)
def test_map_equals_brute_force(pts, q):
    # coarse integer grid to force ties in both coordinates
    s = QualitySample.from_points([(r / 20, 0.5 + k / 40) for r, k in pts])
    kmax = 0.5 + q / 40
    m = build_map(s, kmax)
    for kappa in np.unique(s.kappa):
        if kappa <= kmax:
            assert m.lookup(kappa) == brute_force_m(s, kappa)
    assert np.all(np.diff(m.kappas) > 0) and np.all(np.diff(m.rhos) > 0)


def test_quantized_map_is_lower_bound():
    rng = np.random.default_rng(0)
    s = QualitySample(rng.uniform(0, 0.5, 500), rng.uniform(0.5, 1, 500))
    m = build_map(s, 0.95, rho_quantum=1 / 64)
    exact = build_map(s, 0.95)
    k = np.unique(s.kappa[s.kappa <= 0.95])
    assert np.all(m.lookup_many(k) <= exact.lookup_many(k))
    assert np.allclose(m.rhos * 64, np.round(m.rhos * 64))


def test_kappa_max_examples():
    s = QualitySample(np.zeros(10), np.arange(1, 11) / 10)
    assert compute_kappa_max(s, CertificateParams(0.1, 0.1, 0.1), index=3) == pytest.approx(0.3)
    same = QualitySample(np.zeros(100), np.full(100, 0.7))
    assert compute_kappa_max(same, CertificateParams(0.1, 0.1, 0.1)) == 0.7


def test_kappa_max_uses_quantile_index():
    rng = np.random.default_rng(1)
    s = QualitySample(rng.uniform(size=31635), rng.uniform(size=31635))
    params = CertificateParams(2.5e-3, 0.01, 0.05)
    i = bounds.quantile_index(31635, 0.95, 0.005)
    assert i == 29488
    assert compute_kappa_max(s, params) == np.sort(s.kappa)[i - 1]


def small_params():
    return CertificateParams(0.02, 0.1, 0.25)


def sample_for(params, seed=0):
    n = bounds.solve_sample_size(params.epsilon, params.delta / 2, params.vc_dim)
    rng = np.random.default_rng(seed)
    m = np.abs(rng.normal(size=n))
    return QualitySample(m / 2.5, 1 / (1 + np.exp(-2 * m)))


def test_certify_outcomes():
    p = small_params()
    s = sample_for(p)
    kmax = compute_kappa_max(s, p)
    m = build_map(s, kmax)
    for kappa in (0.6, 0.7, kmax):
        assert certify(s, p, m.lookup(kappa), kappa).certified
    kappa = 0.7
    rho = m.lookup(kappa) + 1e-3
    res = certify(s, p, rho, kappa)
    assert res.status == "not_certified"
    assert res.witness.rho == brute_force_m(s, kappa)
    out = certify(s, p, 0.01, min(1.0, kmax + 1e-6))
    assert out.status == "out_of_range" and "joint" in out.note
    with pytest.raises(InconsistentParamsError):
        certify(QualitySample(s.rho[:10], s.kappa[:10]), p, 0.1, 0.6)


def test_certificate_round_trip_and_bounds(tmp_path):
    p = small_params()
    s = sample_for(p)
    m = build_map(s, compute_kappa_max(s, p))
    cert = emit_certificate(s, p, m, EXACT, shift_lambda=0.01)
    assert cert.bound == pytest.approx(0.08)
    assert cert.shift_bound == pytest.approx(0.03 / 0.24)
    assert cert.union_bound == min(1.0, m.size * 0.02)
    assert not cert.oracle_relative
    cert.save(tmp_path / "c.json")
    assert PagCertificate.load(tmp_path / "c.json").dumps() == cert.dumps()
    assert emit_certificate(s, p, m, ADVERSARIAL_UPPER).to_dict()["oracle_relative"] is True


def test_emit_rejects_inconsistent_inputs():
    p = small_params()
    s = sample_for(p)
    kmax = compute_kappa_max(s, p)
    m = build_map(s, kmax)
    with pytest.raises(InconsistentParamsError):
        emit_certificate(QualitySample(s.rho[:100], s.kappa[:100]), p, m, EXACT)
    too_high = RobustnessMap(m.kappas, m.rhos * 2, kmax)
    with pytest.raises(InconsistentParamsError):
        emit_certificate(s, p, too_high, EXACT)


def test_published_settings_sample_sizes():
    # delta/2 goes to the epsilon-net, delta/2 to the quantile
    pgd = CertificateParams(1e-4, 0.01, 0.01)
    ibp = CertificateParams(2.5e-3, 0.01, 0.05)
    assert abs(bounds.solve_sample_size(pgd.epsilon, pgd.delta / 2) - 989534) <= 1
    assert abs(bounds.solve_sample_size(ibp.epsilon, ibp.delta / 2) - 31635) <= 1
    assert bounds.guarantee_bound(pgd) == pytest.approx(0.01)
    assert bounds.guarantee_bound(ibp) == pytest.approx(0.05)
