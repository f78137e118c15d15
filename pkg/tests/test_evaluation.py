import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pagcert.bounds import CertificateParams
from pagcert.certifier import RobustnessMap, build_map
from pagcert.errors import DatasetError, NoValidIndexError, ParameterError
from pagcert.evaluation import (
    LawCheck,
    PointMass,
    Uniform01,
    evaluate_on_test,
    monte_carlo_epsnet_check,
    monte_carlo_quantile_check,
)
from pagcert.quality import QualitySample
from pagcert.synthetic import SyntheticLinearWorld
from reference import breakpoints, naive_n_c, naive_table

PARAMS = CertificateParams(0.01, 0.05, 0.1)


def test_single_step_hand_count():
    m = RobustnessMap([0.9], [0.1], 0.9)
    test = QualitySample.from_points([(0.05, 0.95), (0.2, 0.95)])
    r = evaluate_on_test(m, test, PARAMS)
    assert r.p_hat == 0.5
    assert r.n_c == 0
    assert (0.9, 0.5, 1, 2) in r.per_kappa


def test_all_above_map_is_good():
    m = RobustnessMap([0.6, 0.8], [0.1, 0.2], 0.8)
    test = QualitySample.from_points([(0.1, 0.55), (0.3, 0.7), (0.25, 0.8), (0.5, 0.99)])
    r = evaluate_on_test(m, test, PARAMS)
    assert r.p_hat == 0.0 and r.n_c == 0 and r.good_run


def test_empty_test_set():
    with pytest.raises(DatasetError):
        evaluate_on_test(RobustnessMap([0.9], [0.1], 0.9), QualitySample([], []), PARAMS)


def test_good_run_thresholds():
    m = RobustnessMap([0.9], [0.5], 0.9)
    pts = [(0.6, 0.9)] * 95 + [(0.1, 0.9)] * 5
    r = evaluate_on_test(m, QualitySample.from_points(pts), CertificateParams(0.01, 0.05, 0.1))
    # p_hat = 0.05 <= 0.1 but n_c = 5 > 100 * 1 * 0.01
    assert r.p_hat == 0.05 and r.n_c == 5
    assert r.n_c_limit == pytest.approx(1.0)
    assert not r.good_run


@settings(max_examples=120, deadline=None)
@given(
    sample=st.lists(st.tuples(st.integers(0, 12), st.integers(0, 12)), min_size=1, max_size=40),
    test=st.lists(st.tuples(st.integers(0, 12), st.integers(0, 12)), min_size=1, max_size=40),
    q=st.integers(0, 12),
)
def test_matches_double_loop(sample, test, q):
    s = QualitySample.from_points([(r / 12, 0.5 + k / 24) for r, k in sample])
    pts = [(r / 12, 0.5 + k / 24) for r, k in test]
    kmax = 0.5 + q / 24
    m = build_map(s, kmax)
    r = evaluate_on_test(m, QualitySample.from_points(pts), PARAMS)
    ref = naive_table(m.steps, kmax, pts, breakpoints(m.steps, kmax, pts))
    assert r.per_kappa == ref
    assert r.p_hat == max((row[1] for row in ref), default=0.0)
    assert r.n_c == naive_n_c(m.steps, kmax, pts)
    assert all(0 <= num <= den for _, _, num, den in r.per_kappa)


def test_report_files(tmp_path):
    m = RobustnessMap([0.9], [0.1], 0.9)
    r = evaluate_on_test(m, QualitySample.from_points([(0.05, 0.95), (0.2, 0.95)]), PARAMS)
    r.write_json(tmp_path / "r.json")
    r.write_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "kappa,p_kappa,num,den"
    assert '"good_run"' in (tmp_path / "r.json").read_text()


def test_law_check_interval():
    c = LawCheck(0, 1000, 10)
    assert c.failure_rate == 0.0
    assert c.upper_99 == pytest.approx(1 - 0.01 ** (1 / 1000), rel=1e-9)


def test_quantile_check_small():
    c = monte_carlo_quantile_check(Uniform01(), 2000, 0.9, 0.05, 200, seed=1)
    assert c.failure_rate <= 0.05 + 3 * np.sqrt(0.05 * 0.95 / 200)


def test_quantile_check_point_mass_and_errors():
    assert monte_carlo_quantile_check(PointMass(0.5), 500, 0.9, 0.05, 20, seed=0).failures == 0
    with pytest.raises(NoValidIndexError):
        monte_carlo_quantile_check(Uniform01(), 5, 0.99, 0.01, 10, seed=0)
    with pytest.raises(ParameterError):
        monte_carlo_quantile_check(Uniform01(), 1000, 0.9, 0.01, 0, seed=0)


def test_quantile_check_deterministic_across_workers():
    a = monte_carlo_quantile_check(Uniform01(), 3000, 0.9, 0.2, 40, seed=5, workers=1)
    b = monte_carlo_quantile_check(Uniform01(), 3000, 0.9, 0.2, 40, seed=5, workers=2)
    assert a == b


def test_epsnet_check_edges():
    world = SyntheticLinearWorld()
    params = CertificateParams(0.05, 0.1, 0.25)
    assert monte_carlo_epsnet_check(world, params, 5, seed=0, witnesses=[]).failure_rate == 0.0
    with pytest.raises(ParameterError):
        monte_carlo_epsnet_check(world, params, 0, seed=0)
    c = monte_carlo_epsnet_check(world, params, 30, seed=0)
    assert c.failure_rate <= 0.1 + 3 * np.sqrt(0.1 * 0.9 / 30)
