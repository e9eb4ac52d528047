import json

import numpy as np
import pytest

from helpers import VARIANTS, records_from_rows, small_instance
from mmvam.design import build_design
from mmvam.emcore import ParamState, e_step, loglik, score_vector
from mmvam.errors import OracleCapError, ValidationError
from mmvam.ingest import build_dataset
from mmvam.simgen import (
    SimSpec,
    default_truth,
    dense_oracle_loglik,
    numeric_score,
    random_params,
    simulate_dataset,
    write_simulation,
)


@pytest.mark.parametrize("variant", VARIANTS)
def test_complete_data_single_pattern(variant):
    data, truth = simulate_dataset(SimSpec(n=40, T=3, m=4, variant=variant, seed=1))
    assert data.pattern_counts == {7: 40}
    assert data.n_obs == 120
    assert truth.S.shape[0] == 120


def test_deterministic():
    spec = SimSpec(n=50, T=3, m=5, seed=9, missing_rate=0.3)
    a, ta = simulate_dataset(spec)
    b, tb = simulate_dataset(spec)
    assert a.records == b.records and np.array_equal(ta.eta, tb.eta)
    c, _ = simulate_dataset(SimSpec(n=50, T=3, m=5, seed=10, missing_rate=0.3))
    assert c.records != a.records


def test_missingness_keeps_links():
    data, _ = simulate_dataset(SimSpec(n=200, T=3, m=5, seed=2, missing_rate=0.4))
    link_only = [r for r in data.records if r.score is None]
    assert link_only and all(r.teacher is not None for r in link_only)
    assert 0.3 < data.n_obs / (3 * 200) < 0.7


def test_negligible_teacher_variance():
    truth = default_truth("gp.r", 2)
    truth.gammas = [np.eye(len(g)) * 1e-8 for g in truth.gammas]
    data, t = simulate_dataset(SimSpec(n=300, T=2, m=5, truth=truth, seed=3))
    assert np.abs(t.eta).max() < 1e-3


def test_cohort_mixing_warns():
    with pytest.warns(UserWarning, match="not identified"):
        simulate_dataset(SimSpec(n=30, T=2, m=3, variant="vp", mixing="cohort"))


def test_school_mixing_and_validation():
    data, _ = simulate_dataset(SimSpec(n=200, T=3, m=12, mixing="school", n_schools=4, seed=5))
    assert data.n == 200
    with pytest.raises(ValidationError):
        SimSpec(missing_rate=1.0).validate()
    with pytest.raises(ValidationError):
        SimSpec(m=(3, 4), T=3).validate()
    with pytest.raises(ValidationError):
        SimSpec(m=2, mixing="school", n_schools=3).validate()


def test_marginal_covariance_spot_check():
    truth = default_truth("gp.r", 2)
    data, t = simulate_dataset(SimSpec(n=5000, T=2, m=100, truth=truth, seed=7))
    y = data.y.reshape(-1, 2)
    emp = np.cov(y.T)
    # each student meets two independent teachers; their grade-1 effects both reach year 2
    g1, g2 = truth.gammas
    model = np.array(
        [
            [g1[0, 0] + truth.sigma[0, 0], g1[1, 0] + truth.sigma[1, 0]],
            [g1[1, 0] + truth.sigma[1, 0], g1[1, 1] + g2[0, 0] + truth.sigma[1, 1]],
        ]
    )
    assert np.all(np.abs(emp - model) <= 0.1 * np.abs(model))


def test_write_simulation(tmp_path):
    data, truth = simulate_dataset(SimSpec(n=10, T=2, m=2, seed=1))
    data_path, truth_path = write_simulation(data, truth, tmp_path / "out")
    assert data_path.read_text().splitlines()[0] == "student,year,teacher,score"
    doc = json.loads(truth_path.read_text())
    assert doc["model"] == "gp.r" and ParamState.from_dict(doc["params"]).beta.tolist() == truth.params.beta.tolist()


class TestDenseOracle:
    def test_identity_V(self):
        rows = [("a", 1, "t", 1.5), ("b", 1, "t", -2.0), ("c", 1, "u", 0.5)]
        data = build_dataset(records_from_rows(rows), T=1)
        design = build_design(data, "gp.r")
        # Gamma ~ 0 leaves V = R = I to within 1e-300
        p = ParamState(np.zeros(1), [np.array([[1e-300]])], sigma=np.eye(1))
        assert dense_oracle_loglik(data, design, p) == pytest.approx(-0.5 * (1.5**2 + 4 + 0.25), abs=1e-14)

    def test_cap(self):
        data, design, params = small_instance("gp.r", 0, n=30, T=3, missing_rate=0.0)
        with pytest.raises(OracleCapError):
            dense_oracle_loglik(data, design, params, cap=50)
        with pytest.raises(OracleCapError):
            numeric_score(data, design, params, cap=50)

    def test_wrong_dataset(self):
        data, design, params = small_instance("gp.r", 0)
        other, *_ = small_instance("gp.r", 1)
        with pytest.raises(ValueError):
            dense_oracle_loglik(other, design, params)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_pairs_with_sparse_path(self, variant):
        data, design, params = small_instance(variant, 42)
        ref = dense_oracle_loglik(data, design, params)
        assert loglik(design, params) == pytest.approx(ref, rel=1e-9)
        num = numeric_score(data, design, params)
        ana = score_vector(design, params, e_step(design, params))
        assert np.abs(num - ana).max() <= 1e-5 * max(1.0, np.abs(num).max())


def test_random_params_are_valid():
    for variant in VARIANTS:
        _, design, _ = small_instance(variant, 3)
        p = random_params(design, np.random.default_rng(0))
        assert min(p.min_eigenvalues().values()) > 0
        e_step(design, p)
