import numpy as np
import pytest

from lbsim.core.baselines import Baseline, BaselineKind, baseline_vector
from lbsim.core.flow_env import FlowEnv, mlu, offered_loads
from lbsim.core.safety import CbfConfig, CbfShield, is_safe, perturb, project
from lbsim.net.topology import load_topology
from lbsim.net.traffic import TrafficSample
from lbsim.opt.optimizer import min_mlu

from .conftest import two_path_document


def _random_split(topo, rng):
    return np.concatenate([rng.dirichlet(np.ones(len(t.paths))) for t in topo.tunnels])


def _random_demand(topo, rng, high):
    return rng.uniform(0.0, high, size=topo.n_tunnels)


@pytest.fixture
def lopsided():
    """s>a has capacity 5, s>b has 20."""
    return load_topology(two_path_document(c0=5.0, c1=20.0))


def _sample(demand):
    return TrafficSample(0, {"s-t": demand})


class TestIsSafe:

    def test_threshold_inclusive(self, two_path):
        assert is_safe(two_path, _sample(10.0), [1.0, 0.0], eta=1.0)
        assert not is_safe(two_path, _sample(10.0), [1.0, 0.0], eta=0.999)

    def test_abilene_ucmp_vs_ecmp(self, abilene, heavy_sample):
        ucmp = baseline_vector(Baseline(BaselineKind.UCMP), abilene)
        ecmp = baseline_vector(Baseline(BaselineKind.ECMP), abilene)
        assert is_safe(abilene, heavy_sample, ucmp, 0.999)
        assert not is_safe(abilene, heavy_sample, ecmp, 1.0)


class TestProject:
    """CBF projection."""

    def test_safe_proto_unchanged(self, two_path):
        out = project(two_path, _sample(5.0), [0.3, 0.7])
        assert not out.was_modified
        assert out.feasible_found
        assert out.candidates_evaluated == 0
        assert out.action.splits["s-t"] == (0.3, 0.7)

    def test_moves_traffic_off_overloaded_path(self, lopsided):
        out = project(lopsided, _sample(10.0), [0.8, 0.2], CbfConfig(seed=7))
        x = out.action.vector(lopsided)
        assert out.was_modified and out.feasible_found
        assert x[0] <= 0.5 + 1e-12
        assert out.l1_distance >= 0.6 - 1e-9
        assert out.mlu_before == pytest.approx(1.6)
        assert out.mlu_after <= 1.0
        assert out.l1_distance == pytest.approx(np.abs(x - [0.8, 0.2]).sum())

    def test_infeasible_fallback(self, two_path):
        out = project(two_path, _sample(40.0), [1.0, 0.0], CbfConfig(max_iter=5, n_solutions=50))
        assert not out.feasible_found
        assert out.mlu_after <= out.mlu_before
        assert out.candidates_evaluated == 250
        assert abs(out.action.vector(two_path).sum() - 1.0) < 1e-9

    def test_seeded(self, abilene, heavy_sample):
        ecmp = np.full(12, 0.5)
        a = project(abilene, heavy_sample, ecmp, CbfConfig(seed=3))
        b = project(abilene, heavy_sample, ecmp, CbfConfig(seed=3))
        np.testing.assert_array_equal(a.action.vector(abilene), b.action.vector(abilene))

    def test_abilene_result_is_safe(self, abilene, heavy_sample):
        out = project(abilene, heavy_sample, np.full(12, 0.5), CbfConfig(eta=0.999))
        assert out.feasible_found
        assert is_safe(abilene, heavy_sample, out.action, 0.999)
        report = FlowEnv(abilene, None).evaluate(heavy_sample, out.action)
        assert report.acceptance_rate == 1.0

    def test_only_overloaded_tunnels_touched(self, shared):
        # b-y sits on its private link and carries nothing over m>n
        sample = TrafficSample(0, {"a-x": 10.0, "b-y": 2.0})
        proto = np.array([0.0, 1.0, 1.0, 0.0])
        out = project(shared, sample, proto, CbfConfig(seed=1))
        x = out.action.vector(shared)
        assert out.feasible_found
        np.testing.assert_array_equal(x[2:], [1.0, 0.0])

    @pytest.mark.slow
    def test_finds_feasible_when_one_exists(self, lopsided):
        rng = np.random.default_rng(99)
        for _ in range(100):
            demand = rng.uniform(0.5, 24.0)
            x0 = rng.uniform()
            out = project(lopsided, _sample(demand), [x0, 1 - x0], rng=rng)
            assert out.feasible_found, (demand, x0)


class TestProjectProperties:
    """Randomized checks on Abilene with the default search parameters."""

    def test_idempotent_on_safe_inputs(self, abilene):
        rng = np.random.default_rng(8)
        checked = 0
        for _ in range(200):
            d = _random_demand(abilene, rng, 9.0)
            x = _random_split(abilene, rng)
            if not is_safe(abilene, d, x, 1.0):
                continue
            checked += 1
            out = project(abilene, d, x, rng=rng)
            assert not out.was_modified and out.l1_distance == 0.0
            np.testing.assert_array_equal(out.action.vector(abilene), x)
        assert checked > 50

    def test_projected_action_is_a_fixed_point(self, abilene, heavy_sample):
        rng = np.random.default_rng(9)
        for _ in range(20):
            first = project(abilene, heavy_sample, _random_split(abilene, rng), rng=rng)
            if not first.feasible_found:
                continue
            again = project(abilene, heavy_sample, first.action, rng=rng)
            assert not again.was_modified
            assert again.action == first.action

    @pytest.mark.slow
    def test_never_raises_mlu(self, abilene):
        rng = np.random.default_rng(10)
        for _ in range(1000):
            d = _random_demand(abilene, rng, 15.0)
            x = _random_split(abilene, rng)
            out = project(abilene, d, x, rng=rng)
            y = out.action.vector(abilene)
            before = mlu(abilene, offered_loads(abilene, d, x))
            after = mlu(abilene, offered_loads(abilene, d, y))
            assert after <= before + 1e-12
            assert out.mlu_after <= out.mlu_before
            if out.feasible_found:
                assert after <= 1.0 + 1e-12
            np.testing.assert_allclose(np.add.reduceat(y, abilene.offsets[:-1]), 1.0, atol=1e-9)
            assert (y >= 0).all()

    @pytest.mark.slow
    def test_finds_feasible_abilene_actions(self, abilene):
        rng = np.random.default_rng(11)
        trials = found = 0
        while trials < 1000:
            d = _random_demand(abilene, rng, 12.0)
            mu_star, _ = min_mlu(abilene, d)
            if mu_star > 1.0:
                continue
            trials += 1
            out = project(abilene, d, _random_split(abilene, rng), CbfConfig(), rng)
            found += int(out.feasible_found)
        assert found >= 990, f"feasible action found in {found} of {trials} trials"


class TestPerturb:

    def test_stays_on_simplex(self, abilene, heavy_sample, rng):
        for _ in range(50):
            x = np.concatenate([rng.dirichlet([1, 1]) for _ in range(6)])
            cand = perturb(abilene, heavy_sample, x, 0.3, rng).vector(abilene)
            assert (cand >= 0).all()

    def test_moves_at_most_radius(self, lopsided, rng):
        for _ in range(50):
            cand = perturb(lopsided, _sample(10.0), [0.8, 0.2], 0.3, rng).vector(lopsided)
            assert 0.5 <= cand[0] <= 0.8


class TestCbfShield:

    def test_counters(self, abilene, heavy_sample):
        shield = CbfShield(abilene, CbfConfig(), np.random.default_rng(0))
        shield(heavy_sample, baseline_vector(Baseline(BaselineKind.UCMP), abilene))
        shield(heavy_sample, np.full(12, 0.5))
        assert shield.stats() == {"calls": 2, "modified": 1, "fallbacks": 0}

    def test_eta_capped_by_rho_max(self, abilene):
        assert CbfShield(abilene, CbfConfig(eta=1.0), eta_cap=0.999).cfg.eta == 0.999
        assert CbfShield(abilene, CbfConfig(eta=0.9), eta_cap=0.999).cfg.eta == 0.9

    def test_config_not_mutated(self, abilene):
        cfg = CbfConfig(eta=1.0)
        CbfShield(abilene, cfg, eta_cap=0.999)
        assert cfg.eta == 1.0
