import numpy as np
import pytest

from lbsim.core.baselines import Baseline, BaselineKind, baseline_action, baseline_vector
from lbsim.core.flow_env import FlowEnv
from lbsim.errors import ActionError


class TestBaselines:
    """Heuristic split policies on Abilene."""

    def test_ecmp(self, abilene):
        np.testing.assert_array_equal(baseline_vector(Baseline(BaselineKind.ECMP), abilene),
                                      np.full(12, 0.5))

    def test_ucmp_follows_bottleneck_capacity(self, abilene):
        x = baseline_vector(Baseline(BaselineKind.UCMP), abilene)
        np.testing.assert_allclose(x, np.tile([2 / 3, 1 / 3], 6))

    def test_static_low_path(self, abilene):
        x = baseline_vector(Baseline(BaselineKind.STATIC, 1), abilene)
        np.testing.assert_array_equal(x, np.tile([0.0, 1.0], 6))

    def test_static_invalid_path(self, abilene):
        with pytest.raises(ActionError, match="Static path 5"):
            baseline_vector(Baseline(BaselineKind.STATIC, 5), abilene)

    def test_random_needs_rng(self, abilene):
        with pytest.raises(ActionError, match="rng"):
            baseline_vector(Baseline(BaselineKind.RANDOM), abilene)

    def test_random_uniform_on_simplex(self, abilene, rng):
        draws = np.array([baseline_vector(Baseline(BaselineKind.RANDOM), abilene, rng)
                          for _ in range(5000)])
        assert (draws >= 0).all()
        np.testing.assert_allclose(draws.reshape(-1, 6, 2).sum(axis=2), 1.0)
        assert abs(draws.mean() - 0.5) < 0.02

    def test_action_is_valid(self, abilene, heavy_sample):
        action = baseline_action(Baseline(BaselineKind.UCMP), abilene, heavy_sample)
        assert action.splits["1-5"] == pytest.approx((2 / 3, 1 / 3))

    def test_heavy_load_ranking(self, abilene, heavy_sample):
        env = FlowEnv(abilene, None)
        reports = {
            name: env.evaluate(heavy_sample, baseline_vector(Baseline.parse(name), abilene))
            for name in ("static", "ecmp", "ucmp")
        }
        assert reports["ucmp"].mlu == pytest.approx(0.9)
        assert reports["ecmp"].mlu == pytest.approx(1.35)
        assert reports["static"].mlu == pytest.approx(2.7)
        assert reports["ucmp"].acceptance_rate == 1.0
        assert (reports["static"].acceptance_rate < reports["ecmp"].acceptance_rate
                < reports["ucmp"].acceptance_rate)


class TestParse:

    @pytest.mark.parametrize("text,name", [("ECMP", "ecmp"), ("ucmp", "ucmp"),
                                           ("random", "random"), ("static", "static1")])
    def test_names(self, text, name):
        assert Baseline.parse(text).name == name

    def test_static_index(self):
        assert Baseline.parse("static", 0).name == "static0"

    def test_unknown(self):
        with pytest.raises(ActionError, match="Unknown baseline: lowest"):
            Baseline.parse("lowest")
