import numpy as np
import pytest

from diffusionlab.engine import (DROP_EARLY, DROP_LATE, FULL, SWITCH, EvalCounter,
                                 GuidancePolicy, build_schedule, cfg_predict, ddim_step,
                                 eval_savings, export_trajectory, forward_noise,
                                 sample_trajectory, staged_predict)
from diffusionlab.errors import (AccountingError, ConfigurationError, OrderingError,
                                 ParameterError, ShapeError)
from diffusionlab.prompts import PromptSpec, encode_prompt, null_condition

COND = encode_prompt(PromptSpec(0, 0))
OTHER = encode_prompt(PromptSpec(3, 7))


def test_schedule_endpoints(sched):
    assert sched.alpha_bar[0] == 1.0
    assert sched.alpha_bar[1] == pytest.approx(0.9999, abs=1e-15)
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert sched.alpha_bar[1000] < 1e-3
    assert sched.ddim_steps == tuple(range(20, 1001, 20))


def test_schedule_matches_running_product(sched):
    ab = 1.0
    for i in range(1000):
        ab *= 1.0 - (1e-4 + (0.02 - 1e-4) * i / 999)
    assert sched.alpha_bar[1000] == pytest.approx(ab, rel=1e-10)


@pytest.mark.parametrize("args", [(1000, 0.02, 1e-4, 50), (1000, 0.0, 0.02, 50),
                                  (1000, 1e-4, 0.02, 0), (1000, 1e-4, 0.02, 30),
                                  (1000, 1e-4, 1.5, 50)])
def test_schedule_rejects_bad_ranges(args):
    with pytest.raises(ParameterError):
        build_schedule(*args)


def test_forward_noise_special_cases(sched):
    rng = np.random.default_rng(0)
    x0, e = rng.standard_normal((2, 3, 8, 8))
    assert np.array_equal(forward_noise(x0, 0, e, sched), x0)
    ab = sched.alpha_bar[300]
    np.testing.assert_allclose(forward_noise(x0, 300, 0 * e, sched), np.sqrt(ab) * x0)
    np.testing.assert_allclose(forward_noise(0 * x0, 300, e, sched), np.sqrt(1 - ab) * e)
    with pytest.raises(ShapeError):
        forward_noise(x0, 3, e[:2], sched)


def test_ddim_step_cases(sched):
    x = np.random.default_rng(1).standard_normal((3, 8, 8))
    out = ddim_step(x, 500, 480, np.zeros_like(x), sched)
    np.testing.assert_allclose(out, np.sqrt(sched.alpha_bar[480] / sched.alpha_bar[500]) * x)
    assert ddim_step(x, 400, 400, x, sched) is x
    with pytest.raises(OrderingError):
        ddim_step(x, 400, 420, x, sched)


def test_ddim_oracle_chain_recovers_x0(sched):
    rng = np.random.default_rng(2)
    for _ in range(10):
        x0, e = rng.standard_normal((2, 3, 16, 16))
        x = forward_noise(x0, 1000, e, sched)
        for r in range(sched.S, 0, -1):
            x = ddim_step(x, sched.t_of_rank(r), sched.prev_of_rank(r), e, sched)
        assert np.linalg.norm(x - x0) / np.linalg.norm(x0) <= 1e-6


def test_cfg_predict_limits(stub):
    x = np.random.default_rng(3).standard_normal((3, 8, 8)).astype(np.float32)
    ec, _ = stub.predict_noise(100, x, COND)
    eu, _ = stub.predict_noise(100, x, null_condition())
    np.testing.assert_allclose(cfg_predict(stub, 100, x, COND, w=1.0), ec, atol=1e-6)
    c = EvalCounter()
    np.testing.assert_array_equal(cfg_predict(stub, 100, x, COND, w=0.0, counter=c), eu)
    assert (c.cond, c.uncond) == (0, 1)


def test_cfg_scalar_arithmetic():
    class Scalar:
        def predict_noise(self, t, x, tokens):
            return (0.3 if tokens is COND else 0.1), None
    x = np.zeros((3, 8, 8))
    assert cfg_predict(Scalar(), 1, x, COND, w=7.5) == pytest.approx(1.6)


def test_drop_late_counts(stub, sched):
    c = EvalCounter()
    x = np.zeros((3, 8, 8), np.float32)
    pol = GuidancePolicy(7.5, 20, DROP_LATE)
    for r in range(sched.S, 0, -1):
        staged_predict(stub, r, x, COND, pol, sched, counter=c)
    assert (c.cond, c.uncond) == (30, 50)


def test_drop_late_zero_matches_cfg(stub, sched):
    x = np.random.default_rng(4).standard_normal((3, 8, 8)).astype(np.float32)
    for r in (1, 25, 50):
        a = staged_predict(stub, r, x, COND, GuidancePolicy(7.5, 0, DROP_LATE), sched)
        b = cfg_predict(stub, sched.t_of_rank(r), x, COND, 7.5)
        assert a.tobytes() == b.tobytes()


def test_policy_validation(stub, sched):
    x = np.zeros((3, 8, 8), np.float32)
    for pol in (GuidancePolicy(7.5, 51, DROP_LATE), GuidancePolicy(7.5, -1, DROP_LATE),
                GuidancePolicy(7.5, 0, "sideways")):
        with pytest.raises(ParameterError):
            staged_predict(stub, 1, x, COND, pol, sched)
    with pytest.raises(ParameterError):
        staged_predict(stub, 0, x, COND, GuidancePolicy(), sched)


def test_policy_branches():
    late, early = GuidancePolicy(5.0, 10, DROP_LATE), GuidancePolicy(5.0, 10, DROP_EARLY)
    assert late.branch(11) == (5.0, False) and late.branch(10) == (0.0, False)
    assert early.branch(11) == (0.0, False) and early.branch(10) == (5.0, False)
    assert GuidancePolicy(5.0, 10, SWITCH).branch(10) == (5.0, True)
    assert GuidancePolicy(5.0, 10, SWITCH).branch(11) == (5.0, False)


def test_trajectory_records_and_determinism(stub, sched):
    t1 = sample_trajectory(stub, sched, GuidancePolicy(), COND, seed=7)
    t2 = sample_trajectory(stub, sched, GuidancePolicy(), COND, seed=7)
    assert len(t1.records) == sched.S + 1
    assert t1.x0.tobytes() == t2.x0.tobytes()
    assert t1.x0.shape == (3, 8, 8)
    assert t1.total_evals == 2 * sched.S


def test_executed_passes_match_counts(stub, sched):
    traj = sample_trajectory(stub, sched, GuidancePolicy(7.5, 20, DROP_LATE), COND, seed=1)
    assert traj.total_evals == stub.calls == 80


def test_policy_equivalences(stub, sched):
    full = sample_trajectory(stub, sched, GuidancePolicy(), [COND, OTHER], seed=2)
    late0 = sample_trajectory(stub, sched, GuidancePolicy(7.5, 0, DROP_LATE), [COND, OTHER], seed=2)
    sw = sample_trajectory(stub, sched, GuidancePolicy(7.5, 25, SWITCH), [COND, OTHER],
                           cond2=[COND, OTHER], seed=2)
    assert full.x0.tobytes() == late0.x0.tobytes() == sw.x0.tobytes()


def test_switch_needs_cond2(stub, sched):
    with pytest.raises(ConfigurationError):
        sample_trajectory(stub, sched, GuidancePolicy(7.5, 10, SWITCH), COND)
    with pytest.raises(ConfigurationError):
        sample_trajectory(stub, sched, GuidancePolicy(), COND, cond2=OTHER)


def test_eval_savings(stub, sched):
    base = sample_trajectory(stub, sched, GuidancePolicy(), COND)
    late = sample_trajectory(stub, sched, GuidancePolicy(7.5, 20, DROP_LATE), COND)
    assert eval_savings(late, base) == pytest.approx(0.20, abs=0)
    assert eval_savings(base, base) == 0.0
    empty = sample_trajectory(stub, sched, GuidancePolicy(), COND)
    for r in empty.records:
        r.cond_evals = r.uncond_evals = 0
    with pytest.raises(AccountingError):
        eval_savings(late, empty)


def test_export_trajectory(stub, sched, tmp_path):
    traj = sample_trajectory(stub, build_schedule(S=5), GuidancePolicy(), COND, seed=4)
    export_trajectory(traj, tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert "meta.json" in names and "manifest.csv" in names
    x0 = np.fromfile(tmp_path / "x_0.f32", dtype="<f4").reshape(3, 8, 8)
    np.testing.assert_array_equal(x0, traj.x0)
    assert len([n for n in names if n.endswith(".f32")]) == 6
