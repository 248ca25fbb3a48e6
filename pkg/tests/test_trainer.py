import numpy as np
import pytest

from metasep import autodiff as ad
from metasep import dsp, model, taskgen, trainer
from metasep.model import SeparatorConfig
from metasep.trainer import TrainConfig
from oracles import assert_fd_close, reference_adam_step

RNG = np.random.default_rng

MICRO = SeparatorConfig(enc_channels=4, enc_kernel=8, enc_stride=4,
                        bottleneck_channels=2, conv_channels=4, kernel=3,
                        blocks_per_stack=1, stacks=1)
SEG_LEN = 104  # aligns with MICRO's kernel/stride


class QuadraticTask:
    """sup = a (theta - u)^2, qry = b (theta - v)^2 over a 1-d parameter."""

    def __init__(self, a, u, b, v):
        self.a, self.u, self.b, self.v = a, u, b, v
        self.name = f"quad(a={a},u={u},b={b},v={v})"

    def support_loss(self, p):
        d = ad.add_constant(p["theta"], -self.u)
        return ad.scalar_mul(self.a, ad.mul(d, d))

    def query_loss(self, p):
        d = ad.add_constant(p["theta"], -self.v)
        return ad.scalar_mul(self.b, ad.mul(d, d))

    def adapted(self, theta, alpha):
        return theta - alpha * 2 * self.a * (theta - self.u)

    def maml_grad(self, theta, alpha):
        return 2 * self.b * (self.adapted(theta, alpha) - self.v) * (1 - 2 * self.a * alpha)

    def fomaml_grad(self, theta, alpha):
        return 2 * self.b * (self.adapted(theta, alpha) - self.v)


def theta_vec(value=0.0):
    return ad.ParamVector.from_arrays({"theta": np.array(float(value))})


def make_task(seed, accent="acc", n=SEG_LEN, same_everywhere=False):
    rng = RNG(seed)
    if same_everywhere:
        sa = rng.normal(size=n) * 0.3
        sb = rng.normal(size=n) * 0.3
        segs_a = (sa, sa.copy(), sa.copy())
        segs_b = (sb, sb.copy(), sb.copy())
        snr = np.full((3, 3), 2.0)
    else:
        segs_a = tuple(rng.normal(size=n) * 0.3 for _ in range(3))
        segs_b = tuple(rng.normal(size=n) * 0.3 for _ in range(3))
        snr = rng.uniform(0, 5, size=(3, 3))
    support = int(rng.integers(9))
    return taskgen.MetaTask(
        accent=accent, speakers=(f"s{seed}a", f"s{seed}b"),
        segments_a=segs_a, segments_b=segs_b,
        seg_indices_a=(0, 1, 2), seg_indices_b=(0, 1, 2),
        snr_grid=snr, support_index=support,
        query_indices=taskgen.MetaTask._disjoint_queries(support),
        noise_seed=int(rng.integers(2 ** 62)))


def make_task_sets(n_accents, tasks_per_accent, seed0=0, n=SEG_LEN, prefix="acc"):
    sets = []
    k = seed0
    for a in range(n_accents):
        tasks = []
        for _ in range(tasks_per_accent):
            tasks.append(make_task(k, accent=f"{prefix}{a:02d}", n=n))
            k += 1
        sets.append(taskgen.AccentTaskSet(accent=f"{prefix}{a:02d}", tasks=tasks))
    return sets


# ---------------------------------------------------------------------------
# inner loop on the quadratic oracle


def test_inner_adapt_quadratic_example():
    task = QuadraticTask(a=1.0, u=1.0, b=1.0, v=3.0)
    adapted = trainer.inner_adapt(theta_vec(0.0), task, alpha=0.1)
    assert adapted.prime["theta"].item() == pytest.approx(0.2, abs=1e-15)
    assert adapted.support_loss == pytest.approx(1.0)


def test_inner_adapt_alpha_zero_is_identity():
    task = QuadraticTask(a=2.0, u=-1.0, b=1.0, v=0.5)
    theta = theta_vec(0.7)
    adapted = trainer.inner_adapt(theta, task, alpha=0.0)
    assert adapted.prime["theta"].item() == 0.7


def test_inner_adapt_derivative_wrt_theta():
    task = QuadraticTask(a=1.0, u=1.0, b=1.0, v=3.0)
    adapted = trainer.inner_adapt(theta_vec(0.0), task, alpha=0.1)
    (d,) = ad.grad(adapted.prime["theta"], [adapted.leaves["theta"]])
    assert d.item() == pytest.approx(1 - 2 * 0.1, abs=1e-12)


def test_inner_adapt_rejects_non_finite_loss():
    class BadTask:
        name = "bad"

        def support_loss(self, p):
            with np.errstate(invalid="ignore"):
                return ad.log10(ad.add_constant(ad.mul(p["theta"], p["theta"]), -10.0))

        def query_loss(self, p):
            return p["theta"]

    with pytest.raises(trainer.TrainingDiverged, match="bad"):
        trainer.inner_adapt(theta_vec(0.0), BadTask(), alpha=0.1)


# ---------------------------------------------------------------------------
# meta gradients against closed forms


def test_maml_fomaml_frozen_example():
    task = QuadraticTask(a=1.0, u=1.0, b=1.0, v=3.0)
    theta = theta_vec(0.0)
    g_maml = trainer.meta_gradient_maml(theta, [task], alpha=0.1)
    g_fo = trainer.meta_gradient_fomaml(theta, [task], alpha=0.1)
    assert g_maml.view("theta") == pytest.approx(-4.48, abs=1e-12)
    assert g_fo.view("theta") == pytest.approx(-5.6, abs=1e-12)


@pytest.mark.parametrize("seed", range(25))
def test_quadratic_closed_forms_random_family(seed):
    rng = RNG(1000 + seed)
    a, b = rng.uniform(0.2, 3.0, size=2)
    u, v, theta0 = rng.uniform(-2, 2, size=3)
    alpha = rng.uniform(0.01, 0.3)
    task = QuadraticTask(a, u, b, v)
    theta = theta_vec(theta0)
    got_maml = trainer.meta_gradient_maml(theta, [task], alpha).view("theta")
    got_fo = trainer.meta_gradient_fomaml(theta, [task], alpha).view("theta")
    assert abs(got_maml - task.maml_grad(theta0, alpha)) <= 1e-8
    assert abs(got_fo - task.fomaml_grad(theta0, alpha)) <= 1e-8


def test_meta_gradient_sums_over_batch():
    tasks = [QuadraticTask(1.0, 1.0, 1.0, 3.0), QuadraticTask(0.5, -1.0, 2.0, 0.0)]
    theta = theta_vec(0.3)
    got = trainer.meta_gradient_maml(theta, tasks, alpha=0.05).view("theta")
    want = sum(t.maml_grad(0.3, 0.05) for t in tasks)
    assert got == pytest.approx(want, abs=1e-12)


def test_fomaml_maml_gap_shrinks_linearly_in_alpha():
    task = QuadraticTask(a=1.3, u=0.4, b=0.8, v=-1.0)
    theta = theta_vec(0.9)
    gaps = []
    for alpha in (1e-1, 1e-2, 1e-3):
        g_m = trainer.meta_gradient_maml(theta, [task], alpha).view("theta")
        g_f = trainer.meta_gradient_fomaml(theta, [task], alpha).view("theta")
        gaps.append(abs(g_m - g_f))
    assert gaps[0] > gaps[1] > gaps[2]
    # closed form: gap = |2 b (theta'-v)| * 2 a alpha, i.e. O(alpha)
    assert gaps[1] / gaps[0] == pytest.approx(0.1, rel=0.15)
    assert gaps[2] / gaps[1] == pytest.approx(0.1, rel=0.15)


def test_alpha_zero_meta_gradients_equal_pooled_query_gradient():
    sets = make_task_sets(2, 1)
    tasks = [trainer.SeparationTask(t, MICRO) for ts in sets for t in ts.tasks]
    theta = model.init_params(MICRO, seed=3)
    g_maml = trainer.meta_gradient_maml(theta, tasks, alpha=0.0)
    g_fo = trainer.meta_gradient_fomaml(theta, tasks, alpha=0.0)
    g_pool = trainer.query_pool_gradient(theta, tasks)
    np.testing.assert_allclose(g_maml.values, g_pool.values, rtol=0, atol=1e-12)
    np.testing.assert_allclose(g_fo.values, g_pool.values, rtol=0, atol=1e-12)


def test_meta_gradient_matches_finite_differences_on_micro_model():
    theta = model.init_params(MICRO, seed=4)
    sep = trainer.SeparationTask(make_task(41), MICRO)
    alpha = 0.01

    # all five mixtures must sit away from permutation ties, or the central
    # differences would straddle a branch flip
    for pair in [sep._support] + sep._queries:
        est = model.forward_separate(pair.mixture, theta, MICRO)
        l_id = -0.5 * (dsp.si_snr(pair.sources[0], est[0]) + dsp.si_snr(pair.sources[1], est[1]))
        l_sw = -0.5 * (dsp.si_snr(pair.sources[0], est[1]) + dsp.si_snr(pair.sources[1], est[0]))
        assert abs(l_id - l_sw) > 0.05

    analytic = trainer.meta_gradient_maml(theta, [sep], alpha)

    def meta_objective(values):
        pv = theta.replace(values)
        adapted = trainer.inner_adapt(pv, sep, alpha, create_graph=False)
        with ad.no_grad():
            return sep.query_loss(adapted.prime).item()

    rng = RNG(5)
    coords = rng.choice(theta.dim, size=60, replace=False)
    step = 1e-5
    for c in coords:
        vp = theta.values.copy()
        vp[c] += step
        vm = theta.values.copy()
        vm[c] -= step
        num = (meta_objective(vp) - meta_objective(vm)) / (2 * step)
        assert_fd_close(analytic.values[c], num, rtol=1e-4, atol=1e-7,
                        label=f"meta coord {c}")


# ---------------------------------------------------------------------------
# optimizer


def test_adam_zero_gradient_is_identity():
    theta = theta_vec(1.5)
    state = trainer.AdamState.zeros(1)
    new, state = trainer.adam_update(theta, theta.zeros_like(), state,
                                     lr=1e-3, weight_decay=0.0)
    assert new.values[0] == 1.5
    assert state.step == 1


def test_adam_first_step_magnitude():
    # with fresh moments the first update is ~lr * sign(g)
    theta = ad.ParamVector.from_arrays({"w": np.zeros(4)})
    g = theta.replace(np.array([3.0, -0.5, 10.0, -2.0]))
    new, _ = trainer.adam_update(theta, g, trainer.AdamState.zeros(4),
                                 lr=1e-3, weight_decay=0.0)
    np.testing.assert_allclose(new.values, -1e-3 * np.sign(g.values), rtol=1e-6)


def test_adam_matches_reference_implementation_over_sequence():
    rng = RNG(6)
    dim = 12
    theta = ad.ParamVector.from_arrays({"w": rng.normal(size=dim)})
    state = trainer.AdamState.zeros(dim)
    ref_theta = theta.values.copy()
    ref_m = np.zeros(dim)
    ref_v = np.zeros(dim)
    ref_t = 0
    for _ in range(25):
        g = rng.normal(size=dim)
        theta, state = trainer.adam_update(theta, theta.replace(g), state, lr=0.01,
                                           weight_decay=1e-5, beta1=0.9, beta2=0.999,
                                           eps=1e-8)
        ref_theta, ref_m, ref_v, ref_t = reference_adam_step(
            ref_theta, g, ref_m, ref_v, ref_t, lr=0.01, beta1=0.9, beta2=0.999,
            eps=1e-8, weight_decay=1e-5)
    np.testing.assert_array_equal(theta.values, ref_theta)


def test_adam_deterministic():
    theta = ad.ParamVector.from_arrays({"w": np.ones(3)})
    g = theta.replace(np.array([1.0, -2.0, 0.5]))
    a, _ = trainer.adam_update(theta, g, trainer.AdamState.zeros(3), lr=0.01)
    b, _ = trainer.adam_update(theta, g, trainer.AdamState.zeros(3), lr=0.01)
    assert np.array_equal(a.values, b.values)


def test_adam_rejects_non_finite_gradient():
    theta = theta_vec(0.0)
    bad = theta.replace(np.array([np.nan]))
    with pytest.raises(trainer.TrainingDiverged):
        trainer.adam_update(theta, bad, trainer.AdamState.zeros(1), lr=0.01)


# ---------------------------------------------------------------------------
# training loop


def test_one_epoch_full_batch_is_exactly_one_sgd_update():
    sets = make_task_sets(2, 1)
    total = sum(ts.tq for ts in sets)
    cfg = TrainConfig(mode="joint", epochs=1, meta_batch=total, seed=9,
                      outer_optimizer="sgd", outer_lr=1e-3, weight_decay=0.0)
    theta0 = model.init_params(MICRO, seed=9)
    result = trainer.train(sets, cfg, MICRO, init=theta0.copy())
    assert len(result.log) == 1

    tasks = [trainer.SeparationTask(t, MICRO) for ts in sets for t in ts.tasks]
    grad_vals, _ = trainer._joint_gradient(theta0, tasks)
    np.testing.assert_allclose(result.params.values, theta0.values - 1e-3 * grad_vals,
                               rtol=0, atol=1e-12)


def test_joint_training_monotonic_on_repeated_mixture():
    task = make_task(77, same_everywhere=True)
    sets = [taskgen.AccentTaskSet(accent="acc", tasks=[task])]
    cfg = TrainConfig(mode="joint", epochs=50, meta_batch=1, seed=1,
                      outer_lr=1e-3, weight_decay=0.0)
    result = trainer.train(sets, cfg, MICRO)
    losses = [row["train_loss"] for row in result.log]
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0] - 1.0


def test_single_joint_step_descends_at_small_lr():
    task = make_task(78)
    sets = [taskgen.AccentTaskSet(accent="acc", tasks=[task])]
    theta0 = model.init_params(MICRO, seed=2)
    sep = trainer.SeparationTask(task, MICRO)
    with ad.no_grad():
        before = sep.pooled_loss(trainer._const_tensors(theta0)).item()
    cfg = TrainConfig(mode="joint", epochs=1, meta_batch=1, seed=2,
                      outer_lr=1e-4, weight_decay=0.0)
    result = trainer.train(sets, cfg, MICRO, init=theta0.copy())
    with ad.no_grad():
        after = sep.pooled_loss(trainer._const_tensors(result.params)).item()
    assert after < before


@pytest.mark.parametrize("mode", ["fomaml", "maml"])
def test_meta_training_runs_and_logs(mode):
    sets = make_task_sets(2, 1)
    cfg = TrainConfig(mode=mode, epochs=2, meta_batch=2, seed=3, inner_lr=0.01)
    result = trainer.train(sets, cfg, MICRO, dev_sets=make_task_sets(1, 1, seed0=50))
    assert not result.aborted
    assert len(result.log) == 2
    for row in result.log:
        assert row["mode"] == mode
        assert np.isfinite(row["train_loss"])
        assert row["dev_si_snri"] is not None
        assert row["wall_seconds"] > 0


def test_train_aborts_with_last_good_params(monkeypatch, tmp_path):
    sets = make_task_sets(2, 1)
    calls = {"n": 0}
    real = trainer._meta_task_gradient

    def flaky(theta, task, alpha, second_order):
        calls["n"] += 1
        if calls["n"] > 3:
            raise trainer.TrainingDiverged("synthetic blowup")
        return real(theta, task, alpha, second_order)

    monkeypatch.setattr(trainer, "_meta_task_gradient", flaky)
    cfg = TrainConfig(mode="fomaml", epochs=3, meta_batch=1, seed=4)
    result = trainer.train(sets, cfg, MICRO, out_dir=tmp_path)
    assert result.aborted
    assert "synthetic blowup" in result.reason
    assert np.all(np.isfinite(result.params.values))
    params, _, extra = model.load_checkpoint(tmp_path / "checkpoint.msep")
    assert extra["aborted"] is True
    assert np.array_equal(params.values, result.params.values)


def test_train_writes_checkpoint_and_log(tmp_path):
    sets = make_task_sets(1, 2)
    cfg = TrainConfig(mode="joint", epochs=2, meta_batch=2, seed=5)
    result = trainer.train(sets, cfg, MICRO, out_dir=tmp_path)
    params, cfg_loaded, extra = model.load_checkpoint(result.checkpoint_path)
    assert extra["mode"] == "joint"
    assert extra["train_accents"] == ["acc00"]
    assert cfg_loaded == MICRO
    log_lines = (tmp_path / "train_log.jsonl").read_text().strip().split("\n")
    assert len(log_lines) == 2
    import json
    row = json.loads(log_lines[0])
    assert set(row) == {"epoch", "mode", "train_loss", "dev_si_snri", "wall_seconds"}


def test_training_reproducible_bit_exact(tmp_path):
    sets = make_task_sets(2, 1)
    cfg = TrainConfig(mode="fomaml", epochs=2, meta_batch=2, seed=6)
    r1 = trainer.train(sets, cfg, MICRO, out_dir=tmp_path / "a")
    r2 = trainer.train(sets, cfg, MICRO, out_dir=tmp_path / "b")
    assert np.array_equal(r1.params.values, r2.params.values)
    assert (tmp_path / "a" / "checkpoint.msep").read_bytes() == \
        (tmp_path / "b" / "checkpoint.msep").read_bytes()


def test_train_rejects_empty_task_sets():
    with pytest.raises(ValueError):
        trainer.train([], TrainConfig(mode="joint"), MICRO)


def test_config_rejects_bad_mode_and_lr():
    with pytest.raises(ValueError):
        TrainConfig(mode="magic")
    with pytest.raises(ValueError):
        TrainConfig(mode="maml", inner_lr=0.0)


# ---------------------------------------------------------------------------
# one-shot adaptation


def test_finetune_zero_beta_changes_nothing():
    theta = model.init_params(MICRO, seed=7)
    res = trainer.finetune_adapt(theta, make_task(90), beta_ft=0.0, model_config=MICRO)
    assert np.array_equal(res.adapted.values, theta.values)
    assert res.query_si_snri_post == res.query_si_snri_pre
    assert res.support_loss_post == res.support_loss_pre


def test_finetune_matches_inner_adapt_algebra():
    theta = model.init_params(MICRO, seed=8)
    task = make_task(91)
    beta = 0.02
    res = trainer.finetune_adapt(theta, task, beta_ft=beta, model_config=MICRO)
    adapted = trainer.inner_adapt(theta, trainer.SeparationTask(task, MICRO),
                                  beta, create_graph=False)
    np.testing.assert_array_equal(res.adapted.values, adapted.to_vector(theta).values)
    assert res.support_loss_pre == adapted.support_loss


def test_finetune_reduces_support_loss_at_small_step():
    theta = model.init_params(MICRO, seed=9)
    res = trainer.finetune_adapt(theta, make_task(92), beta_ft=1e-4, model_config=MICRO)
    assert res.support_loss_post < res.support_loss_pre
