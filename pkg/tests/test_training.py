import math

import numpy as np
import pytest

from trc import dynamics as dyn
from trc import oracle as orc
from trc import training as trn
from trc.autodiff import Tape, Tensor, numerical_grad, relative_error
from trc.model import ForwardRecord, Normalizer, TRCModel, TrcConfig

TINY = dict(d_z=8, d_h=16, L=1, heads=2, K=2, n=1)


def record_with_costs(costs, u_final):
    costs = np.atleast_2d(np.asarray(costs, dtype=float))
    u = Tensor(u_final)
    K = costs.shape[1] - 1
    return ForwardRecord(controls=[u] * (K + 1), costs=[Tensor(costs[:, k]) for k in range(K + 1)],
                         latents=[], errors=[], residuals=[u] * K)


def cheap_samples(n, seed=0, T=100):
    problem = dyn.vdp_problem(T=T)
    x0 = orc.sample_initial_states(problem, n, np.random.default_rng(seed))
    u, J, _ = orc.solve_batch(problem, x0, orc.OracleConfig(max_iters=40, restarts=1))
    return problem, [orc.Sample(x0[i], np.zeros(2), u[i], float(J[i])) for i in range(n)]


# -- loss ---------------------------------------------------------------------------
def test_lambda_zero_is_behavior_cloning():
    rng = np.random.default_rng(0)
    u, us = rng.normal(size=(2, 5, 1)), rng.normal(size=(2, 5, 1))
    rec = record_with_costs([[10, 7, 5, 4], [3, 2, 1, 1]], u)
    norm = Normalizer.identity(2, 1)
    loss, ctl, reward = trn.process_supervision_loss(rec, us, 0.0, norm)
    assert loss.item() == np.mean((u - us) ** 2)
    assert ctl == loss.item() and reward == 0.0


def test_improvement_term_arithmetic():
    u = np.zeros((1, 4, 1))
    rec = record_with_costs([[10.0, 7.0, 5.0, 5.0]], u)
    loss, _, reward = trn.process_supervision_loss(rec, u, 0.1, Normalizer.identity(2, 1), K=3)
    assert reward == pytest.approx(0.25, abs=1e-15)
    assert loss.item() == pytest.approx(-0.025, abs=1e-15)


def test_perfect_and_flat_gives_zero_loss():
    u = np.ones((3, 4, 1))
    rec = record_with_costs(np.full((3, 4), 2.0), u)
    loss, _, _ = trn.process_supervision_loss(rec, u, 0.5, Normalizer.identity(2, 1))
    assert loss.item() == 0.0


def test_zero_initial_cost_contributes_nothing():
    u = np.zeros((2, 4, 1))
    rec = record_with_costs([[0.0, 0.0, 0.0, 0.0], [10.0, 7.0, 5.0, 5.0]], u)
    _, _, reward = trn.process_supervision_loss(rec, u, 0.1, Normalizer.identity(2, 1), K=3)
    assert reward == pytest.approx(0.125)


def test_nan_loss_raises_with_diagnostics():
    u = np.zeros((2, 4, 1))
    rec = record_with_costs([[1.0, np.nan, 1.0, 1.0], [1.0, 1.0, 1.0, 1.0]], u)
    with pytest.raises(trn.TrainingError, match=r"rows=\[0\]"):
        trn.process_supervision_loss(rec, u, 0.1, Normalizer.identity(2, 1), K=3)


def test_loss_gradient_vs_fd_on_tiny_config():
    problem = dyn.vdp_problem(T=5)
    model = TRCModel(TrcConfig.for_problem(problem, **TINY), seed=4)
    rng = np.random.default_rng(5)
    x0 = rng.uniform(-2, 2, (3, 2))
    u_star = rng.uniform(-1, 1, (3, 5, 1))

    def loss_value():
        rec = model.forward(problem, x0)
        return trn.process_supervision_loss(rec, u_star, 0.5, model.normalizer)[0]

    assert np.abs(model.forward(problem, x0).controls_array()).max() < 1.9  # clip inactive
    model.zero_grad()
    with Tape() as tape:
        loss = loss_value()
    tape.backward(loss)
    for name, p in model.params.items():
        original = p.data.copy()

        def f(v):
            p.data = v
            return loss_value().item()

        fd = numerical_grad(f, original, 1e-6)
        p.data = original
        assert relative_error(p.grad, fd) < 1e-4, name


# -- metric ------------------------------------------------------------------------
def test_improvement_metric_examples():
    assert trn.improvement_metric([10, 7, 5]) == pytest.approx(0.25)
    assert trn.improvement_metric(np.full((4, 4), 3.0)) == 0.0
    assert trn.improvement_metric([[10, 7, 5, 1]], K=3) == pytest.approx(0.25)


def test_improvement_metric_scale_invariant():
    c = np.random.default_rng(0).uniform(1, 10, (5, 4))
    s = np.array([1.0, 3.0, 0.01, 100.0, 7.0])[:, None]
    assert trn.improvement_metric(c) == pytest.approx(trn.improvement_metric(c * s), rel=1e-12)


def test_improvement_metric_skips_zero_cost_samples():
    assert trn.improvement_metric([[0, 0, 0], [10, 7, 5]]) == pytest.approx(0.25)


# -- optimizer ---------------------------------------------------------------------
def test_adam_first_step():
    w = Tensor([1.0], requires_grad=True)
    opt = trn.AdamW({"w": w}, lr=0.1, weight_decay=0.0)
    opt.step({"w": np.array([1.0])})
    assert w.data[0] == pytest.approx(0.9, abs=1e-6)


def test_weight_decay_is_decoupled():
    w = Tensor([2.0], requires_grad=True)
    opt = trn.AdamW({"w": w}, lr=0.1, weight_decay=0.5)
    opt.step({"w": np.array([0.0])})
    assert w.data[0] == pytest.approx(2.0 * (1 - 0.05))


def test_clip_scales_to_unit_norm():
    g = [np.array([3.0]), np.array([4.0])]
    clipped, norm = trn.clip_grad_norm(g, 1.0)
    assert norm == 5.0
    np.testing.assert_allclose(np.concatenate(clipped), [0.6, 0.8])
    rng = np.random.default_rng(1)
    for _ in range(20):
        gs = [rng.normal(scale=10, size=s) for s in [(3, 4), (5,)]]
        c, _ = trn.clip_grad_norm(gs, 1.0)
        assert math.sqrt(sum(np.sum(x * x) for x in c)) <= 1.0 + 1e-12


def test_cosine_schedule_endpoints():
    assert trn.cosine_lr(1e-3, 0, 100) == 1e-3
    assert trn.cosine_lr(1e-3, 99, 100) == pytest.approx(0.0, abs=1e-18)
    assert trn.cosine_lr(1e-3, 50, 101) == pytest.approx(5e-4)


def test_non_finite_gradient_skips_step():
    w = Tensor([1.0], requires_grad=True)
    cfg = trn.TrainConfig()
    opt = trn.AdamW({"w": w})
    applied, _ = trn.adamw_step({"w": w}, {"w": np.array([np.nan])}, cfg, 0, opt, 10)
    assert not applied and w.data[0] == 1.0 and opt.t == 0


def test_train_config_validation():
    with pytest.raises(ValueError):
        trn.TrainConfig(lam=-0.1)
    with pytest.raises(ValueError):
        trn.TrainConfig(grad_clip_norm=0.0)
    rc = trn.TrainConfig.for_problem(dyn.rocket_problem())
    assert rc.lam == 0.5 and rc.epochs == 200
    assert trn.TrainConfig.for_problem(dyn.vdp_problem()).lam == 0.1


# -- loop ----------------------------------------------------------------------------
def test_split_is_seeded_and_disjoint():
    a, b = trn.split_indices(100, 0.1, 3)
    a2, b2 = trn.split_indices(100, 0.1, 3)
    assert len(b) == 10 and len(a) == 90
    assert not set(a) & set(b)
    assert np.array_equal(a, a2) and np.array_equal(b, b2)


def test_training_is_deterministic(tmp_path):
    problem, samples = cheap_samples(12, T=20)
    mc = TrcConfig.for_problem(problem, **TINY)
    tc = trn.TrainConfig(epochs=2, batch_size=4, seed=9)
    h1 = trn.train(problem, samples, mc, tc, out_dir=tmp_path / "a").history
    h2 = trn.train(problem, samples, mc, tc, out_dir=tmp_path / "b").history
    assert [m.total_loss for m in h1] == [m.total_loss for m in h2]
    assert (tmp_path / "a" / "training_metrics.csv").read_bytes() == (tmp_path / "b" / "training_metrics.csv").read_bytes()
    for name in ("best.ckpt", "final.ckpt"):
        assert (tmp_path / "a" / name).is_file()


def test_training_reduces_loss():
    problem, samples = cheap_samples(8, T=20)
    mc = TrcConfig.for_problem(problem, d_z=16, d_h=32, L=1, heads=2, K=2, n=1)
    tc = trn.TrainConfig(epochs=60, batch_size=8, learning_rate=3e-3, val_fraction=0.0)
    h = trn.train(problem, samples, mc, tc).history
    assert h[-1].control_loss < 0.2 * h[0].control_loss


def test_divergence_aborts_with_partial_artifacts(tmp_path, monkeypatch):
    problem, samples = cheap_samples(4, T=20)

    def nan_loss(*args, **kwargs):
        raise trn.TrainingError("non-finite loss")

    monkeypatch.setattr(trn, "process_supervision_loss", nan_loss)
    mc = TrcConfig.for_problem(problem, **TINY)
    tc = trn.TrainConfig(epochs=10, batch_size=4, val_fraction=0.0)
    with pytest.raises(trn.DivergenceError):
        trn.train(problem, samples, mc, tc, out_dir=tmp_path)
    assert (tmp_path / "final.ckpt").is_file()


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        trn.train(dyn.vdp_problem(), [], TrcConfig.for_problem(dyn.vdp_problem()), trn.TrainConfig())


# -- evaluation ------------------------------------------------------------------------
def test_oracle_controls_give_unit_cost_ratio():
    problem, samples = cheap_samples(5, T=20)
    rep = trn.controls_report(problem, samples, np.stack([s.u_star for s in samples]))
    assert rep["cost_ratio"] == 1.0


def test_rocket_report_fields():
    problem = dyn.rocket_problem()
    x0 = orc.sample_initial_states(problem, 2, np.random.default_rng(0))
    u, J, _ = orc.solve_batch(problem, x0, orc.OracleConfig(max_iters=20, restarts=1, penalty_rounds=1))
    samples = [orc.Sample(x0[i], np.zeros(7), u[i], float(J[i])) for i in range(2)]
    rep = trn.controls_report(problem, samples, u)
    assert rep["fuel_ratio"] == 1.0
    assert rep["thrust_in_bounds"]


def test_untrained_model_report():
    problem, samples = cheap_samples(6, T=20)
    model = TRCModel(TrcConfig.for_problem(problem, **TINY), seed=1)
    rep = trn.evaluate(model, problem, samples)
    assert rep["cost_ratio"] > 1.0
    assert len(rep["mean_cost_per_iteration"]) == 3
    assert len(rep["median_residual_norm"]) == 2
    assert 0.0 <= rep["monotone_fraction"] <= 1.0
    assert np.isfinite(rep["latent_collapse_ratio"])


def test_evaluate_dimension_mismatch():
    problem, samples = cheap_samples(2, T=20)
    model = TRCModel(TrcConfig.for_problem(dyn.vdp_problem(T=10), **TINY))
    with pytest.raises(ValueError):
        trn.evaluate(model, problem, samples)
