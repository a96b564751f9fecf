import math

import numpy as np
import pytest

from uncseg import model as M
from uncseg import sampler as S
from uncseg import tensor as T
from uncseg.sampler import EXPLORATION, SAMPLING, SamplerConfig


def tiny_data(n=16, side=16, seed=0):
    r = np.random.default_rng(seed)
    images = r.random((n, 3, side, side)).astype(np.float32)
    labels = (images.mean(axis=1) > 0.5).astype(np.uint8)
    return images, labels


# ---------------------------------------------------------------- schedule

def test_lr_closed_forms():
    assert S.cyclical_lr(0, 100, 2, 0.1) == pytest.approx(0.1)
    assert S.cyclical_lr(25, 100, 2, 0.1) == pytest.approx(0.05)
    assert S.cyclical_lr(49, 100, 2, 0.1) < 1e-3
    assert S.cyclical_lr(50, 100, 2, 0.1) == pytest.approx(0.1)


def test_lr_periodic_and_monotone():
    total, cycles = 91, 3
    period = math.ceil(total / cycles)
    lrs = [S.cyclical_lr(s, total, cycles, 0.2) for s in range(total)]
    for s in range(total - period):
        assert lrs[s] == lrs[s + period]
    for s in range(total - 1):
        if (s + 1) % period:
            assert lrs[s + 1] < lrs[s]
        else:
            assert lrs[s + 1] == 0.2


def test_phases_and_snapshot_placement():
    cfg = SamplerConfig()
    assert [cfg.phase(e) for e in (0, 23, 24, 29)] == [EXPLORATION, EXPLORATION, SAMPLING, SAMPLING]
    assert cfg.sampling_epochs() == [24, 25, 26, 27, 28, 29]
    snaps = cfg.snapshot_epochs()
    assert len(snaps) == 4 and snaps[-1] == 29
    assert all(e in cfg.sampling_epochs() for e in snaps)
    assert snaps == sorted(set(snaps))
    gaps = np.diff(snaps)
    assert gaps.max() - gaps.min() <= 1


@pytest.mark.parametrize("epochs,s", [(10, 1), (10, 2), (50, 6), (550, 6), (550, 4)])
def test_snapshot_placement_general(epochs, s):
    cfg = SamplerConfig(epochs_per_cycle=epochs, snapshots_per_cycle=s)
    snaps = cfg.snapshot_epochs()
    assert len(snaps) == s and snaps[-1] == epochs - 1
    assert snaps[0] >= cfg.sampling_epochs()[0]


@pytest.mark.parametrize("kwargs", [dict(exploration_fraction=1.0), dict(exploration_fraction=0.0),
                                    dict(snapshots_per_cycle=0), dict(alpha=0.0), dict(alpha=1.5),
                                    dict(lr0=0.0), dict(temperature="cold"),
                                    dict(epochs_per_cycle=5, snapshots_per_cycle=3)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        SamplerConfig(**kwargs)


# ---------------------------------------------------------------- update rule

def test_step_reduces_to_sgd():
    r = np.random.default_rng(0)
    w, v = {"w": r.standard_normal(5)}, {"w": r.standard_normal(5)}
    g = {"w": r.standard_normal(5)}
    new_w, new_v = S.sgmcmc_step(w, v, g, 0.1, 1.0, 50, 0.0, EXPLORATION, r)
    np.testing.assert_allclose(new_v["w"], -0.1 / 50 * 50 * g["w"], rtol=1e-15)
    np.testing.assert_allclose(new_w["w"], w["w"] - 0.1 * g["w"], rtol=1e-14)


def test_step_fixed_point():
    w = {"w": np.array([1.0, -2.0])}
    z = {"w": np.zeros(2)}
    new_w, new_v = S.sgmcmc_step(w, z, z, 0.1, 0.9, 10, 0.0, EXPLORATION, np.random.default_rng(0))
    np.testing.assert_array_equal(new_w["w"], w["w"])
    np.testing.assert_array_equal(new_v["w"], 0)


def test_step_prior_and_momentum_terms():
    w, v, g = {"w": np.array([2.0])}, {"w": np.array([0.5])}, {"w": np.array([0.1])}
    lr, alpha, n, lam = 0.2, 0.9, 4, 0.5
    _, new_v = S.sgmcmc_step(w, v, g, lr, alpha, n, lam, EXPLORATION, np.random.default_rng(0))
    expected = (1 - alpha) * 0.5 - lr / n * (n * 0.1 + lam * 2.0)
    assert new_v["w"][0] == pytest.approx(expected, rel=1e-14)


@pytest.mark.parametrize("temperature,var", [("scaled", 2 * 0.9 * 0.01 / 10 / 10),
                                             ("unit", 2 * 0.9 * 0.01 / 10)])
def test_noise_variance(temperature, var):
    n = 200_000
    w, z = {"w": np.zeros(n)}, {"w": np.zeros(n)}
    _, v = S.sgmcmc_step(w, z, z, 0.01, 0.9, 10, 0.0, SAMPLING, np.random.default_rng(0), temperature)
    assert abs(v["w"].mean()) < 5 * math.sqrt(var / n)
    assert abs(v["w"].var() / var - 1) < 0.02


def test_no_noise_in_exploration_or_when_disabled():
    w, z = {"w": np.zeros(10)}, {"w": np.zeros(10)}
    rng = np.random.default_rng(0)
    assert np.all(S.sgmcmc_step(w, z, z, 0.1, 0.9, 10, 0.0, EXPLORATION, rng)[1]["w"] == 0)
    assert np.all(S.sgmcmc_step(w, z, z, 0.1, 0.9, 10, 0.0, SAMPLING, rng, noise=False)[1]["w"] == 0)


def test_step_rejects_non_finite():
    w, z = {"w": np.zeros(2)}, {"w": np.zeros(2)}
    with pytest.raises(S.NumericalError):
        S.sgmcmc_step(w, z, {"w": np.array([np.nan, 0.0])}, 0.1, 0.9, 10, 0.0,
                      EXPLORATION, np.random.default_rng(0))


# ---------------------------------------------------------------- toy oracle

def test_toy_standard_normal():
    res = S.toy_sampler_check((0, 0), np.eye(2))
    assert res.passed, res.report()
    assert np.max(np.abs(res.mean)) < 0.1
    assert np.all(np.abs(np.diag(res.cov) - 1) < 0.15)


def test_toy_shifted_diagonal():
    res = S.toy_sampler_check((2, -1), np.diag([1.0, 0.25]))
    assert res.passed, res.report()


def test_toy_degenerate_gradient_descent_fails():
    res = S.toy_sampler_check((0, 0), np.eye(2), S.ToyConfig(alpha=1.0, noise=False))
    assert res.mean_ok and not res.cov_ok and not res.passed
    assert np.all(np.diag(res.cov) < 1e-6)
    assert "FAIL" in res.report()


def test_toy_rejects_bad_covariance():
    with pytest.raises(ValueError):
        S.toy_sampler_check((0, 0), np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(ValueError):
        S.toy_sampler_check((0, 0), np.array([[1.0, 0.1], [0.0, 1.0]]))


def test_toy_seeded():
    a = S.toy_sampler_check((0, 0), np.eye(2), S.ToyConfig(samples=500))
    b = S.toy_sampler_check((0, 0), np.eye(2), S.ToyConfig(samples=500))
    assert a.report() == b.report()


# ---------------------------------------------------------------- training loop

def test_train_counts_and_order():
    arch = M.ArchConfig(side=16)
    images, labels = tiny_data()
    cfg = SamplerConfig(cycles=2, epochs_per_cycle=10, snapshots_per_cycle=4, batch_size=8,
                        exploration_fraction=0.5)
    ens, hist = S.train(arch, images, labels, cfg, seed=0)
    assert ens.M == 8
    assert [s.cycle for s in ens.snapshots] == [1, 1, 1, 1, 2, 2, 2, 2]
    keys = [(s.cycle, s.epoch) for s in ens.snapshots]
    assert keys == sorted(keys) and len(set(keys)) == 8
    for s in ens.snapshots:
        assert cfg.phase(s.epoch % cfg.epochs_per_cycle) == SAMPLING
    assert [r.snapshots for r in hist.epochs][-1] == 8
    # schedule restarts to lr0 exactly at the first epoch of cycle 2
    lrs = [r.lr for r in hist.epochs]
    assert lrs[0] == cfg.lr0 and lrs[cfg.epochs_per_cycle] == cfg.lr0
    assert all(lrs[i + 1] < lrs[i] for i in range(cfg.epochs_per_cycle - 1))


def test_train_log_csv():
    arch = M.ArchConfig(side=16)
    images, labels = tiny_data(n=8)
    cfg = SamplerConfig(cycles=1, epochs_per_cycle=5, snapshots_per_cycle=1)
    _, hist = S.train(arch, images, labels, cfg, seed=0)
    lines = hist.to_csv().splitlines()
    assert lines[0].split(",")[:6] == ["epoch", "cycle", "phase", "lr", "mean_loss", "snapshots_so_far"]
    assert len(lines) == 1 + 5 + 1 and lines[-1].startswith("# best_val_epoch=")


def test_sgd_equivalence_over_ten_steps():
    """alpha=1, lambda=0 and no noise must track an independent SGD loop."""
    arch = M.ArchConfig(side=16)
    images, labels = tiny_data(n=16)
    cfg = SamplerConfig(cycles=1, epochs_per_cycle=5, snapshots_per_cycle=1, batch_size=8,
                        alpha=1.0, prior_precision=0.0, noise=False, lr0=0.05)
    ens, _ = S.train(arch, images, labels, cfg, seed=3)

    # reference: w <- w - lr_t * grad(mean CE), same batches and schedule
    rng = np.random.default_rng(3)
    w = M.init_params(arch, 3)
    total, step = 10, 0
    for _ in range(5):
        order = rng.permutation(16)
        for idx in (order[:8], order[8:]):
            lr = cfg.lr0 / 2 * (math.cos(math.pi * step / total) + 1)
            _, g = T.value_and_grad(lambda p: T.nll_mean(M.forward(p, images[idx], arch), labels[idx]), w)
            w = {k: (w[k] - np.float32(lr) * g[k]).astype(np.float32) for k in w}
            step += 1
    assert step == 10
    for k in w:
        np.testing.assert_allclose(ens.snapshots[0].params[k], w[k], rtol=0, atol=1e-6)


def test_train_reproducible():
    arch = M.ArchConfig(side=16)
    images, labels = tiny_data()
    cfg = SamplerConfig(cycles=2, epochs_per_cycle=5, snapshots_per_cycle=1)
    a, _ = S.train(arch, images, labels, cfg, seed=5)
    b, _ = S.train(arch, images, labels, cfg, seed=5)
    c, _ = S.train(arch, images, labels, cfg, seed=6)
    assert a.id == b.id and a.id != c.id


def test_best_val_selection_keeps_one_snapshot():
    arch = M.ArchConfig(side=16)
    images, labels = tiny_data()
    cfg = S.sgd_config(SamplerConfig(cycles=1, epochs_per_cycle=6, snapshots_per_cycle=1))
    scores = iter([0.1, 0.4, 0.9, 0.3, 0.2, 0.5])
    ens, hist = S.train(arch, images, labels, cfg, seed=0, val=(images, labels),
                        val_score=lambda *a: next(scores))
    assert ens.M == 1 and hist.best_val_epoch == 2 and ens.snapshots[0].epoch == 2


def test_non_finite_loss_aborts():
    arch = M.ArchConfig(side=16)
    images, labels = tiny_data(n=8)
    cfg = SamplerConfig(cycles=1, epochs_per_cycle=5, snapshots_per_cycle=1)
    bad = lambda probs, ctx: T.weighted_sum(probs, np.nan)
    with pytest.raises(S.NumericalError):
        S.train(arch, images, labels, cfg, seed=0, loss_fn=bad)


def test_upto_cycle_and_ensemble_id():
    arch = M.ArchConfig(side=16)
    p = M.init_params(arch, 0)
    ens = S.PosteriorEnsemble(arch, [S.Snapshot(p, 1, 3, 0.1), S.Snapshot(p, 2, 8, 0.1)])
    assert ens.upto_cycle(1).M == 0 and ens.upto_cycle(2).M == 1 and ens.upto_cycle(3).M == 2
    assert len(ens.id) == 12
