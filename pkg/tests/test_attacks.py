import itertools
import logging

import numpy as np
import pytest

from conftest import rand_images, rand_params, tiny_arch
from fedadv.attacks import (
    AdversarialBatch,
    AttackConfig,
    attack_with_timing,
    bim,
    craft,
    fgsm,
    pgd,
    save_adversarial_pair,
)
from fedadv.crn import CrnConfig, CrnState, crn_update, zeros_state
from fedadv.datasets import load_fds1
from fedadv.model import dense, flatten, make_architecture
from fedadv.rng import derive_rng


def logistic_model(in_shape=(1, 1, 2), classes=2, seed=1):
    arch = make_architecture([flatten(), dense(classes)], in_shape)
    return arch, rand_params(arch, seed=seed)


def zero_weights(params):
    for layer in params.layers:
        for k in layer:
            layer[k][...] = 0.0
    return params


def test_config_validation_and_normalization():
    with pytest.raises(ValueError):
        AttackConfig(method="cw")
    with pytest.raises(ValueError):
        AttackConfig(eps=0.0)
    with pytest.raises(ValueError):
        AttackConfig(alpha=-0.01)
    with pytest.raises(ValueError):
        AttackConfig(iters=0)
    with pytest.raises(ValueError):
        AttackConfig(init="gaussian")
    # fgsm is single-step whatever iters says, and steps by eps
    cfg = AttackConfig(method="fgsm", eps=0.1, alpha=0.5, iters=7)
    assert cfg.iters == 1
    assert cfg.step_size == 0.1
    # per-method default inits
    assert AttackConfig(method="fgsm").init == "zero"
    assert AttackConfig(method="bim").init == "zero"
    assert AttackConfig(method="pgd").init == "random_uniform"
    assert AttackConfig(method="pgd", alpha=0.005).step_size == 0.005


def test_oversized_step_warns(caplog):
    with caplog.at_level(logging.WARNING):
        AttackConfig(method="pgd", eps=0.01, alpha=0.05)
    assert any("exceeds eps" in r.message for r in caplog.records)


def test_batch_invariant_enforcement():
    cfg = AttackConfig(method="pgd", eps=0.01, alpha=0.001)
    clean = np.full((1, 1, 2, 2), 0.5)
    with pytest.raises(ValueError):
        AdversarialBatch(clean + 0.02, clean, np.array([0]), cfg, 0.0, 0)
    with pytest.raises(ValueError):
        AdversarialBatch(clean + 0.6, clean + 0.59, np.array([0]), cfg, 0.0, 0)
    ok = AdversarialBatch(clean + 0.009, clean, np.array([0]), cfg, 0.0, 3)
    np.testing.assert_allclose(ok.perturbation, 0.009)


def test_zero_gradient_fgsm_is_a_noop():
    arch = tiny_arch()
    params = zero_weights(rand_params(arch))
    x = rand_images((3, 1, 8, 8))
    y = np.array([0, 1, 2])
    batch = fgsm(arch, params, x, y, AttackConfig(method="fgsm", eps=0.05))
    np.testing.assert_array_equal(batch.x_adv, x)


def test_fgsm_matches_logistic_closed_form():
    arch, params = logistic_model()
    w = params.layers[1]["w"]
    b = params.layers[1]["b"]
    x = np.array([0.4, 0.6]).reshape(1, 1, 1, 2)
    y = np.array([0])
    eps = 0.07

    z = x.reshape(1, 2) @ w + b
    p = np.exp(z - z.max())
    p /= p.sum()
    g_logits = p.copy()
    g_logits[0, 0] -= 1.0
    grad_x = (g_logits @ w.T).reshape(x.shape)

    want = np.clip(x + eps * np.sign(grad_x), 0.0, 1.0)
    batch = fgsm(arch, params, x, y, AttackConfig(method="fgsm", eps=eps))
    np.testing.assert_allclose(batch.x_adv, want, atol=1e-12)


def test_pgd_single_step_full_alpha_reduces_to_fgsm():
    arch = tiny_arch()
    params = rand_params(arch, seed=2)
    x = rand_images((4, 1, 8, 8), seed=2)
    y = np.array([0, 1, 2, 0])
    a = fgsm(arch, params, x, y, AttackConfig(method="fgsm", eps=0.05))
    b = craft(arch, params, x, y,
              AttackConfig(method="pgd", eps=0.05, alpha=0.05, iters=1,
                           init="zero"))
    np.testing.assert_array_equal(a.x_adv, b.x_adv)


def test_bim_is_pgd_with_zero_init():
    arch = tiny_arch()
    params = rand_params(arch, seed=3)
    x = rand_images((4, 1, 8, 8), seed=3)
    y = np.array([0, 1, 2, 0])
    cfg = AttackConfig(method="bim", eps=0.05, alpha=0.01, iters=5)
    a = bim(arch, params, x, y, cfg)
    b = craft(arch, params, x, y,
              AttackConfig(method="pgd", eps=0.05, alpha=0.01, iters=5,
                           init="zero"))
    np.testing.assert_array_equal(a.x_adv, b.x_adv)


def test_zero_alpha_returns_clamped_init():
    arch = tiny_arch()
    params = rand_params(arch, seed=4)
    x = rand_images((2, 1, 8, 8), seed=4)
    y = np.array([0, 1])
    zero = craft(arch, params, x, y,
                 AttackConfig(method="pgd", eps=0.05, alpha=0.0, iters=3,
                              init="zero"))
    np.testing.assert_array_equal(zero.x_adv, x)
    cfg = AttackConfig(method="pgd", eps=0.05, alpha=0.0, iters=3,
                       init="random_uniform", seed=11)
    rnd = craft(arch, params, x, y, cfg)
    init = derive_rng(11, "attack-init").uniform(-0.05, 0.05, size=x.shape)
    np.testing.assert_array_equal(rnd.x_adv, np.clip(x + init, 0.0, 1.0))


def test_random_init_is_seeded_and_in_ball():
    arch = tiny_arch()
    params = rand_params(arch, seed=5)
    x = rand_images((2, 1, 8, 8), seed=5)
    y = np.array([1, 2])
    cfg = AttackConfig(method="pgd", eps=0.03, alpha=0.01, iters=2, seed=9)
    a = pgd(arch, params, x, y, cfg)
    b = pgd(arch, params, x, y, cfg)
    np.testing.assert_array_equal(a.x_adv, b.x_adv)
    c = pgd(arch, params, x, y, AttackConfig(method="pgd", eps=0.03,
                                             alpha=0.01, iters=2, seed=10))
    assert not np.array_equal(a.x_adv, c.x_adv)
    assert np.max(np.abs(a.x_adv - x)) <= 0.03 + 1e-9


def test_pgd_approaches_best_vertex_on_four_pixels():
    """On a 4-pixel logistic task the optimal L-inf attack sits at one of the
    16 corners of the budget box; multi-step PGD should get within 5% of the
    best corner's loss."""
    arch, params = logistic_model(in_shape=(1, 2, 2), classes=2, seed=6)
    x = rand_images((1, 1, 2, 2), seed=6) * 0.4 + 0.3  # keep clamp inactive
    y = np.array([1])
    eps = 0.1

    def loss_of(images):
        from fedadv.model import loss_and_input_grad
        val, _ = loss_and_input_grad(arch, params, images, y)
        return val

    best = max(loss_of(x + eps * np.array(s).reshape(1, 1, 2, 2))
               for s in itertools.product((-1.0, 1.0), repeat=4))
    batch = pgd(arch, params, x, y,
                AttackConfig(method="pgd", eps=eps, alpha=eps / 4, iters=40,
                             init="zero"))
    assert loss_of(batch.x_adv) >= 0.95 * best


def test_crn_init_is_reprojected_to_attack_budget():
    arch = tiny_arch()
    params = rand_params(arch, seed=7)
    x = rand_images((2, 1, 8, 8), seed=7)
    y = np.array([0, 1])
    # accumulator built with a wider ball than the attack will allow
    state = CrnState(np.full(x.shape, 0.08) * np.sign(
        derive_rng(0, "s").normal(size=x.shape)), eps=0.1, window=5,
        rounds_applied=4)
    cfg = AttackConfig(method="pgd", eps=0.03, alpha=0.0, iters=1, init="crn")
    batch = craft(arch, params, x, y, cfg, crn_state=state)
    want = np.clip(x + np.clip(state.delta, -0.03, 0.03), 0.0, 1.0)
    np.testing.assert_array_equal(batch.x_adv, want)


def test_crn_init_preconditions():
    arch = tiny_arch()
    params = rand_params(arch)
    x = rand_images((2, 1, 8, 8))
    y = np.array([0, 1])
    cfg = AttackConfig(method="pgd", eps=0.05, alpha=0.01, iters=1, init="crn")
    with pytest.raises(ValueError):
        craft(arch, params, x, y, cfg)  # no state given
    state = CrnState(np.zeros((3, 1, 8, 8)), eps=0.05, window=5,
                     rounds_applied=1)
    with pytest.raises(ValueError):
        craft(arch, params, x, y, cfg, crn_state=state)  # wrong batch shape


def test_craft_validates_inputs():
    arch = tiny_arch()
    params = rand_params(arch)
    cfg = AttackConfig(method="pgd", eps=0.05, alpha=0.01, iters=1)
    with pytest.raises(ValueError):
        craft(arch, params, np.zeros((1, 8, 8)), np.array([0]), cfg)
    with pytest.raises(ValueError):
        craft(arch, params, np.full((1, 1, 8, 8), 1.5), np.array([0]), cfg)
    with pytest.raises(ValueError):
        craft(arch, params, np.full((1, 1, 8, 8), 0.5), np.array([0, 1]), cfg)


def test_invariants_hold_over_randomized_configs():
    arch = tiny_arch()
    g = np.random.default_rng(123)
    methods = ("fgsm", "bim", "pgd")
    for i in range(50):
        params = rand_params(arch, seed=int(g.integers(1 << 30)))
        x = g.uniform(0.0, 1.0, size=(3, 1, 8, 8))
        y = g.integers(0, 3, size=3)
        cfg = AttackConfig(method=methods[i % 3],
                           eps=float(g.uniform(0.005, 0.2)),
                           alpha=float(g.uniform(0.0, 0.05)),
                           iters=int(g.integers(1, 4)),
                           seed=i)
        batch = craft(arch, params, x, y, cfg)
        assert np.max(np.abs(batch.x_adv - x)) <= cfg.eps + 1e-9
        assert batch.x_adv.min() >= 0.0 and batch.x_adv.max() <= 1.0


def test_timing_is_positive_even_for_noops():
    arch = tiny_arch()
    params = rand_params(arch, seed=8)
    x = rand_images((2, 1, 8, 8), seed=8)
    y = np.array([0, 1])
    cfg = AttackConfig(method="pgd", eps=0.05, alpha=0.0, iters=1, init="zero")
    batch, seconds = attack_with_timing(arch, params, x, y, cfg)
    assert seconds == batch.seconds
    assert 0.0 < seconds < 60.0 and np.isfinite(seconds)


def test_model_round_recorded_on_batches():
    arch = tiny_arch()
    params = rand_params(arch, seed=9)
    params.round_tag = 13
    x = rand_images((2, 1, 8, 8), seed=9)
    batch = fgsm(arch, params, x, np.array([0, 1]),
                 AttackConfig(method="fgsm", eps=0.05))
    assert batch.model_round == 13


def test_adversarial_pair_saves_clean_and_attacked(tmp_path):
    arch = tiny_arch()
    params = rand_params(arch, seed=10)
    x = rand_images((4, 1, 8, 8), seed=10)
    y = np.array([0, 1, 2, 0])
    batch = fgsm(arch, params, x, y, AttackConfig(method="fgsm", eps=0.05))
    save_adversarial_pair(tmp_path / "demo", batch, class_count=3)
    clean = load_fds1(tmp_path / "demo_clean.fds1")
    adv = load_fds1(tmp_path / "demo_adv.fds1")
    np.testing.assert_array_equal(clean.labels, y)
    np.testing.assert_array_equal(adv.labels, y)
    np.testing.assert_allclose(clean.images, batch.x_clean, atol=1e-7)
    np.testing.assert_allclose(adv.images, batch.x_adv, atol=1e-7)
    assert np.max(np.abs(adv.images - clean.images)) <= 0.05 + 1e-6
