import csv
import logging

import numpy as np
import pytest

from conftest import rand_params, tiny_arch
from fedadv.crn import CrnConfig
from fedadv.datasets import Partition, gen_synthetic, partition_noniid
from fedadv.federation import (
    FedConfig,
    add_gaussian_noise,
    aggregate,
    clip_params,
    crn_start_round,
    init_global,
    params_digest,
    run_federation,
    write_round_log,
)
from fedadv.metrics import clean_accuracy
from fedadv.model import (
    clone_params,
    dense,
    flatten,
    flatten_params,
    make_architecture,
    train_epochs,
    unflatten_params,
)
from fedadv.rng import derive_rng


def small_task(n=48, classes=3, size=8, noise=0.2, seed=0):
    d = gen_synthetic("bars", classes, n, (1, size, size), noise,
                      derive_rng(seed, "task"))
    return d


def small_cfg(**kw):
    base = dict(clients=2, rounds=2, local_epochs=1, lr=0.05, batch=16,
                client_noise_sd=0.0, server_noise_sd=0.0, seed=0)
    base.update(kw)
    return FedConfig(**base)


def scalar_model(value):
    arch = make_architecture([flatten(), dense(1)], (1, 1, 1))
    p = rand_params(arch)
    for layer in p.layers:
        for k in layer:
            layer[k][...] = value
    return p


# ---------------------------------------------------------------------------
# clip / noise / aggregate


def test_clip_below_bound_is_bit_exact_identity():
    arch = tiny_arch()
    w = rand_params(arch)
    norm = float(np.linalg.norm(flatten_params(w)))
    out = clip_params(w, 2.0 * norm)
    np.testing.assert_array_equal(flatten_params(out), flatten_params(w))


def test_clip_above_bound_halves_at_twice_the_bound():
    arch = tiny_arch()
    w = rand_params(arch)
    flat = flatten_params(w)
    c = float(np.linalg.norm(flat)) / 2.0
    out = clip_params(w, c)
    np.testing.assert_allclose(flatten_params(out), flat / 2.0, rtol=1e-15)


def test_clip_norm_never_exceeds_bound():
    arch = tiny_arch()
    g = np.random.default_rng(0)
    for i in range(20):
        w = rand_params(arch, seed=i)
        c = float(g.uniform(0.1, 5.0))
        out = clip_params(w, c)
        assert np.linalg.norm(flatten_params(out)) <= c + 1e-9
    with pytest.raises(ValueError):
        clip_params(w, 0.0)


def test_noise_moments_on_large_parameter_vector():
    arch = make_architecture([flatten(), dense(100)], (1, 10, 10))
    w = rand_params(arch)
    flat = flatten_params(w)
    assert flat.size >= 10_000
    noisy = add_gaussian_noise(w, 0.1, derive_rng(0, "n"))
    added = flatten_params(noisy) - flat
    assert abs(added.mean()) < 0.01
    assert abs(added.std() - 0.1) < 0.01


def test_zero_sd_noise_is_bit_exact():
    w = scalar_model(1.25)
    out = add_gaussian_noise(w, 0.0, derive_rng(0, "n"))
    np.testing.assert_array_equal(flatten_params(out), flatten_params(w))
    with pytest.raises(ValueError):
        add_gaussian_noise(w, -0.1, derive_rng(0, "n"))


def test_noise_streams_differ_between_clients_and_rounds():
    arch = tiny_arch()
    w = rand_params(arch)
    a = flatten_params(add_gaussian_noise(w, 0.1, derive_rng(0, "client-noise", 0, 1)))
    b = flatten_params(add_gaussian_noise(w, 0.1, derive_rng(0, "client-noise", 1, 1)))
    c = flatten_params(add_gaussian_noise(w, 0.1, derive_rng(0, "client-noise", 0, 2)))
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, c)
    a2 = flatten_params(add_gaussian_noise(w, 0.1, derive_rng(0, "client-noise", 0, 1)))
    np.testing.assert_array_equal(a, a2)


def test_aggregate_single_model_is_identity():
    w = scalar_model(3.5)
    out = aggregate([w], [1.0])
    np.testing.assert_array_equal(flatten_params(out), flatten_params(w))


def test_aggregate_hand_weighted_mean():
    out = aggregate([scalar_model(0.0), scalar_model(4.0)], [0.25, 0.75])
    np.testing.assert_array_equal(flatten_params(out), [3.0, 3.0])


def test_aggregate_matches_explicit_loop():
    arch = tiny_arch()
    models = [rand_params(arch, seed=i) for i in range(3)]
    p = np.array([0.2, 0.3, 0.5])
    out = aggregate(models, p)
    acc = np.zeros(flatten_params(models[0]).size)
    for w_i, m in zip(p, models):
        acc = acc + w_i * flatten_params(m)
    np.testing.assert_array_equal(flatten_params(out), acc)


def test_aggregate_validation():
    w = scalar_model(1.0)
    with pytest.raises(ValueError):
        aggregate([], [])
    with pytest.raises(ValueError):
        aggregate([w, w], [0.5])
    with pytest.raises(ValueError):
        aggregate([w, w], [0.5, 0.6])
    other = rand_params(tiny_arch())
    with pytest.raises(ValueError):
        aggregate([w, other], [0.5, 0.5])


def test_identical_models_average_to_themselves():
    w = rand_params(tiny_arch(), seed=4)
    out = aggregate([w, clone_params(w), clone_params(w)],
                    [1 / 3, 1 / 3, 1 / 3])
    np.testing.assert_allclose(flatten_params(out), flatten_params(w),
                               rtol=0, atol=1e-15)


# ---------------------------------------------------------------------------
# config and schedule


def test_fed_config_validation():
    with pytest.raises(ValueError):
        FedConfig(clients=0)
    with pytest.raises(ValueError):
        FedConfig(rounds=0)
    with pytest.raises(ValueError):
        FedConfig(lr=0.0)
    with pytest.raises(ValueError):
        FedConfig(clip_bound=-1.0)
    with pytest.raises(ValueError):
        FedConfig(sample_fraction=0.0)
    with pytest.raises(ValueError):
        FedConfig(adversary_id=3, clients=3)
    with pytest.raises(ValueError):
        FedConfig(rounds=5, beta=6)


def test_dp_arguments_are_accepted_but_flagged(caplog):
    with caplog.at_level(logging.WARNING):
        FedConfig(dp_epsilon=1.0, dp_delta=1e-5)
    assert any("dp_epsilon" in r.message for r in caplog.records)


def test_crn_start_round_schedule():
    assert crn_start_round(50, 5) == 46
    assert crn_start_round(15, 10) == 6
    assert crn_start_round(3, 10) == 1
    assert crn_start_round(50, 5, beta=46) == 46


def test_crn_start_round_beta_override_warns(caplog):
    with caplog.at_level(logging.WARNING):
        assert crn_start_round(50, 5, beta=10) == 10
    assert any("overrides" in r.message for r in caplog.records)


# ---------------------------------------------------------------------------
# full runs


def test_federation_of_one_replays_centralized_training():
    arch = tiny_arch()
    d = small_task()
    cfg = small_cfg(clients=1, rounds=3)
    part = Partition([np.arange(len(d))], np.array([1.0]))
    state = run_federation(cfg, arch, d, part)

    central = init_global(cfg, arch)
    rng = derive_rng(cfg.seed, "local-train")
    for _ in range(cfg.rounds):
        central, _ = train_epochs(arch, central, d.images, d.labels,
                                  cfg.local_epochs, cfg.lr, cfg.batch, rng)
    np.testing.assert_array_equal(flatten_params(state.global_params),
                                  flatten_params(central))


def test_symmetric_clients_produce_identical_trajectories():
    arch = tiny_arch()
    d = small_task()
    idx = np.arange(len(d))
    solo = run_federation(small_cfg(clients=1), arch, d,
                          Partition([idx], np.array([1.0])))
    twins = run_federation(small_cfg(clients=2), arch, d,
                           Partition([idx, idx.copy()], np.array([0.5, 0.5])))
    assert twins.global_digests == solo.global_digests
    # both clients logged identical local stats each round
    by_round = {}
    for row in twins.round_log:
        by_round.setdefault(row.round, []).append((row.train_loss, row.test_acc,
                                                   row.grad_norm))
    for round_rows in by_round.values():
        assert round_rows[0] == round_rows[1]


def test_federation_rejects_mismatched_partition():
    arch = tiny_arch()
    d = small_task()
    part = partition_noniid(d, 3, 0.0, derive_rng(0, "p"))
    with pytest.raises(ValueError):
        run_federation(small_cfg(clients=2), arch, d, part)


def test_crn_accumulation_preconditions():
    arch = tiny_arch()
    d = small_task()
    part = partition_noniid(d, 2, 0.0, derive_rng(0, "p"))
    test = small_task(n=8, seed=5)
    crn = (CrnConfig(window=2, inner_steps=1),)
    with pytest.raises(ValueError):  # no adversary
        run_federation(small_cfg(), arch, d, part, attack_test=test,
                       crn_configs=crn)
    with pytest.raises(ValueError):  # no test set
        run_federation(small_cfg(adversary_id=0), arch, d, part,
                       crn_configs=crn)
    with pytest.raises(ValueError):  # window wider than the run
        run_federation(small_cfg(adversary_id=0), arch, d, part,
                       attack_test=test,
                       crn_configs=(CrnConfig(window=9, inner_steps=1),))
    with pytest.raises(ValueError):  # duplicate windows
        run_federation(small_cfg(adversary_id=0), arch, d, part,
                       attack_test=test,
                       crn_configs=(CrnConfig(window=2), CrnConfig(window=2)))


def test_server_noise_gives_each_client_a_distinct_copy():
    arch = tiny_arch()
    d = small_task()
    part = partition_noniid(d, 2, 0.0, derive_rng(0, "p"))
    state = run_federation(small_cfg(server_noise_sd=0.05), arch, d, part)
    d0 = params_digest(state.client_params[0])
    d1 = params_digest(state.client_params[1])
    dg = params_digest(state.global_params)
    assert len({d0, d1, dg}) == 3
    assert state.client_params[0].round_tag == state.round


def test_round_log_contents_and_csv(tmp_path):
    arch = tiny_arch()
    d = small_task()
    part = partition_noniid(d, 2, 0.0, derive_rng(0, "p"))
    eval_set = small_task(n=24, seed=3)
    state = run_federation(small_cfg(rounds=3), arch, d, part,
                           eval_set=eval_set)
    assert [(r.round, r.client) for r in state.round_log] == [
        (t, i) for t in (1, 2, 3) for i in (0, 1)]
    assert len(state.global_digests) == 3

    path = tmp_path / "log.csv"
    write_round_log(state, path)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6
    assert float(rows[0]["train_loss"]) == state.round_log[0].train_loss
    assert rows[-1]["round"] == "3"


def test_round_checkpoints_written(tmp_path):
    arch = tiny_arch()
    d = small_task()
    part = partition_noniid(d, 2, 0.0, derive_rng(0, "p"))
    run_federation(small_cfg(rounds=2), arch, d, part,
                   round_checkpoint_dir=tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["global_round0001.fadv", "global_round0002.fadv"]


def test_client_subsampling_trains_a_subset():
    arch = tiny_arch()
    d = small_task(n=60)
    part = partition_noniid(d, 3, 0.0, derive_rng(0, "p"))
    state = run_federation(small_cfg(clients=3, sample_fraction=0.5), arch,
                           d, part)
    per_round = {}
    for row in state.round_log:
        per_round.setdefault(row.round, []).append(row.client)
    for clients in per_round.values():
        assert len(clients) == 2  # ceil(0.5 * 3)


def test_pinned_run_reaches_usable_accuracy(pinned):
    run = pinned.get(1)
    acc = clean_accuracy(pinned.arch, run["state"].global_params,
                         run["eval"].images, run["eval"].labels)
    assert acc >= 0.85
    last = [r.test_acc for r in run["state"].round_log if r.round == 15]
    assert np.mean(last) >= 0.85
