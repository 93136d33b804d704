import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flats import data as D
from flats import federated as F
from flats import nn
from flats.attacks import AttackConfig
from flats.errors import ConfigError, InputError

from reference import fedavg_oracle

ARCH = nn.small_cnn((1, 8, 8), 3, (4,), 8)


def tiny_data(n_per_class=14, seed=0):
    return D.synth_dataset(seed, n_per_class, n_classes=3, height=8, width=8, grid=2)


def random_params(rng, arch=ARCH):
    return nn.ParameterSet((name, rng.normal(size=shape).astype(np.float32)) for name, shape, _ in arch.param_specs())


# ---------------------------------------------------------------- schedulers


def test_method1_exact_count_every_round():
    rng = np.random.default_rng(0)
    for _ in range(100):
        sel = F.select_round_clients(rng, 5, 4)
        adv = F.plan_adversaries_method1(rng, sel, 3)
        assert len(sel) == 4 and len(set(sel)) == 4
        assert len(adv) == 3 and set(adv) <= set(sel)


def test_method2_zero_adversary_rate():
    rng = np.random.default_rng(1)
    fixed = F.plan_adversaries_method2(rng, 5, 1)
    zero = sum(not set(F.select_round_clients(rng, 5, 4)) & set(fixed) for _ in range(2000))
    assert abs(zero / 2000 - 0.2) < 0.03


def test_selection_is_uniform():
    rng = np.random.default_rng(2)
    counts = np.zeros(5)
    for _ in range(2000):
        counts[F.select_round_clients(rng, 5, 2)] += 1
    np.testing.assert_allclose(counts / 2000, 0.4, atol=0.04)


def test_scheduler_rejects_impossible_counts():
    with pytest.raises(ConfigError):
        F.plan_adversaries_method1(np.random.default_rng(0), [0, 1], 3)
    with pytest.raises(ConfigError):
        F.plan_adversaries_method2(np.random.default_rng(0), 3, 4)


@pytest.mark.parametrize("abr,batches,expected", [
    (0.0, 7, 0), (0.5, 7, 4), (1.0, 7, 7), (0.3, 10, 3), (0.1, 1, 1), (0.5, 1, 1), (0.25, 8, 2),
])
def test_adversarial_batch_count(abr, batches, expected):
    assert F.adversarial_batch_count(abr, batches) == expected


def test_fed_config_validation():
    with pytest.raises(ConfigError) as err:
        F.FedConfig(abr=1.5)
    assert err.value.key == "abr"
    with pytest.raises(ConfigError):
        F.FedConfig(select=6)
    with pytest.raises(ConfigError):
        F.FedConfig(adv_clients=5)  # method1 limit is select=4
    F.FedConfig(adv_clients=5, method="method2")


# ---------------------------------------------------------------- local training


def test_zero_epochs_or_zero_lr_return_global_weights():
    ds = tiny_data()
    params = nn.init_params(ARCH, 0)
    for epochs, lr in ((0, 0.1), (3, 0.0)):
        upd = F.local_update(params, ARCH, ds, epochs, lr, 8, np.random.default_rng(0))
        assert upd.params.equal(params) and upd.n_samples == len(ds)


def test_abr_zero_matches_plain_training_bitwise():
    ds = tiny_data()
    params = nn.init_params(ARCH, 0)
    plain = F.local_update(params, ARCH, ds, 2, 0.05, 8, np.random.default_rng(7))
    adv = F.adv_local_update(params, ARCH, ds, 2, 0.05, 8, 0.0, AttackConfig.ffgsm(0.1, 0.125), 0.5,
                             np.random.default_rng(7))
    assert adv.params.equal(plain.params)


def test_abr_half_of_seven_batches_attacks_four():
    ds = tiny_data()  # 42 samples, batch 6 -> 7 batches
    upd = F.adv_local_update(nn.init_params(ARCH, 0), ARCH, ds, 2, 0.05, 6, 0.5, AttackConfig.fgsm(0.1), 0.5,
                             np.random.default_rng(0))
    assert upd.adv_batches == [4, 4]


def test_mix_one_with_full_abr_equals_clean_training():
    ds = tiny_data()
    params = nn.init_params(ARCH, 0)
    plain = F.local_update(params, ARCH, ds, 1, 0.05, 8, np.random.default_rng(3))
    # FGSM draws nothing from the generator, so shuffles line up
    mixed = F.adv_local_update(params, ARCH, ds, 1, 0.05, 8, 1.0, AttackConfig.fgsm(0.2), 1.0,
                               np.random.default_rng(3))
    assert mixed.params.equal(plain.params)


def test_local_training_reduces_loss():
    ds = tiny_data(30)
    upd = F.local_update(nn.init_params(ARCH, 0), ARCH, ds, 8, 0.1, 10, np.random.default_rng(0))
    assert upd.epoch_losses[-1] < upd.epoch_losses[0]


def test_local_update_does_not_touch_global():
    ds = tiny_data()
    params = nn.init_params(ARCH, 0)
    snapshot = params.flatten().copy()
    F.adv_local_update(params, ARCH, ds, 1, 0.1, 8, 1.0, AttackConfig.ffgsm(0.1, 0.125), 0.5,
                       np.random.default_rng(0))
    np.testing.assert_array_equal(params.flatten(), snapshot)


def test_bad_abr_or_mix():
    ds = tiny_data()
    params = nn.init_params(ARCH, 0)
    with pytest.raises(ConfigError):
        F.adv_local_update(params, ARCH, ds, 1, 0.1, 8, 1.2, AttackConfig.fgsm(0.1), 0.5, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        F.adv_local_update(params, ARCH, ds, 1, 0.1, 8, 0.5, AttackConfig.fgsm(0.1), -0.1, np.random.default_rng(0))


# ---------------------------------------------------------------- aggregation


def test_fedavg_worked_example():
    a = nn.ParameterSet([("w", np.array([1.0, 2.0], np.float32))])
    b = nn.ParameterSet([("w", np.array([3.0, 6.0], np.float32))])
    out = F.fedavg([(a, 1), (b, 3)])
    np.testing.assert_array_equal(out["w"], [2.5, 5.0])


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 6))
def test_fedavg_matches_scalar_oracle(seed, n):
    rng = np.random.default_rng(seed)
    arch = nn.mlp((1, 2, 2), 3, (4,))
    updates = [(random_params(rng, arch).astype(np.float64), int(rng.integers(1, 500))) for _ in range(n)]
    out = F.fedavg(updates)
    ref = fedavg_oracle(updates)
    for name in out.names:
        np.testing.assert_allclose(out[name], ref[name], rtol=0, atol=1e-9)


def test_fedavg_permutation_invariant_and_identity():
    rng = np.random.default_rng(0)
    updates = [(random_params(rng), int(rng.integers(1, 100))) for _ in range(4)]
    a = F.fedavg(updates)
    b = F.fedavg(updates[::-1])
    np.testing.assert_allclose(a.flatten(), b.flatten(), rtol=0, atol=1e-6)
    assert F.fedavg(updates[:1]).equal(updates[0][0])


def test_fedavg_rejects_bad_input():
    with pytest.raises(InputError):
        F.fedavg([])
    a = nn.init_params(ARCH, 0)
    with pytest.raises(InputError):
        F.fedavg([(a, 0)])
    with pytest.raises(InputError):
        F.fedavg([(a, 1), (nn.init_params(nn.mlp((1, 8, 8), 3), 0), 1)])


# ---------------------------------------------------------------- experiment loop


def small_run(**kw):
    ds = tiny_data(20)
    cfg = F.FedConfig(**{"rounds": 2, "clients": 3, "select": 2, "local_epochs": 1, "train_batch": 10,
                         "attack": AttackConfig.ffgsm(0.1, 0.125), **kw})
    plan = D.partition_iid(ds, cfg.clients, 0)
    return F.run_experiment(cfg, ds, plan, ARCH)


def test_zero_rounds_returns_initial_params():
    res = small_run(rounds=0)
    assert res.records == [] and res.params.equal(res.initial_params)


def test_experiment_is_reproducible():
    a = small_run(adv_clients=1, seed=4)
    b = small_run(adv_clients=1, seed=4)
    assert a.params.equal(b.params)
    assert [r.adversarial for r in a.records] == [r.adversarial for r in b.records]
    assert not a.params.equal(small_run(adv_clients=1, seed=5).params)


def test_threads_do_not_change_results():
    a = small_run(adv_clients=1, seed=2, threads=1)
    b = small_run(adv_clients=1, seed=2, threads=3)
    assert a.params.equal(b.params)


def test_records_follow_schedule():
    res = small_run(rounds=4, adv_clients=2, seed=1)
    for r, rec in enumerate(res.records, 1):
        assert rec.round == r and len(rec.selected) == 2 and len(rec.adversarial) == 2
    res2 = small_run(rounds=4, adv_clients=1, method="method2", seed=1)
    assert res2.fixed_adversaries is not None and len(res2.fixed_adversaries) == 1
    for rec in res2.records:
        assert set(rec.adversarial) == set(rec.selected) & set(res2.fixed_adversaries)


def test_evaluator_receives_every_round():
    seen = []
    ds = tiny_data(20)
    cfg = F.FedConfig(rounds=3, clients=3, select=2, local_epochs=1, train_batch=10)

    def ev(model, r, rng):
        seen.append(r)
        return []

    F.run_experiment(cfg, ds, D.partition_iid(ds, 3, 0), ARCH, ev)
    assert seen == [1, 2, 3]


def test_partition_size_mismatch():
    ds = tiny_data()
    with pytest.raises(ConfigError):
        F.run_experiment(F.FedConfig(clients=3, select=2), ds, D.partition_iid(ds, 2, 0), ARCH)


def test_selection_examples():
    rng = np.random.default_rng(0)
    assert F.select_round_clients(rng, 5, 5) == [0, 1, 2, 3, 4]
    counts = np.zeros(5)
    for _ in range(10000):
        counts[F.select_round_clients(rng, 5, 1)] += 1
    assert np.all((counts / 10000 >= 0.17) & (counts / 10000 <= 0.23))
    a = F.select_round_clients(np.random.default_rng(9), 5, 3)
    assert a == F.select_round_clients(np.random.default_rng(9), 5, 3)
    with pytest.raises(ConfigError):
        F.select_round_clients(rng, 5, 6)


def test_adversary_plan_boundaries():
    rng = np.random.default_rng(0)
    assert F.plan_adversaries_method1(rng, [1, 3, 4], 0) == []
    assert F.plan_adversaries_method1(rng, [1, 3, 4], 3) == [1, 3, 4]
    assert F.plan_adversaries_method2(rng, 5, 5) == [0, 1, 2, 3, 4]


def test_method2_with_all_clients_fixed_makes_every_round_adversarial():
    res = small_run(rounds=3, adv_clients=3, method="method2")
    assert all(rec.adversarial == rec.selected for rec in res.records)


def test_full_abr_attacks_every_batch():
    ds = tiny_data()
    upd = F.adv_local_update(nn.init_params(ARCH, 0), ARCH, ds, 1, 0.05, 6, 1.0, AttackConfig.fgsm(0.1), 0.5,
                             np.random.default_rng(0))
    assert upd.adv_batches == [7]


@pytest.mark.parametrize("seed", range(5))
def test_loss_decreases_over_seeds(seed):
    ds = D.synth_dataset(seed, 30, n_classes=4, height=8, width=8, grid=2)
    upd = F.local_update(nn.init_params(nn.small_cnn((1, 8, 8), 4, (4,), 8), seed),
                         nn.small_cnn((1, 8, 8), 4, (4,), 8), ds, 5, 0.05, 16, np.random.default_rng(seed))
    assert upd.epoch_losses[-1] < upd.epoch_losses[0]


def test_fedavg_small_examples():
    p = lambda v: nn.ParameterSet([("w", np.array([v]))])  # noqa: E731
    assert F.fedavg([(p(2.0), 5), (p(4.0), 5)])["w"].tolist() == [3.0]
    assert F.fedavg([(p(0.0), 1), (p(4.0), 3)])["w"].tolist() == [3.0]
    assert F.fedavg([(p(1.25), 7)])["w"].tolist() == [1.25]
