import numpy as np
import pytest

from hetswitch import tensor_nn as nn
from hetswitch.fed_data import ClientData
from hetswitch.fl_core import (
    ClientUpdateResult, ConfigError, FedAvg, FedProx, FlConfig, QFedAvg, RoundError, Scaffold, client_rng,
    eval_rounds, fedavg_aggregate, fedavg_client, fedprox_client, local_sgd, qfedavg_client, qfedavg_round,
    run_experiment, scaffold_client, select_clients, weighted_loss,
)
from oracles import tiny_federation


def _res(cid, params, n=1, loss=0.0, **extras):
    return ClientUpdateResult(cid, np.asarray(params, dtype=float), loss, n, extras=extras)


@pytest.fixture(scope="module")
def fed():
    return tiny_federation()


def _cfg(**kw):
    base = dict(n_clients=6, clients_per_round=3, batch_size=5, local_epochs=1, rounds=3, lr=0.1, seed=0)
    base.update(kw)
    return FlConfig(**base)


@pytest.mark.parametrize("field, kw", [
    ("clients_per_round", dict(n_clients=5, clients_per_round=6)),
    ("clients_per_round", dict(clients_per_round=0)),
    ("batch_size", dict(batch_size=0)),
    ("local_epochs", dict(local_epochs=0)),
    ("rounds", dict(rounds=0)),
    ("lr", dict(lr=0.0)),
])
def test_config_errors_name_field(field, kw):
    with pytest.raises(ConfigError) as e:
        FlConfig(**kw)
    assert e.value.field == field


def test_aggregate_examples():
    np.testing.assert_array_equal(fedavg_aggregate([_res(0, [1, 3]), _res(1, [3, 5])]), [2, 4])
    np.testing.assert_array_equal(fedavg_aggregate([_res(4, [1.5, -2])]), [1.5, -2])
    np.testing.assert_array_equal(fedavg_aggregate([_res(0, [0, 0], n=1), _res(1, [4, 4], n=3)]), [3, 3])
    with pytest.raises(ValueError):
        fedavg_aggregate([])


def test_aggregate_order_independent():
    rs = [_res(i, np.random.default_rng(i).normal(size=5), n=i + 1) for i in range(6)]
    np.testing.assert_array_equal(fedavg_aggregate(rs), fedavg_aggregate(rs[::-1]))


def test_weighted_loss():
    assert weighted_loss([_res(0, [0], loss=0.2), _res(1, [0], loss=0.4)]) == pytest.approx(0.3)
    assert weighted_loss([_res(0, [0], n=1, loss=1.0), _res(1, [0], n=3, loss=0.0)]) == 0.25


def test_selection():
    assert select_clients(5, 5, 1, 0) == [0, 1, 2, 3, 4]
    a = select_clients(100, 20, 7, 3)
    assert a == select_clients(100, 20, 7, 3) and a == sorted(set(a)) and len(a) == 20
    assert a != select_clients(100, 20, 8, 3)


def test_selection_frequency():
    # each client is picked with probability K / N per round
    n, k, rounds = 100, 20, 10000
    counts = np.zeros(n)
    for r in range(rounds):
        counts[select_clients(n, k, r, 0)] += 1
    p = k / n
    sigma = np.sqrt(rounds * p * (1 - p))
    assert np.all(np.abs(counts - rounds * p) < 4.5 * sigma)  # 100 clients: allow the max of 100 deviates
    assert np.mean(np.abs(counts - rounds * p) < 3 * sigma) > 0.95


def _data(fed, cid=0):
    return fed[4].client_data(cid)


def test_eta_zero_keeps_params_and_reports_initial_loss(fed):
    base, profiles, shards, spec, federation = fed
    d = _data(fed)
    state = nn.init_params(spec, 0)
    one_batch = ClientData(d.images[:5], d.labels[:5])
    cfg = _cfg(lr=1e-300, local_epochs=3)
    res = fedavg_client(state, one_batch, cfg)
    # lr must be positive, so the smallest one stands in for zero
    np.testing.assert_allclose(res.params, state.params, rtol=1e-15, atol=1e-290)
    assert res.train_loss == pytest.approx(nn.forward_loss(state, nn.Batch(one_batch.images, one_batch.labels))[0],
                                           rel=1e-12)


def test_single_full_batch_equals_centralised_step(fed):
    spec = fed[3]
    d = _data(fed)
    state = nn.init_params(spec, 0)
    cfg = _cfg(batch_size=len(d))
    res = fedavg_client(state, d, cfg)
    _, g = nn.backward(state, nn.Batch(d.images, d.labels))
    # one permuted full batch; the mean gradient is order-independent up to summation order
    np.testing.assert_allclose(res.params, state.params - cfg.lr * g, atol=1e-12)


def test_train_loss_is_running_mean_of_batch_losses(fed):
    spec = fed[3]
    d = _data(fed)
    state = nn.init_params(spec, 0)
    cfg = _cfg(batch_size=4, local_epochs=2)
    res = fedavg_client(state, d, cfg, client_id=2, rnd=5)
    # independent replay: same permutations, record each pre-step batch loss
    rng = client_rng(cfg.seed, 2, 5)
    losses, s = [], state
    for _ in range(cfg.local_epochs):
        order = rng.permutation(len(d))
        for i in range(0, len(d), 4):
            b = nn.Batch(d.images[order[i:i + 4]], d.labels[order[i:i + 4]])
            loss, g = nn.backward(s, b)
            losses.append(loss)
            s = nn.sgd_step(s, g, cfg.lr)
    assert res.train_loss == pytest.approx(np.mean(losses), rel=1e-12)
    np.testing.assert_array_equal(res.params, s.params)
    assert res.telemetry["draws"] == 2 * len(d)


def test_fedprox_mu_zero_is_fedavg_bitwise(fed):
    spec = fed[3]
    d = _data(fed)
    state = nn.init_params(spec, 1)
    a = fedavg_client(state, d, _cfg(), 1, 2)
    b = fedprox_client(state, d, _cfg(), 0.0, 1, 2)
    assert a.params.tobytes() == b.params.tobytes() and a.train_loss == b.train_loss
    with pytest.raises(ValueError):
        fedprox_client(state, d, _cfg(), -1.0)


def test_fedprox_shrinks_toward_global(fed):
    spec = fed[3]
    d = _data(fed)
    state = nn.init_params(spec, 1)
    cfg = _cfg(lr=0.001, local_epochs=2)
    drift = [np.max(np.abs(fedprox_client(state, d, cfg, mu).params - state.params)) for mu in (0, 1, 10, 100, 1000)]
    assert all(a > b for a, b in zip(drift, drift[1:]))


def test_prox_gradient_matches_quadratic_fd():
    rng = np.random.default_rng(0)
    w, wg, mu, h = rng.normal(size=6), rng.normal(size=6), 0.7, 1e-5
    f = lambda v: mu / 2 * np.sum((v - wg) ** 2)
    fd = np.array([(f(w + h * e) - f(w - h * e)) / (2 * h) for e in np.eye(6)])
    np.testing.assert_allclose(fd, mu * (w - wg), atol=1e-9)


def test_qfedavg_q_zero_equal_shards_is_mean():
    rng = np.random.default_rng(2)
    wg = rng.normal(size=7)
    rs = [_res(i, rng.normal(size=7), n=10, init_loss=float(rng.uniform(0.5, 2))) for i in range(4)]
    out = qfedavg_round(wg, rs, q=0.0, lipschitz=10.0)
    np.testing.assert_allclose(out, np.mean([r.params for r in rs], axis=0), atol=1e-9)


def test_qfedavg_symmetric_deltas_keep_global():
    wg = np.array([1.0, -2.0])
    d = np.array([0.3, 0.1])
    rs = [_res(0, wg + d, init_loss=1.0), _res(1, wg - d, init_loss=1.0)]
    np.testing.assert_allclose(qfedavg_round(wg, rs, q=1.0, lipschitz=5.0), wg, atol=1e-15)


def test_qfedavg_hand_formula_three_clients():
    q, L = 1e-6, 10.0
    wg = np.array([0.5, -1.0, 2.0])
    ws = [np.array([0.4, -0.9, 2.1]), np.array([0.7, -1.2, 1.8]), np.array([0.5, -1.0, 2.5])]
    F = [0.8, 1.5, 2.2]
    # scalar-by-scalar evaluation of the closed form
    num = [0.0, 0.0, 0.0]
    den = 0.0
    for w, f in zip(ws, F):
        dl = [L * (wg[j] - w[j]) for j in range(3)]
        for j in range(3):
            num[j] += f ** q * dl[j]
        den += q * f ** (q - 1) * sum(x * x for x in dl) + L * f ** q
    want = [wg[j] - num[j] / den for j in range(3)]
    rs = [_res(i, w, init_loss=f) for i, (w, f) in enumerate(zip(ws, F))]
    np.testing.assert_allclose(qfedavg_round(wg, rs, q, L), want, atol=1e-15)


def test_qfedavg_client_reports_global_loss(fed):
    spec = fed[3]
    d = _data(fed)
    state = nn.init_params(spec, 0)
    res = qfedavg_client(state, d, _cfg())
    assert res.extras["init_loss"] == nn.dataset_loss(state, d.images, d.labels)
    with pytest.raises(ValueError):
        qfedavg_round(state.params, [res], q=-1, lipschitz=1)


def test_scaffold_zero_variates_is_fedavg_bitwise(fed):
    spec = fed[3]
    d = _data(fed)
    state = nn.init_params(spec, 0)
    z = np.zeros(spec.param_count)
    a = fedavg_client(state, d, _cfg(), 3, 1)
    b, _, _ = scaffold_client(state, d, _cfg(), z, z, 3, 1)
    assert a.params.tobytes() == b.params.tobytes()
    c = np.random.default_rng(0).normal(size=spec.param_count)
    e, _, _ = scaffold_client(state, d, _cfg(), c, c.copy(), 3, 1)
    assert a.params.tobytes() == e.params.tobytes()


def test_scaffold_variate_recompute(fed):
    spec = fed[3]
    d = _data(fed)
    state = nn.init_params(spec, 0)
    rng = np.random.default_rng(1)
    c, ci = 0.01 * rng.normal(size=spec.param_count), 0.01 * rng.normal(size=spec.param_count)
    cfg = _cfg(batch_size=4, local_epochs=2)
    res, c_new, dc = scaffold_client(state, d, cfg, c, ci, 0, 1)
    steps = cfg.local_epochs * -(-len(d) // 4)
    want = ci - c + (state.params - res.params) / (steps * cfg.lr)
    np.testing.assert_allclose(c_new, want, atol=1e-9)
    np.testing.assert_allclose(dc, c_new - ci, atol=1e-15)


def test_scaffold_server_variate_update(fed):
    base, profiles, shards, spec, federation = fed
    cfg = _cfg(rounds=1)
    rep = run_experiment(cfg, Scaffold(), federation, spec)
    assert rep.rounds[0]["n_clients"] == 3


def test_one_round_full_participation_matches_centralised(fed):
    _, _, _, spec, _ = fed
    base, profiles, shards, spec, federation = tiny_federation(n_clients=4, n_train=40, identity=True)
    cfg = FlConfig(4, 4, 10, 1, 1, 0.1, 0)
    init = nn.init_params(spec, 9)
    rep = run_experiment(cfg, FedAvg(), federation, spec, init_state=init)
    _, g = nn.backward(init, nn.Batch(base.train_x, base.train_y))
    np.testing.assert_allclose(rep.final_params, init.params - 0.1 * g, atol=1e-9)


def test_run_is_deterministic_and_thread_invariant(fed):
    base, profiles, shards, spec, federation = fed
    cfg = _cfg(rounds=3)
    a = run_experiment(cfg, FedProx(0.1), federation, spec)
    b = run_experiment(cfg, FedProx(0.1), federation, spec, threads=3)
    assert a.final_params.tobytes() == b.final_params.tobytes()
    assert a.rounds == b.rounds and a.clients == b.clients


def test_run_fedprox_zero_equals_fedavg(fed):
    base, profiles, shards, spec, federation = fed
    a = run_experiment(_cfg(), FedAvg(), federation, spec)
    b = run_experiment(_cfg(), FedProx(0.0), federation, spec)
    assert a.final_params.tobytes() == b.final_params.tobytes()


def test_qfedavg_strategy_runs(fed):
    base, profiles, shards, spec, federation = fed
    rep = run_experiment(_cfg(rounds=2), QFedAvg(), federation, spec)
    assert np.all(np.isfinite(rep.final_params))
    assert "l_init" in rep.clients[0]


def test_divergence_raises_round_error(fed):
    base, profiles, shards, spec, federation = fed
    with pytest.raises(RoundError):
        run_experiment(_cfg(lr=1e200), FedAvg(), federation, spec)


def test_wrong_client_count_rejected(fed):
    base, profiles, shards, spec, federation = fed
    with pytest.raises(ConfigError) as e:
        run_experiment(_cfg(n_clients=7), FedAvg(), federation, spec)
    assert e.value.field == "n_clients"


def test_eval_rounds():
    assert eval_rounds(200) == set(range(4, 201, 4))
    assert eval_rounds(3) == {1, 2, 3}
    assert eval_rounds(10, 4) == {4, 8, 10}


def test_local_sgd_rejects_empty():
    spec = nn.default_spec((8, 8, 3), 3)
    with pytest.raises(ValueError):
        local_sgd(nn.init_params(spec, 0), ClientData(np.zeros((0, 8, 8, 3)), np.zeros(0, int)), _cfg(),
                  client_rng(0, 0, 0))
