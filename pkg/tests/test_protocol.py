import numpy as np
import pytest

from protofed import nn
from protofed.data import ClientShard, PartitionSpec, dirichlet_partition
from protofed.errors import InvalidInputError, ProtocolError
from protofed.protocol import (
    ClientState,
    RoundConfig,
    ServerState,
    fedavg_aggregate,
    local_update,
    make_clients,
    run_local_round,
    run_round,
)
from protofed.prototypes import serialized_size

from conftest import toy_dataset

TINY = nn.ModelArch(conv1_channels=4, conv2_channels=8, embed_dim=8)


def random_params(rng, arch=TINY):
    return nn.ModelParams(
        arch, {k: rng.normal(size=s).astype(np.float32) for k, s in arch.param_shapes().items()}
    )


def whole_client(ds, cid=0, seed=0, init=None):
    shard = ClientShard(cid, np.arange(len(ds)), ds.class_histogram())
    return ClientState(cid, shard, ds, init or nn.init_params(TINY, 0), seed)


def federation(n_clients=4, n=80, alpha=1.0, seed=0):
    pool = toy_dataset(n, seed=seed)
    shards = dirichlet_partition(pool.labels, PartitionSpec(n_clients, alpha, n, seed))
    init = nn.init_params(TINY, seed)
    return init, make_clients(pool, shards, init, seed)


# --- local_update ---


def test_zero_lr_returns_global_params():
    c = whole_client(toy_dataset(20))
    g = nn.init_params(TINY, 3)
    assert local_update(c, g, RoundConfig(lr=0.0)).equals(g)


def test_one_full_batch_step_matches_hand_rolled_step():
    ds = toy_dataset(12)
    c = whole_client(ds)
    g = nn.init_params(TINY, 5)
    out = local_update(c, g, RoundConfig(batch_size=64, local_epochs=1, lr=0.05))
    # a permuted full batch: the loss is a mean, so only summation order can differ
    _, grads = nn.loss_and_grads(g, ds.images, ds.labels)
    expect = nn.sgd_step(g, grads, 0.05)
    for name in nn.PARAM_NAMES:
        np.testing.assert_allclose(out[name], expect[name], rtol=1e-5, atol=1e-7)


def test_local_update_deterministic_and_pure():
    c = whole_client(toy_dataset(30), seed=4)
    g = nn.init_params(TINY, 1)
    snapshot = g.copy()
    cfg = RoundConfig(batch_size=4, local_epochs=2)
    a = local_update(c, g, cfg)
    b = local_update(c, g, cfg)
    assert a.equals(b)
    assert g.equals(snapshot)


def test_local_update_batch_order_depends_on_round():
    c = whole_client(toy_dataset(30))
    g = nn.init_params(TINY, 1)
    cfg = RoundConfig(batch_size=4)
    a = local_update(c, g, cfg)
    c.round = 1
    assert not a.equals(local_update(c, g, cfg))


def test_local_update_rejects_incongruent_params():
    c = whole_client(toy_dataset(10))
    with pytest.raises(InvalidInputError):
        local_update(c, nn.init_params(nn.ModelArch(), 0), RoundConfig())


# --- fedavg_aggregate ---


def test_fedavg_single_client_is_identity():
    p = random_params(np.random.default_rng(0))
    assert fedavg_aggregate([(p, 17)]).equals(p)


def test_fedavg_of_identical_params_is_identity():
    p = random_params(np.random.default_rng(1))
    assert fedavg_aggregate([(p, 3), (p.copy(), 11), (p.copy(), 1)]).equals(p)


def test_fedavg_equal_sizes_is_plain_mean():
    rng = np.random.default_rng(2)
    ps = [random_params(rng) for _ in range(4)]
    out = fedavg_aggregate([(p, 5) for p in ps])
    for name in nn.PARAM_NAMES:
        mean = sum(p[name].astype(np.float64) for p in ps) / 4
        np.testing.assert_array_equal(out[name], mean.astype(np.float32))


def test_fedavg_matches_weighted_sum_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        ps = [random_params(rng) for _ in range(3)]
        out = fedavg_aggregate(list(zip(ps, (1, 2, 7))))
        for name in nn.PARAM_NAMES:
            acc = np.zeros(ps[0][name].shape, np.float64)
            for p, size in zip(ps, (1, 2, 7)):
                acc = acc + np.float64(size) * p[name].astype(np.float64)
            np.testing.assert_array_equal(out[name], (acc / 10).astype(np.float32))


def test_fedavg_order_invariant():
    rng = np.random.default_rng(4)
    ups = [(random_params(rng), int(rng.integers(1, 300))) for _ in range(20)]
    a = fedavg_aggregate(ups)
    b = fedavg_aggregate([ups[i] for i in rng.permutation(20)])
    assert a.equals(b)


def test_fedavg_errors():
    p = random_params(np.random.default_rng(5))
    with pytest.raises(InvalidInputError):
        fedavg_aggregate([])
    with pytest.raises(InvalidInputError):
        fedavg_aggregate([(p, 0)])
    with pytest.raises(InvalidInputError):
        fedavg_aggregate([(p, 1), (nn.init_params(nn.ModelArch(), 0), 1)])


# --- run_round ---


def test_non_final_rounds_ship_no_prototypes():
    init, clients = federation()
    server = ServerState(init, total_rounds=3)
    cfg = RoundConfig(batch_size=8, rounds=3)
    for t in range(2):
        server, traffic = run_round(server, clients, cfg, is_final=False)
        assert traffic.up_protos == 0 and traffic.down_protos == 0
        assert server.prototypes is None
        assert traffic.up_params == traffic.down_params == len(clients) * nn_bytes(init)
    assert server.round == 2


def nn_bytes(params):
    from protofed.metrics import bytes_of_params

    return bytes_of_params(params)


def test_final_round_prototype_bytes_are_bounded():
    init, clients = federation(n_clients=5)
    server = ServerState(init, total_rounds=1)
    server, traffic = run_round(server, clients, RoundConfig(rounds=1), is_final=True)
    d, c = TINY.embed_dim, TINY.n_classes
    assert 0 < traffic.up_protos <= len(clients) * serialized_size(c, d)
    assert traffic.up_protos == sum(serialized_size(int((cl.shard.class_counts > 0).sum()), d) for cl in clients)
    assert traffic.down_protos == len(clients) * serialized_size(len(server.prototypes), d)
    # initial broadcast plus redistribution of the final model
    assert traffic.down_params == 2 * len(clients) * nn_bytes(init)
    assert server.round == 1 and server.prototypes is not None


def test_final_round_without_prototypes_only_redistributes():
    init, clients = federation()
    server, traffic = run_round(ServerState(init, 1), clients, RoundConfig(rounds=1), True, with_prototypes=False)
    assert traffic.up_protos == traffic.down_protos == 0
    assert server.prototypes is None


def test_round_counter_and_final_flag_are_enforced():
    init, clients = federation()
    server = ServerState(init, total_rounds=2)
    with pytest.raises(ProtocolError):
        run_round(server, clients, RoundConfig(), is_final=True)
    server, _ = run_round(server, clients, RoundConfig(), is_final=False)
    with pytest.raises(ProtocolError):
        run_round(server, clients, RoundConfig(), is_final=False)
    server, _ = run_round(server, clients, RoundConfig(), is_final=True)
    with pytest.raises(ProtocolError):
        run_round(server, clients, RoundConfig(), is_final=True)
    with pytest.raises(ProtocolError):
        ServerState(init, 2, round=1, prototypes=server.prototypes)


def test_single_client_round_equals_local_update():
    ds = toy_dataset(24)
    init = nn.init_params(TINY, 2)
    c = whole_client(ds, init=init)
    expect = local_update(c, init, RoundConfig(batch_size=5))
    server, _ = run_round(ServerState(init, 1), [c], RoundConfig(batch_size=5), True)
    assert server.params.equals(expect)


def test_client_order_does_not_change_the_aggregate():
    init, clients = federation(n_clients=5)
    a, _ = run_round(ServerState(init, 1), clients, RoundConfig(), True)
    _, again = federation(n_clients=5)
    b, _ = run_round(ServerState(init, 1), list(reversed(again)), RoundConfig(), True)
    assert a.params.equals(b.params)
    for j in a.prototypes.classes:
        assert np.array_equal(a.prototypes[j].vector, b.prototypes[j].vector)


def test_threaded_clients_match_sequential():
    init, seq = federation(n_clients=6)
    _, par = federation(n_clients=6)
    s1, t1 = run_round(ServerState(init, 2), seq, RoundConfig(), False, workers=1)
    s2, t2 = run_round(ServerState(init, 2), par, RoundConfig(), False, workers=4)
    assert s1.params.equals(s2.params) and t1 == t2
    s1, t1 = run_round(s1, seq, RoundConfig(), True, workers=1)
    s2, t2 = run_round(s2, par, RoundConfig(), True, workers=3)
    assert s1.params.equals(s2.params) and t1 == t2
    assert s1.prototypes.to_bytes() == s2.prototypes.to_bytes()


def test_one_client_federation_equals_centralised_training():
    # T rounds of E epochs with one client are T*E epochs of local SGD
    ds = toy_dataset(20)
    init = nn.init_params(TINY, 6)
    fed = whole_client(ds, init=init)
    solo = whole_client(ds, init=init)
    cfg = RoundConfig(batch_size=6, local_epochs=2, rounds=3)
    server = ServerState(init, 3)
    for t in range(3):
        server, _ = run_round(server, [fed], cfg, t == 2)
        run_local_round([solo], cfg)
    assert server.params.equals(solo.params)


def test_local_round_moves_each_client_independently():
    init, clients = federation()
    run_local_round(clients, RoundConfig())
    assert all(c.round == 1 for c in clients)
    assert not clients[0].params.equals(clients[1].params)
    assert not clients[0].params.equals(init)


def test_round_config_validation():
    RoundConfig(lr=0.0)
    for bad in (dict(batch_size=0), dict(local_epochs=0), dict(lr=-1.0), dict(rounds=0), dict(n_clients=0)):
        with pytest.raises(InvalidInputError):
            RoundConfig(**bad)
