import logging

import numpy as np
import pytest

from protofed import nn
from protofed.data import ClientShard, Dataset
from protofed.metrics import (
    RoundRecord,
    RoundTraffic,
    TrafficLedger,
    bytes_of_params,
    evaluate_classifier,
    evaluate_local_baseline,
    evaluate_prototype,
    prototype_accuracy,
)
from protofed.protocol import ClientState, RoundConfig, local_update
from protofed.prototypes import Prototype, PrototypeSet, prototypes_from_embeddings

from conftest import toy_dataset

ARCH = nn.ModelArch()


def constant_head(arch, cls):
    p = nn.init_params(arch, 0)
    t = dict(p.tensors)
    t["fc2.weight"] = np.zeros_like(t["fc2.weight"])
    bias = np.zeros_like(t["fc2.bias"])
    bias[cls] = 1.0
    t["fc2.bias"] = bias
    return nn.ModelParams(arch, t)


def test_constant_predictor_scores_its_class_frequency():
    ds = toy_dataset(50)
    assert evaluate_classifier(constant_head(ARCH, 2), ds) == pytest.approx(np.mean(ds.labels == 2))


def test_all_correct_and_all_wrong():
    labels = np.full(10, 4)
    ds = Dataset(np.zeros((10, 1, 28, 28), np.float32), labels)
    assert evaluate_classifier(constant_head(ARCH, 4), ds) == 1.0
    assert evaluate_classifier(constant_head(ARCH, 5), ds) == 0.0


def test_untrained_model_is_near_chance():
    ds = toy_dataset(2000, seed=3)
    accs = [evaluate_classifier(nn.init_params(ARCH, s), ds) for s in range(5)]
    assert all(0.0 <= a <= 0.3 for a in accs)


def test_overfit_toy_fixture_is_memorised():
    rng = np.random.default_rng(0)
    ds = Dataset(rng.random((3, 1, 28, 28), dtype=np.float32), np.array([1, 6, 8]))
    shard = ClientShard(0, np.arange(3), ds.class_histogram())
    c = ClientState(0, shard, ds, nn.init_params(ARCH, 1))
    params = c.params
    for r in range(60):
        c.round = r
        params = local_update(c, params, RoundConfig(batch_size=3, lr=0.1))
    assert evaluate_classifier(params, ds) == 1.0
    protos = prototypes_from_embeddings(nn.embed(params, ds.images), ds.labels)
    assert evaluate_prototype(params, protos, ds) == 1.0


def test_prototype_accuracy_matches_manual_count():
    g = PrototypeSet({0: Prototype(np.zeros(2, np.float32), 1), 1: Prototype(np.ones(2, np.float32), 1)})
    emb = np.array([[0.1, 0.0], [0.9, 1.0], [0.0, 0.2], [1.0, 1.0]], np.float32)
    assert prototype_accuracy(emb, [0, 1, 1, 0], g) == 0.5


def test_missing_class_counts_as_wrong_and_warns(caplog):
    g = PrototypeSet({0: Prototype(np.zeros(2, np.float32), 1)})
    with caplog.at_level(logging.WARNING):
        acc = prototype_accuracy(np.zeros((4, 2), np.float32), [0, 0, 3, 3], g)
    assert acc == 0.5
    assert "without a global prototype" in caplog.text


def test_local_baseline_is_unweighted_client_mean():
    ds = toy_dataset(40)
    shard = ClientShard(0, np.arange(1), np.ones(1))
    clients = [ClientState(i, shard, ds, constant_head(ARCH, j)) for i, j in enumerate((0, 1, 1))]
    expect = np.mean([np.mean(ds.labels == j) for j in (0, 1, 1)])
    assert evaluate_local_baseline(clients, ds) == pytest.approx(expect)
    with pytest.raises(ValueError):
        evaluate_local_baseline([], ds)


def test_bytes_of_default_model():
    p = nn.init_params(ARCH, 0)
    assert p.num_scalars() == 46730
    assert bytes_of_params(p) == 4 * 46730 + 16 * 8 == 187048


def test_bytes_of_empty_and_mapping():
    assert bytes_of_params({}) == 0
    assert bytes_of_params({"a": np.zeros((2, 3))}) == 24 + 16


@pytest.mark.parametrize("delta", [-32, 1, 16])
def test_bytes_grow_with_embedding_dim(delta):
    d = ARCH.embed_dim
    bigger = nn.ModelArch(embed_dim=d + delta)
    extra = bytes_of_params(nn.init_params(bigger, 0)) - bytes_of_params(nn.init_params(ARCH, 0))
    # fc1 gains rows (512 inputs + bias) and fc2 gains columns (10 outputs)
    assert extra == 4 * delta * (ARCH.flat_dim + 1) + 4 * delta * ARCH.n_classes


def test_ledger_cumulative_and_strip():
    led = TrafficLedger()
    led.record(RoundTraffic(10, 0, 20, 0))
    led.record(RoundTraffic(10, 3, 40, 5))
    assert led.cumulative() == [(10, 20), (23, 65)]
    tot = led.totals()
    assert tot["up"] == 23 and tot["down"] == 65 and tot["total"] == 88
    assert led.without_prototypes().totals()["total"] == 80
    with pytest.raises(ValueError):
        RoundTraffic(-1)


def test_round_record_rejects_bad_accuracy():
    RoundRecord(1, acc_fedavg=1.0)
    with pytest.raises(ValueError):
        RoundRecord(1, acc_proto=1.5)
