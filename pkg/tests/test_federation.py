import dataclasses

import numpy as np
import pytest

from featfed.data import Dataset, class_centers, dirichlet_partition, split, synth_generate
from featfed.errors import AggregationError, ConfigError, DegenerateInputError
from featfed.federation import (
    ClientState,
    FederationConfig,
    ServerState,
    aggregate_class_means,
    assign_head,
    average_weights,
    client_local_train,
    client_rng,
    evaluate,
    init_federation,
    per_class_mean_features,
    regularize_backbone,
    run_round,
    strategy_id,
)
from featfed.losses import arcface_loss
from featfed.messages import ClassMeanFeatures
from featfed.nn import BackboneParams, HeadParams, forward, init_params, l2_normalize, tree_leaves

from oracles import class_mean_loop, pull_toward_init_loop, mean_loop


def small_setup(strategy, seed=0, **kw):
    cfg = FederationConfig(**{"n_clients": 4, "rounds": 3, "d": 6, "hidden": (12,), "seed": seed,
                              "lr": 1e-3, **kw})
    ds = synth_generate(5, 30, 4, 0.2, seed=seed)
    train, val = split(ds, 0.3, seed)
    shards = dirichlet_partition(train, cfg.n_clients, 0.5, seed).shards
    server, clients = init_federation(strategy, cfg, train, shards)
    return cfg, train, val, server, clients


def run_rounds(strategy, rounds=2, **kw):
    cfg, train, val, server, clients = small_setup(strategy, **kw)
    out = []
    for r in range(1, rounds + 1):
        server, clients, m = run_round(server, clients, strategy, cfg, train, val, final_round=r == rounds)
        out.append((server, clients, m))
    return cfg, train, val, out


def leaves_equal(a, b):
    return all(np.array_equal(x, y) for x, y in zip(tree_leaves(a), tree_leaves(b)))


# averaging


def test_average_identical_models():
    p = init_params(0, [3, 4, 2])
    assert leaves_equal(average_weights([p, p.copy(), p.copy()]), p)


def test_average_scalars():
    assert average_weights([np.array(2.0), np.array(4.0)]) == 3.0


def test_average_matches_loop(rng):
    models = [init_params(int(s), [3, 5, 2]) for s in rng.integers(0, 1000, size=5)]
    avg = average_weights(models)
    for j, leaf in enumerate(tree_leaves(avg)):
        oracle = mean_loop([tree_leaves(m)[j] for m in models])
        assert np.max(np.abs(leaf - oracle)) < 1e-12


def test_average_permutation_invariant_with_ids(rng):
    models = [init_params(s, [3, 5, 2]) for s in range(6)]
    ids = list(range(6))
    base = average_weights(models, ids)
    for _ in range(5):
        perm = rng.permutation(6)
        shuffled = average_weights([models[i] for i in perm], [ids[i] for i in perm])
        assert leaves_equal(base, shuffled)


def test_average_errors():
    with pytest.raises(AggregationError):
        average_weights([])
    with pytest.raises(AggregationError):
        average_weights([init_params(0, [3, 4]), init_params(0, [3, 5])])


# class means


def make_client(inputs_dim=3, d=3, shard=()):
    backbone = BackboneParams([np.eye(d, inputs_dim)], [np.zeros(d)])
    return ClientState(0, backbone, HeadParams(l2_normalize(np.ones((2, d)), axis=1)), np.array(shard, dtype=np.int64))


def test_class_mean_single_sample():
    data = Dataset(np.array([[1.0, 2.0, 3.0]]), np.array([1]), 2)
    msg = per_class_mean_features(make_client(shard=[0]), data)
    assert msg.classes == [1] and msg.counts == {1: 1}
    assert np.array_equal(msg.means[1], [1.0, 2.0, 3.0])


def test_class_mean_empty_shard():
    data = Dataset(np.ones((2, 3)), np.array([0, 1]), 2)
    assert per_class_mean_features(make_client(shard=[]), data).means == {}


def test_class_mean_matches_loop(rng):
    data = Dataset(rng.normal(size=(4, 3)), np.array([0, 1, 0, 1]), 2)
    state = ClientState(0, init_params(2, [3, 5, 4]), HeadParams(np.ones((2, 4))), np.arange(4))
    msg = per_class_mean_features(state, data)
    oracle = class_mean_loop(forward(state.backbone, data.inputs), data.labels)
    for c in (0, 1):
        assert np.max(np.abs(msg.means[c] - oracle[c])) < 1e-10
        assert msg.counts[c] == 2


def test_aggregate_single_client_keeps_vectors():
    msg = ClassMeanFeatures({0: np.array([1.0, 2.0]), 2: np.array([3.0, 4.0])}, {0: 5, 2: 1}, 3, 2)
    out = aggregate_class_means([msg])
    assert out.classes == [0, 2]
    assert all(np.array_equal(out.means[c], msg.means[c]) for c in out.classes)
    assert out.counts == {0: 1, 2: 1}


def test_aggregate_two_clients():
    a = ClassMeanFeatures({0: np.array([1.0, 0.0])}, {0: 3}, 1, 2)
    b = ClassMeanFeatures({0: np.array([0.0, 1.0])}, {0: 9}, 1, 2)
    assert np.array_equal(aggregate_class_means([a, b]).means[0], [0.5, 0.5])


def test_aggregate_presence_mask(rng):
    present = [True, False, True, True, False]
    msgs = []
    for p in present:
        means = {1: rng.normal(size=4)}
        if p:
            means[0] = rng.normal(size=4)
        msgs.append(ClassMeanFeatures(means, {c: 1 for c in means}, 3, 4))
    out = aggregate_class_means(msgs)
    expected = mean_loop([m.means[0] for m in msgs if 0 in m.means])
    assert np.max(np.abs(out.means[0] - expected)) < 1e-10
    assert out.counts == {0: 3, 1: 5}
    assert 2 not in out.means


def test_aggregate_errors():
    with pytest.raises(AggregationError):
        aggregate_class_means([])
    with pytest.raises(AggregationError):
        aggregate_class_means([ClassMeanFeatures({0: np.zeros(2)}, {0: 1}),
                               ClassMeanFeatures({0: np.zeros(3)}, {0: 1})])


def test_single_client_one_sample_per_class_round_trip(rng):
    data = Dataset(rng.normal(size=(3, 3)), np.array([2, 0, 1]), 3)
    state = ClientState(0, init_params(1, [3, 4]), HeadParams(np.ones((3, 4))), np.arange(3))
    out = aggregate_class_means([per_class_mean_features(state, data)])
    emb = forward(state.backbone, data.inputs)
    for i, c in enumerate(data.labels):
        assert np.array_equal(out.means[int(c)], emb[i])


# head assignment


def test_assign_head_all_classes():
    means = ClassMeanFeatures({0: np.array([3.0, 4.0, 0.0]), 1: np.array([0.0, 0.0, 2.0])}, {0: 1, 1: 1})
    out = assign_head(make_client(), means)
    assert np.allclose(out.head.anchors, [[0.6, 0.8, 0.0], [0.0, 0.0, 1.0]], atol=1e-15)


def test_assign_head_no_classes():
    state = make_client()
    out = assign_head(state, ClassMeanFeatures({}, {}, 2, 3))
    assert np.array_equal(out.head.anchors, state.head.anchors)


def test_assign_head_partial():
    state = make_client()
    out = assign_head(state, ClassMeanFeatures({0: np.array([0.0, 5.0, 0.0])}, {0: 1}, 2, 3))
    assert np.array_equal(out.head.anchors[0], [0.0, 1.0, 0.0])
    assert np.array_equal(out.head.anchors[1], state.head.anchors[1])


def test_assign_head_zero_mean():
    with pytest.raises(DegenerateInputError):
        assign_head(make_client(), ClassMeanFeatures({0: np.zeros(3)}, {0: 1}))


# regularisation


def test_regularize_fixed_point():
    m0 = init_params(3, [4, 5, 2])
    assert leaves_equal(regularize_backbone(m0, m0.copy(), 10), m0)


def test_regularize_single_client_returns_trained():
    m0, mt = init_params(3, [4, 2]), init_params(4, [4, 2])
    assert leaves_equal(regularize_backbone(m0, mt, 1), mt)


def test_regularize_scalar():
    m0 = BackboneParams([np.zeros((1, 1))], [np.zeros(1)])
    mt = BackboneParams([np.full((1, 1), 10.0)], [np.zeros(1)])
    assert regularize_backbone(m0, mt, 10).weights[0][0, 0] == 1.0


@pytest.mark.parametrize("n", [2, 3, 7, 20])
def test_regularize_matches_loop(n):
    m0, mt = init_params(5, [4, 6, 3]), init_params(6, [4, 6, 3])
    out = regularize_backbone(m0, mt, n)
    for a, b, c in zip(tree_leaves(out), tree_leaves(m0), tree_leaves(mt)):
        assert np.max(np.abs(a - pull_toward_init_loop(b, c, n))) < 1e-10


def test_regularize_errors():
    with pytest.raises(AggregationError):
        regularize_backbone(init_params(0, [3, 4]), init_params(0, [3, 5]), 2)
    with pytest.raises(ConfigError):
        regularize_backbone(init_params(0, [3, 4]), init_params(0, [3, 4]), 0)


# local training


def test_local_train_empty_shard_is_identity():
    state = make_client(shard=[])
    data = Dataset(np.ones((2, 3)), np.array([0, 1]), 2)
    assert client_local_train(state, data, 3, "arcface", 1e-3, 16, client_rng(0, 0, 1)) is state


def test_local_train_one_sample_one_step():
    state = ClientState(0, init_params(0, [3, 4]), HeadParams(l2_normalize(np.eye(2, 4), axis=1)), np.array([0]))
    data = Dataset(np.ones((1, 3)), np.array([1]), 2)
    out = client_local_train(state, data, 1, "arcface", 1e-3, 16, client_rng(0, 0, 1))
    assert out.adam.step == 1
    assert not leaves_equal(out.backbone, state.backbone)
    assert np.array_equal(out.head.anchors, state.head.anchors)


def test_local_train_loss_decreases():
    successes = 0
    for seed in range(20):
        data = synth_generate(4, 15, 4, 0.05, seed=seed)
        head = HeadParams(l2_normalize(np.random.default_rng(seed).normal(size=(4, 6)), axis=1))
        state = ClientState(0, init_params(seed, [4, 12, 6]), head, np.arange(len(data)))

        def loss(s):
            return arcface_loss(forward(s.backbone, data.inputs), s.head, data.labels)

        values = [loss(state)]
        for epoch in range(5):
            state = client_local_train(state, data, 1, "arcface", 1e-3, 16, client_rng(seed, 0, epoch))
            values.append(loss(state))
        successes += all(b < a for a, b in zip(values, values[1:]))
    assert successes >= 19


def test_local_train_validation():
    state = make_client(shard=[0])
    data = Dataset(np.ones((1, 3)), np.array([0]), 2)
    with pytest.raises(ConfigError):
        client_local_train(state, data, 1, "hinge", 1e-3, 16, client_rng(0, 0, 1))
    with pytest.raises(ConfigError):
        client_local_train(state, data, 1, "arcface", 1e-3, 0, client_rng(0, 0, 1))


# rounds


def test_strategy1_zero_epochs_keeps_models():
    cfg, train, val, server, clients = small_setup(1, local_epochs=0)
    before = clients[0].backbone.copy()
    server, clients, _ = run_round(server, clients, 1, cfg, train, val)
    for c in clients:
        assert leaves_equal(c.backbone, before)
    assert leaves_equal(server.global_model[0], before)


@pytest.mark.parametrize("strategy", [1, 4, 5, 6])
def test_weight_strategies_broadcast(strategy):
    _, _, _, out = run_rounds(strategy, rounds=2)
    for server, clients, _ in out:
        for c in clients:
            assert leaves_equal(c.backbone, server.global_model[0])
        if strategy == 1:
            assert all(leaves_equal(c.head, server.global_model[1]) for c in clients)


@pytest.mark.parametrize("strategy", [2, 3, 4])
def test_feature_strategies_share_unit_heads(strategy):
    _, _, _, out = run_rounds(strategy, rounds=2)
    for _, clients, _ in out:
        ref = clients[0].head.anchors
        for c in clients:
            assert np.array_equal(c.head.anchors, ref)
        assert np.allclose(np.linalg.norm(ref, axis=1), 1.0, atol=1e-12)


def test_strategy3_zero_lr_is_fixed_point():
    cfg, train, val, server, clients = small_setup(3, lr=0.0)
    m0 = clients[0].m0.copy()
    for r in range(3):
        server, clients, _ = run_round(server, clients, 3, cfg, train, val)
        for c in clients:
            assert leaves_equal(c.backbone, m0)


def test_strategy2_has_no_global_model():
    _, _, _, out = run_rounds(2, rounds=1)
    assert out[0][0].global_model is None


@pytest.mark.parametrize("strategy", [5, 6])
def test_retrieval_banks_after_final_round(strategy):
    cfg, _, _, out = run_rounds(strategy, rounds=2)
    assert all(c.bank is None for c in out[0][1])
    final_clients = out[1][1]
    assert all(c.bank is not None for c in final_clients)
    if strategy == 6:
        train = small_setup(6)[1]
        n_present = sum(len(per_class_mean_features(c, train).means) for c in final_clients)
        assert len(final_clients[0].bank) == n_present


@pytest.mark.parametrize("strategy", [1, 2, 3, 4, 6])
def test_measured_equals_symbolic(strategy):
    _, _, _, out = run_rounds(strategy, rounds=2)
    for _, _, m in out:
        assert m.bytes_measured == m.bytes_symbolic > 0


def test_non_fed_sends_nothing():
    _, _, _, out = run_rounds(0, rounds=2)
    assert all(m.bytes_measured == 0 == m.bytes_symbolic for _, _, m in out)


def test_round_strategy_mismatch():
    cfg, train, val, server, clients = small_setup(1)
    with pytest.raises(ConfigError):
        run_round(server, clients, 2, cfg, train, val)


@pytest.mark.parametrize("strategy", [0, 1, 2, 3, 4, 5, 6])
def test_rounds_deterministic_across_workers(strategy):
    a = run_rounds(strategy, rounds=2, workers=1)[3]
    b = run_rounds(strategy, rounds=2, workers=4)[3]
    for (_, ca, ma), (_, cb, mb) in zip(a, b):
        assert ma.accuracy == mb.accuracy and ma.bytes_measured == mb.bytes_measured
        for x, y in zip(ca, cb):
            assert leaves_equal(x.backbone, y.backbone)


# evaluation


def test_evaluate_chance_level():
    # labels drawn independently of the inputs: any model scores 1/n up to binomial noise
    cfg, train, val, server, clients = small_setup(2)
    rng = np.random.default_rng(0)
    inputs = rng.normal(size=(2000, 4))
    labels = rng.integers(0, 5, size=2000)
    acc = evaluate(2, server, clients[:1], Dataset(inputs, labels, 5), cfg)
    sigma = np.sqrt(0.2 * 0.8 / 2000)
    assert abs(acc - 0.2) <= 3 * sigma


def test_zero_embedding_counts_as_miss():
    backbone = BackboneParams([np.zeros((2, 2))], [np.zeros(2)])
    state = ClientState(0, backbone, HeadParams(np.eye(2)), np.arange(2))
    assert evaluate(2, ServerState(2), [state], Dataset(np.eye(2), np.array([0, 1]), 2)) == 0.0


def test_evaluate_centres_as_heads_is_perfect():
    ds = synth_generate(5, 10, 4, 0.0, seed=1)
    centers = class_centers(5, 4, 1)
    state = ClientState(0, BackboneParams([np.eye(4)], [np.zeros(4)]),
                        HeadParams(l2_normalize(centers, axis=1)), np.arange(len(ds)))
    assert evaluate(2, ServerState(2), [state], ds) == 1.0


def test_evaluate_strategy1_matches_offline_argmax():
    cfg, train, val, out = run_rounds(1, rounds=1)
    server = out[0][0]
    backbone, head = server.global_model
    h = val.inputs
    for w, b in zip(backbone.weights[:-1], backbone.biases[:-1]):
        h = np.maximum(h @ w.T + b, 0)
    emb = h @ backbone.weights[-1].T + backbone.biases[-1]
    pred = np.argmax(emb @ head.anchors.T + head.bias, axis=1)
    assert evaluate(1, server, out[0][1], val, cfg) == np.mean(pred == val.labels)


def test_evaluate_empty_validation():
    cfg, train, val, server, clients = small_setup(2)
    with pytest.raises(ConfigError):
        evaluate(2, server, clients, val.subset([]), cfg)


# configuration and state invariants


def test_strategy_id():
    assert strategy_id("non-fed") == 0 and strategy_id("3") == 3 and strategy_id(6) == 6
    for bad in ("7", "fedprox", 9):
        with pytest.raises(ConfigError):
            strategy_id(bad)


def test_server_state_invariant():
    with pytest.raises(ConfigError):
        ServerState(1)
    with pytest.raises(ConfigError):
        ServerState(2, (init_params(0, [2, 2]), HeadParams(np.eye(2))))


@pytest.mark.parametrize("bad", [dict(n_clients=0), dict(rounds=-1), dict(batch_size=0), dict(lr=-1.0),
                                 dict(workers=0), dict(m=2.0), dict(s=0.0)])
def test_federation_config_validation(bad):
    with pytest.raises(ConfigError):
        FederationConfig(**bad)


def test_strategy3_shares_initial_model():
    _, _, _, server, clients = small_setup(3)
    assert all(leaves_equal(c.m0, clients[0].m0) for c in clients)
    _, _, _, _, clients2 = small_setup(2)
    assert not leaves_equal(clients2[0].backbone, clients2[1].backbone)
