"""Clients, server and the communication strategies.

Strategy ids::

    0  non-fed   clients train alone, nothing is exchanged
    1  weights   FedAvg: average every client model, broadcast the average
    2  features  exchange per-class mean embeddings, use them as head anchors
    3  features + pull of every backbone toward the shared initial weights
    4  weights, then features on the synchronised models
    5  as 4; after the last round every training embedding is shared and
       clients classify by kNN over that bank
    6  as 5 but the bank holds every client's per-class means

Every message crosses a :class:`Channel`, which serialises it with the wire
format in :mod:`featfed.messages`, counts the bytes and hands the receiver the
decoded copy.
"""

from __future__ import annotations

import dataclasses
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .cost import CostModel, round_cost
from .data import Dataset
from .errors import AggregationError, ConfigError, ShapeError
from .losses import MarginConfig, arcface_loss, cosine_logits, linear_logits, softmax_ce
from .messages import (
    ClassMeanFeatures,
    LabeledFeatureSet,
    WeightSnapshot,
    decode,
    encode,
    measure_message,
)
from .nn import (
    AdamState,
    BackboneParams,
    HeadParams,
    adam_step,
    forward,
    init_params,
    l2_normalize,
    loss_and_grad,
    tree_leaves,
    tree_unflatten,
)
from .retrieval import FeatureBank, knn_fit, knn_predict_many

NON_FED = 0
STRATEGIES = (1, 2, 3, 4, 5, 6)
STRATEGY_LABELS = {NON_FED: "non-fed", 1: "1", 2: "2", 3: "3", 4: "4", 5: "5", 6: "6"}
SOFTMAX_STRATEGIES = (NON_FED, 1)
GLOBAL_MODEL_STRATEGIES = (1, 4, 5, 6)
RETRIEVAL_STRATEGIES = (5, 6)
DEFAULT_KNN_K = {5: 5, 6: 1}


def strategy_id(value) -> int:
    if isinstance(value, str):
        v = value.strip().lower()
        if v in ("non-fed", "nonfed", "0"):
            return NON_FED
        try:
            value = int(v)
        except ValueError:
            raise ConfigError(f"unknown strategy {value!r}") from None
    if value not in STRATEGY_LABELS:
        raise ConfigError(f"unknown strategy {value!r}; expected 1-6 or 'non-fed'")
    return int(value)


@dataclass
class FederationConfig:
    n_clients: int = 10
    rounds: int = 16
    local_epochs: int = 1
    batch_size: int = 16
    lr: float = 1e-4
    d: int = 16
    hidden: tuple = (64, 32)
    m: float = 0.2
    s: float = 20.0
    alpha: float = 0.5
    seed: int = 0
    knn_k: int | None = None
    knn_metric: str = "cosine"
    # strategy 4-6: include the head anchors in the averaged model
    average_head: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.n_clients < 1:
            raise ConfigError(f"n_clients must be >= 1, got {self.n_clients}")
        if self.rounds < 0:
            raise ConfigError(f"rounds must be >= 0, got {self.rounds}")
        if self.local_epochs < 0:
            raise ConfigError(f"local_epochs must be >= 0, got {self.local_epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.d < 1:
            raise ConfigError(f"d must be >= 1, got {self.d}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        MarginConfig(self.m, self.s)

    @property
    def margin(self) -> MarginConfig:
        return MarginConfig(self.m, self.s)

    def arch(self, d_in: int) -> list[int]:
        return [d_in, *self.hidden, self.d]

    def knn_k_for(self, strategy: int) -> int:
        return self.knn_k if self.knn_k is not None else DEFAULT_KNN_K.get(strategy, 5)


@dataclass
class ClientState:
    id: int
    backbone: BackboneParams
    head: HeadParams
    shard: np.ndarray
    adam: AdamState | None = None
    m0: BackboneParams | None = None
    bank: FeatureBank | None = None


@dataclass
class ServerState:
    strategy: int
    global_model: tuple | None = None
    round: int = 0

    def __post_init__(self):
        has_model = self.global_model is not None
        if has_model != (self.strategy in GLOBAL_MODEL_STRATEGIES):
            raise ConfigError(f"strategy {self.strategy}: global model present={has_model} is not allowed")


@dataclass
class RoundMetrics:
    round: int
    strategy: str
    accuracy: float
    bytes_symbolic: int
    bytes_measured: int
    wall_ms: float = 0.0


@dataclass
class Channel:
    """Serialises messages and keeps a running byte count."""

    payload_bytes: int = 0
    header_bytes: int = 0
    messages: int = 0

    def send(self, msg):
        raw = encode(msg)
        size = measure_message(msg)
        self.payload_bytes += size.payload
        self.header_bytes += size.header
        self.messages += 1
        return decode(raw)


def _seed_int(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def client_rng(seed: int, client_id: int, round_idx: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(client_id), int(round_idx)])


# initialisation


def init_head(seed: int, n_classes: int, d: int, softmax: bool) -> HeadParams:
    rng = np.random.default_rng([seed, 7])
    limit = np.sqrt(6.0 / (n_classes + d))
    anchors = rng.uniform(-limit, limit, size=(n_classes, d)).astype(np.float32).astype(np.float64)
    if softmax:
        return HeadParams(anchors, np.zeros(n_classes))
    return HeadParams(l2_normalize(anchors, axis=1))


def init_federation(strategy, cfg: FederationConfig, train: Dataset, shards) -> tuple[ServerState, list[ClientState]]:
    """Server and clients before the first round.

    Weight-averaging strategies start every client from one global model;
    strategy 3 shares one initial backbone ``M0`` (and anchors); strategy 2
    and non-fed give each client its own random initialisation.
    """
    strategy = strategy_id(strategy)
    arch = cfg.arch(train.d_in)
    softmax = strategy in SOFTMAX_STRATEGIES
    shared_seed = _seed_int(cfg.seed, 0)
    clients = []
    for cid, shard in enumerate(shards):
        seed = shared_seed if strategy in (1, 3, 4, 5, 6) else _seed_int(cfg.seed, 1 + cid)
        backbone = init_params(seed, arch)
        head = init_head(seed, train.n_classes, cfg.d, softmax)
        m0 = backbone.copy() if strategy == 3 else None
        clients.append(ClientState(cid, backbone, head, np.asarray(shard, dtype=np.int64), None, m0))
    global_model = None
    if strategy in GLOBAL_MODEL_STRATEGIES:
        global_model = (clients[0].backbone.copy(), clients[0].head.copy())
    return ServerState(strategy, global_model, 0), clients


# client side


def _trainables(state: ClientState, loss_kind: str, train_head: bool):
    if loss_kind == "softmax":
        return (state.backbone, state.head)
    if train_head:
        return (state.backbone, state.head.anchors)
    return (state.backbone,)


def client_local_train(
    state: ClientState,
    data: Dataset,
    k: int,
    loss_kind: str,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
    margin: MarginConfig = MarginConfig(),
    train_head: bool = False,
) -> ClientState:
    """``k`` shuffled minibatch passes over the client's shard.

    ``loss_kind`` is ``"softmax"`` (backbone plus linear head with bias) or
    ``"arcface"``; with ArcFace the anchors are only updated if ``train_head``.
    """
    if loss_kind not in ("softmax", "arcface"):
        raise ConfigError(f"unknown loss kind {loss_kind!r}")
    if k < 0 or batch_size < 1:
        raise ConfigError("k must be >= 0 and batch_size >= 1")
    shard = np.asarray(state.shard, dtype=np.int64)
    if shard.size == 0 or k == 0:
        return state
    params = _trainables(state, loss_kind, train_head)
    adam = state.adam
    if adam is None or len(adam.m) != len(tree_leaves(params)):
        adam = AdamState.zeros_like(params)
    frozen = state.head.anchors

    def objective(p, batch):
        x, y = batch
        emb = forward(p[0], x)
        if loss_kind == "softmax":
            head = p[1]
            return softmax_ce(emb @ head.anchors.T, y, head.bias)
        anchors = p[1] if train_head else frozen
        return arcface_loss(emb, anchors, y, margin)

    for _ in range(k):
        order = rng.permutation(shard)
        for start in range(0, order.size, batch_size):
            idx = order[start:start + batch_size]
            if loss_kind == "arcface":
                # a zero embedding has no angle; such rows carry no ArcFace signal
                idx = idx[_nonzero_rows(forward(params[0], data.inputs[idx]))]
                if idx.size == 0:
                    continue
            _, grads = loss_and_grad(objective, params, (data.inputs[idx], data.labels[idx]))
            params, adam = adam_step(params, grads, adam, lr)

    if loss_kind == "softmax":
        backbone, head = params
    elif train_head:
        backbone, anchors = params
        head = HeadParams(anchors, state.head.bias)
    else:
        (backbone,) = params
        head = state.head
    return dataclasses.replace(state, backbone=backbone, head=head, adam=adam)


def _nonzero_rows(x) -> np.ndarray:
    return np.any(np.asarray(x) != 0.0, axis=1)


def _without_zero_means(msg: ClassMeanFeatures) -> ClassMeanFeatures:
    """Drop classes whose mean vector is exactly zero (no direction to assign)."""
    keep = [c for c in msg.classes if np.any(np.asarray(msg.means[c]) != 0.0)]
    if len(keep) == len(msg.classes):
        return msg
    return ClassMeanFeatures({c: msg.means[c] for c in keep}, {c: msg.counts[c] for c in keep}, msg.n_classes, msg.d)


def shard_embeddings(state: ClientState, data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    shard = np.asarray(state.shard, dtype=np.int64)
    if shard.size == 0:
        return np.zeros((0, state.backbone.embedding_dim)), np.zeros(0, dtype=np.int64)
    return forward(state.backbone, data.inputs[shard]), data.labels[shard]


def class_means_of(emb: np.ndarray, labels: np.ndarray, n_classes: int, d: int) -> ClassMeanFeatures:
    if emb.shape[0] == 0:
        return ClassMeanFeatures({}, {}, n_classes, d)
    sums, counts = kernels.class_sums(emb, labels, n_classes)
    present = [c for c in range(n_classes) if counts[c] > 0]
    return ClassMeanFeatures(
        {c: sums[c] / counts[c] for c in present}, {c: int(counts[c]) for c in present}, n_classes, d
    )


def per_class_mean_features(state: ClientState, data: Dataset) -> ClassMeanFeatures:
    """Mean backbone embedding of every class present in the client's shard."""
    emb, labels = shard_embeddings(state, data)
    return class_means_of(emb, labels, data.n_classes, state.backbone.embedding_dim)


def assign_head(state: ClientState, means: ClassMeanFeatures) -> ClientState:
    """Replace the anchor of every reported class by its L2-normalised mean."""
    anchors = np.array(state.head.anchors, dtype=np.float64, copy=True)
    for c in means.classes:
        vec = np.asarray(means.means[c], dtype=np.float64)
        if vec.shape != (anchors.shape[1],):
            raise ShapeError(f"mean of class {c} has shape {vec.shape}, head expects ({anchors.shape[1]},)")
        anchors[c] = l2_normalize(vec)
    return dataclasses.replace(state, head=HeadParams(anchors, state.head.bias))


# server side


def average_weights(models, ids=None):
    """Unweighted element-wise mean of congruent parameter trees.

    With ``ids`` the models are summed in ascending id order, which makes the
    result independent of the order of the argument list.
    """
    models = list(models)
    if not models:
        raise AggregationError("nothing to average")
    if ids is not None:
        if len(ids) != len(models):
            raise AggregationError("ids and models differ in length")
        models = [m for _, m in sorted(zip(ids, models), key=lambda pair: pair[0])]
    leaves = [tree_leaves(m) for m in models]
    n_leaves = len(leaves[0])
    if any(len(lv) != n_leaves for lv in leaves):
        raise AggregationError("models have different structure")
    out = []
    for j in range(n_leaves):
        shape = np.shape(leaves[0][j])
        acc = np.zeros(shape)
        for lv in leaves:
            if np.shape(lv[j]) != shape:
                raise AggregationError(f"shape mismatch {np.shape(lv[j])} vs {shape}")
            acc = acc + lv[j]
        out.append(acc / len(models))
    return tree_unflatten(models[0], out)


def aggregate_class_means(client_msgs) -> ClassMeanFeatures:
    """Per class, the unweighted mean over the clients that reported it.

    The output count of a class is the number of reporting clients.
    """
    client_msgs = list(client_msgs)
    if not client_msgs:
        raise AggregationError("no client messages to aggregate")
    dims = {m.d for m in client_msgs if m.means}
    if len(dims) > 1:
        raise AggregationError(f"clients report different feature dims {sorted(dims)}")
    d = dims.pop() if dims else max(m.d for m in client_msgs)
    n_classes = max(m.n_classes for m in client_msgs)
    means, counts = {}, {}
    for c in range(n_classes):
        reporting = [np.asarray(m.means[c], dtype=np.float64) for m in client_msgs if c in m.means]
        if not reporting:
            continue
        acc = np.zeros(d)
        for vec in reporting:
            acc = acc + vec
        means[c] = acc / len(reporting)
        counts[c] = len(reporting)
    return ClassMeanFeatures(means, counts, n_classes, d)


def regularize_backbone(m0: BackboneParams, mtilde: BackboneParams, n_clients: int) -> BackboneParams:
    """Pull trained weights toward the shared initial weights.

    ``((n - 1) * M0 + Mtilde) / n``, evaluated as ``M0 + (Mtilde - M0) / n`` so
    that ``Mtilde == M0`` returns ``M0`` bit for bit.
    """
    if n_clients < 1:
        raise ConfigError(f"n_clients must be >= 1, got {n_clients}")
    a, b = tree_leaves(m0), tree_leaves(mtilde)
    if len(a) != len(b) or any(np.shape(x) != np.shape(y) for x, y in zip(a, b)):
        raise AggregationError("M0 and the trained backbone have different shapes")
    if n_clients == 1:
        return tree_unflatten(mtilde, [np.array(y, dtype=np.float64, copy=True) for y in b])
    return tree_unflatten(m0, [x + (y - x) / n_clients for x, y in zip(a, b)])


# evaluation


def _accuracy(pred, labels) -> float:
    return float(np.mean(np.asarray(pred) == np.asarray(labels)))


def softmax_predict(backbone: BackboneParams, head: HeadParams, inputs) -> np.ndarray:
    return np.argmax(linear_logits(forward(backbone, inputs), head), axis=1)


def cosine_predict(backbone: BackboneParams, head: HeadParams, inputs) -> np.ndarray:
    """Nearest anchor by cosine; a zero embedding has no angle and predicts -1 (a miss)."""
    emb = forward(backbone, inputs)
    ok = _nonzero_rows(emb)
    pred = np.full(emb.shape[0], -1, dtype=np.int64)
    if ok.any():
        pred[ok] = np.argmax(cosine_logits(emb[ok], head), axis=1)
    return pred


def retrieval_predict(backbone: BackboneParams, bank: FeatureBank, inputs, k: int) -> np.ndarray:
    """kNN over ``bank``; under the cosine metric a zero embedding predicts -1 (a miss)."""
    emb = forward(backbone, inputs)
    ok = _nonzero_rows(emb) if bank.metric == "cosine" else np.ones(emb.shape[0], dtype=bool)
    pred = np.full(emb.shape[0], -1, dtype=np.int64)
    if ok.any():
        pred[ok] = knn_predict_many(bank, emb[ok], min(k, len(bank)))
    return pred


def evaluate(strategy, server: ServerState, clients, val: Dataset, cfg: FederationConfig | None = None,
             use_retrieval: bool | None = None) -> float:
    """Validation accuracy under the strategy's prediction rule.

    Strategy 1 scores the server model; every other strategy averages the
    per-client accuracies.  Strategies 5 and 6 use kNN once clients hold a
    feature bank (or when ``use_retrieval`` forces it).
    """
    strategy = strategy_id(strategy)
    if len(val) == 0:
        raise ConfigError("empty validation set")
    cfg = cfg or FederationConfig()
    if strategy == 1:
        backbone, head = server.global_model
        return _accuracy(softmax_predict(backbone, head, val.inputs), val.labels)
    if use_retrieval is None:
        use_retrieval = strategy in RETRIEVAL_STRATEGIES and all(c.bank is not None for c in clients)
    scores = []
    for c in sorted(clients, key=lambda c: c.id):
        if strategy == NON_FED:
            pred = softmax_predict(c.backbone, c.head, val.inputs)
        elif use_retrieval:
            pred = retrieval_predict(c.backbone, c.bank, val.inputs, cfg.knn_k_for(strategy))
        else:
            pred = cosine_predict(c.backbone, c.head, val.inputs)
        scores.append(_accuracy(pred, val.labels))
    return float(np.mean(scores))


# rounds


def _map_clients(fn, clients, workers: int):
    if workers <= 1 or len(clients) <= 1:
        return [fn(c) for c in clients]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, clients))


def _local_phase(clients, train, cfg, round_idx, loss_kind, train_head):
    def work(c):
        rng = client_rng(cfg.seed, c.id, round_idx)
        return client_local_train(c, train, cfg.local_epochs, loss_kind, cfg.lr, cfg.batch_size, rng,
                                  cfg.margin, train_head)

    return _map_clients(work, clients, cfg.workers)


def _snapshot(c: ClientState, strategy: int, cfg: FederationConfig) -> WeightSnapshot:
    if strategy == 1 or cfg.average_head:
        return WeightSnapshot(c.backbone, c.head)
    return WeightSnapshot(c.backbone, None)


def _weights_phase(server, clients, strategy, cfg, channel):
    ups = [channel.send(_snapshot(c, strategy, cfg)) for c in clients]
    avg = average_weights([(u.backbone, u.head) for u in ups], ids=[c.id for c in clients])
    down = WeightSnapshot(*avg)
    synced = []
    for c in clients:
        got = channel.send(down)
        head = got.head if got.head is not None else c.head
        synced.append(dataclasses.replace(c, backbone=got.backbone, head=head))
    # the server keeps exactly what it broadcast
    kept = decode(encode(down))
    server_head = kept.head if kept.head is not None else synced[0].head.copy()
    server = dataclasses.replace(server, global_model=(kept.backbone, server_head))
    return server, synced


def _features_phase(server, clients, train, cfg, channel):
    msgs = _map_clients(lambda c: per_class_mean_features(c, train), clients, cfg.workers)
    ups = [channel.send(m) for m in msgs]
    agg = aggregate_class_means(ups)
    out = [assign_head(c, _without_zero_means(channel.send(agg))) for c in clients]
    agg = _without_zero_means(agg)
    if server.global_model is not None:
        backbone, head = server.global_model
        anchors = np.array(head.anchors, copy=True)
        for cls in agg.classes:
            anchors[cls] = l2_normalize(np.asarray(agg.means[cls]))
        server = dataclasses.replace(server, global_model=(backbone, HeadParams(anchors, head.bias)))
    return server, out


def _relay(channel, outgoing, clients):
    """Forward every client's message to every client via the server.

    Each (source, destination) pair is one upload plus one download.
    """
    inbox = {c.id: [] for c in clients}
    for src in clients:
        for dst in clients:
            channel.send(outgoing[src.id])
            inbox[dst.id].append(channel.send(outgoing[src.id]))
    return inbox


def _fit_bank(vecs, labs, metric):
    if metric == "cosine":
        keep = _nonzero_rows(vecs)
        vecs, labs = vecs[keep], labs[keep]
    return knn_fit(vecs, labs, metric)


def _retrieval_phase(server, clients, train, strategy, cfg, channel):
    if strategy == 6:
        msgs = _map_clients(lambda c: per_class_mean_features(c, train), clients, cfg.workers)
        inbox = _relay(channel, {c.id: m for c, m in zip(clients, msgs)}, clients)
        out = []
        for c in clients:
            received = inbox[c.id]
            vecs = [m.means[k] for m in received for k in m.classes]
            labs = [k for m in received for k in m.classes]
            agg = _without_zero_means(aggregate_class_means(received))
            c = assign_head(c, agg)
            out.append(dataclasses.replace(c, bank=_fit_bank(np.array(vecs), np.array(labs), cfg.knn_metric)))
        return server, out

    feats = _map_clients(lambda c: shard_embeddings(c, train), clients, cfg.workers)
    outgoing = {c.id: LabeledFeatureSet(e, y) for c, (e, y) in zip(clients, feats)}
    inbox = _relay(channel, outgoing, clients)
    d = clients[0].backbone.embedding_dim
    out = []
    for c in clients:
        received = inbox[c.id]
        vecs = np.concatenate([m.vectors for m in received]) if received else np.zeros((0, d))
        labs = np.concatenate([m.labels for m in received])
        agg = aggregate_class_means([class_means_of(m.vectors, m.labels, train.n_classes, d) for m in received])
        c = assign_head(c, _without_zero_means(agg))
        out.append(dataclasses.replace(c, bank=_fit_bank(vecs, labs, cfg.knn_metric)))
    return server, out


def round_cost_model(strategy, cfg: FederationConfig, clients, train: Dataset) -> CostModel:
    snap = _snapshot(clients[0], strategy_id(strategy), cfg)
    return CostModel(
        w_bytes=measure_message(snap).payload,
        d=cfg.d,
        n_clients=len(clients),
        n_classes=train.n_classes,
        n_samples=len(train),
    )


def symbolic_round_bytes(strategy: int, cost_model: CostModel, final_round: bool) -> int:
    if strategy == NON_FED:
        return 0
    if strategy in RETRIEVAL_STRATEGIES and not final_round:
        return round_cost(4, cost_model)
    return round_cost(strategy, cost_model)


def run_round(server: ServerState, clients, strategy, cfg: FederationConfig, train: Dataset,
              val: Dataset | None = None, final_round: bool = False):
    """One communication round. Returns ``(server, clients, RoundMetrics)``.

    ``accuracy`` is NaN when no validation set is given.
    """
    t0 = time.perf_counter()
    strategy = strategy_id(strategy)
    if strategy != server.strategy:
        raise ConfigError(f"server runs strategy {server.strategy}, round asked for {strategy}")
    round_idx = server.round + 1
    clients = sorted(clients, key=lambda c: c.id)
    channel = Channel()
    cost_model = round_cost_model(strategy, cfg, clients, train)

    if strategy in SOFTMAX_STRATEGIES:
        clients = _local_phase(clients, train, cfg, round_idx, "softmax", True)
        if strategy == 1:
            server, clients = _weights_phase(server, clients, strategy, cfg, channel)
    elif strategy in (2, 3):
        clients = _local_phase(clients, train, cfg, round_idx, "arcface", False)
        server, clients = _features_phase(server, clients, train, cfg, channel)
        if strategy == 3:
            n = len(clients)
            clients = [dataclasses.replace(c, backbone=regularize_backbone(c.m0, c.backbone, n)) for c in clients]
    else:
        clients = _local_phase(clients, train, cfg, round_idx, "arcface", True)
        server, clients = _weights_phase(server, clients, strategy, cfg, channel)
        if strategy in RETRIEVAL_STRATEGIES and final_round:
            server, clients = _retrieval_phase(server, clients, train, strategy, cfg, channel)
        else:
            server, clients = _features_phase(server, clients, train, cfg, channel)

    server = dataclasses.replace(server, round=round_idx)
    accuracy = float("nan") if val is None else evaluate(strategy, server, clients, val, cfg)
    metrics = RoundMetrics(
        round=round_idx,
        strategy=STRATEGY_LABELS[strategy],
        accuracy=accuracy,
        bytes_symbolic=symbolic_round_bytes(strategy, cost_model, final_round),
        bytes_measured=channel.payload_bytes,
        wall_ms=(time.perf_counter() - t0) * 1000.0,
    )
    return server, clients, metrics
