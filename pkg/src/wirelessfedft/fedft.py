"""Desk-scale split LoRA federated fine-tuning surrogate.

Each device holds a frozen linear embedding and its own softmax task head.
The server holds a frozen dense encoder plus a shared rank-r adapter
``A @ B``. A round proceeds as in the split protocol: devices upload
embeddings, the server returns features, devices compute their head
gradients and upload ``df_k/dz_k``, and the server completes the chain rule
through the adapter and averages over the scheduled devices.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from wirelessfedft.channel import ChannelConfig, deploy_devices, sample_gains
from wirelessfedft.scheduler import VirtualQueue, schedule, zeta

_BATCH_TAG = 0xBA7C


@dataclass
class ModelConfig:
    """Surrogate architecture and optimiser settings.

    ``encoder_tail_scale`` shrinks the second half of the encoder's singular
    values, standing in for a pre-trained encoder that is poorly matched to
    the downstream task; the adapter can restore up to ``rank`` of those
    directions.
    """

    input_dim: int = 32
    embed_dim: int = 16
    feat_dim: int = 16
    num_classes: int = 10
    rank: int = 4
    learning_rate: float = 0.05
    batch_size: int = 32
    bits_per_scalar: int = 32
    adapter_init_std: float = 0.1
    encoder_tail_scale: float = 0.1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("input_dim", "embed_dim", "feat_dim", "batch_size", "bits_per_scalar"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if not 1 <= self.rank <= min(self.embed_dim, self.feat_dim):
            raise ValueError("rank must satisfy 1 <= r <= min(embed_dim, feat_dim)")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")


@dataclass
class DataConfig:
    """Gaussian class-conditional mixture split into i.i.d. device shards."""

    pool_size: int = 10000
    device_share: float = 0.05
    test_size: int = 1000
    class_separation: float = 1.0
    noise_std: float = 1.0

    def __post_init__(self):
        if self.pool_size < 1 or self.test_size < 1:
            raise ValueError("pool_size and test_size must be positive")
        if not 0 < self.device_share <= 1:
            raise ValueError("device_share must lie in (0, 1]")


@dataclass
class DeviceDataset:
    features: np.ndarray
    labels: np.ndarray
    batch_size: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on sample count")
        if not 1 <= self.batch_size <= self.labels.size:
            raise ValueError("batch_size must be between 1 and the number of samples")

    def __len__(self) -> int:
        return self.labels.size

    def sample_batch(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        idx = rng.choice(self.labels.size, size=self.batch_size, replace=False)
        return self.features[idx], self.labels[idx]


def make_datasets(data_cfg: DataConfig, model_cfg: ModelConfig, num_devices: int,
                  rng: np.random.Generator) -> tuple[list[DeviceDataset], tuple[np.ndarray, np.ndarray]]:
    """Draw the pool, cut ``device_share`` of it per device, plus a test set."""
    per_device = int(round(data_cfg.device_share * data_cfg.pool_size))
    if per_device < model_cfg.batch_size:
        raise ValueError("device shard smaller than the minibatch")
    if per_device * num_devices > data_cfg.pool_size:
        raise ValueError("pool too small for the requested shards")
    d, c = model_cfg.input_dim, model_cfg.num_classes
    means = rng.normal(0.0, data_cfg.class_separation, size=(c, d))

    def draw(n):
        y = rng.integers(0, c, size=n)
        x = means[y] + rng.normal(0.0, data_cfg.noise_std, size=(n, d))
        return x, y

    x_pool, y_pool = draw(data_cfg.pool_size)
    perm = rng.permutation(data_cfg.pool_size)
    shards = [
        DeviceDataset(x_pool[perm[k * per_device:(k + 1) * per_device]],
                      y_pool[perm[k * per_device:(k + 1) * per_device]], model_cfg.batch_size)
        for k in range(num_devices)
    ]
    return shards, draw(data_cfg.test_size)


class SplitModel:
    """Parameters of the split model for ``num_devices`` devices.

    ``embeddings`` (K, input, embed) and ``encoder`` (embed, feat) are frozen.
    Trainable: adapter ``A`` (embed, r), ``B`` (r, feat) and per-device heads
    ``head_weights`` (K, feat, classes), ``head_biases`` (K, classes).
    """

    def __init__(self, embeddings, encoder, A, B, head_weights, head_biases, learning_rate):
        self.embeddings = np.asarray(embeddings, dtype=float)
        self.encoder = np.asarray(encoder, dtype=float)
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)
        self.head_weights = np.asarray(head_weights, dtype=float)
        self.head_biases = np.asarray(head_biases, dtype=float)
        self.learning_rate = float(learning_rate)
        e, f = self.encoder.shape
        r = self.A.shape[1]
        if self.A.shape[0] != e or self.B.shape != (r, f):
            raise ValueError("adapter shapes do not match the encoder")
        if not 1 <= r <= min(e, f):
            raise ValueError("adapter rank must satisfy 1 <= r <= min(embed_dim, feat_dim)")
        if self.embeddings.shape[2] != e or self.head_weights.shape[1] != f:
            raise ValueError("embedding/head shapes do not match the encoder")
        self.encoder.flags.writeable = False
        self.embeddings.flags.writeable = False

    @classmethod
    def initialize(cls, cfg: ModelConfig, num_devices: int, rng: np.random.Generator) -> "SplitModel":
        d, e, f, c, r = cfg.input_dim, cfg.embed_dim, cfg.feat_dim, cfg.num_classes, cfg.rank
        # the same "pre-trained" embedding is deployed on every device
        embed = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, e))
        u, _, vt = np.linalg.svd(rng.normal(size=(e, f)), full_matrices=False)
        s = np.ones(min(e, f))
        s[s.size // 2:] = cfg.encoder_tail_scale
        encoder = (u * s) @ vt
        A = rng.normal(0.0, cfg.adapter_init_std, size=(e, r))
        B = np.zeros((r, f))
        return cls(np.broadcast_to(embed, (num_devices, d, e)).copy(), encoder, A, B,
                   np.zeros((num_devices, f, c)), np.zeros((num_devices, c)), cfg.learning_rate)

    @property
    def num_devices(self) -> int:
        return self.head_weights.shape[0]

    def copy(self) -> "SplitModel":
        return SplitModel(self.embeddings.copy(), self.encoder.copy(), self.A.copy(), self.B.copy(),
                          self.head_weights.copy(), self.head_biases.copy(), self.learning_rate)

    def embed(self, k: int, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.embeddings.shape[1]:
            raise ValueError(f"expected inputs of shape (m, {self.embeddings.shape[1]}), got {x.shape}")
        return x @ self.embeddings[k]

    def encode(self, embedded: np.ndarray) -> np.ndarray:
        if embedded.ndim != 2 or embedded.shape[1] != self.encoder.shape[0]:
            raise ValueError("embedded batch does not match the encoder input width")
        return embedded @ self.encoder + (embedded @ self.A) @ self.B

    def head(self, k: int, features: np.ndarray) -> np.ndarray:
        return features @ self.head_weights[k] + self.head_biases[k]

    def trainable_vector(self) -> np.ndarray:
        return np.concatenate([self.A.ravel(), self.B.ravel(), self.head_weights.ravel(),
                               self.head_biases.ravel()])


@dataclass
class ForwardPass:
    """What one device's forward pass leaves behind on each side of the split."""

    device: int
    embedded: np.ndarray  # uplink z^e_k, cached by the server
    features: np.ndarray  # downlink z_k
    logits: np.ndarray


@dataclass
class LocalGradients:
    head_weight: np.ndarray
    head_bias: np.ndarray
    feature_grad: np.ndarray  # df_k/dz_k, the uploaded quantity
    loss: float


class MissingUpload(ValueError):
    """A scheduled device did not upload its feature gradient."""


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_norm
    m = labels.size
    loss = -float(log_p[np.arange(m), labels].mean())
    grad = np.exp(log_p)
    grad[np.arange(m), labels] -= 1.0
    return loss, grad / m


def forward_round(model: SplitModel, batches: dict, scheduled_set) -> dict[int, ForwardPass]:
    """Forward inference for every scheduled device; ``batches[k]`` holds inputs."""
    if len(scheduled_set) == 0:
        raise ValueError("scheduled_set must be nonempty")
    out = {}
    for k in scheduled_set:
        x = batches[k][0] if isinstance(batches[k], tuple) else batches[k]
        ze = model.embed(k, x)
        z = model.encode(ze)
        out[k] = ForwardPass(k, ze, z, model.head(k, z))
    return out


def local_gradients(model: SplitModel, fp: ForwardPass, labels) -> LocalGradients:
    """Device-side backward pass through the task head."""
    loss, dlogits = softmax_cross_entropy(fp.logits, np.asarray(labels, dtype=int))
    return LocalGradients(
        head_weight=fp.features.T @ dlogits,
        head_bias=dlogits.sum(axis=0),
        feature_grad=dlogits @ model.head_weights[fp.device].T,
        loss=loss,
    )


def adapter_gradient(model: SplitModel, embedded: np.ndarray, feature_grad: np.ndarray):
    """Chain rule from df/dz through z = ze W_c + (ze A) B to (dA, dB)."""
    return embedded.T @ (feature_grad @ model.B.T), (embedded @ model.A).T @ feature_grad


def aggregate_adapter_grads(model: SplitModel, uploads: dict, forwards: dict, scheduled_set):
    """Server-side average of the adapter gradient over the scheduled devices.

    ``uploads[k]`` is device k's ``df_k/dz_k``; ``forwards[k].embedded`` is
    the server's cached copy of that device's embedding.
    """
    if len(scheduled_set) == 0:
        raise ValueError("scheduled_set must be nonempty")
    gA = np.zeros_like(model.A)
    gB = np.zeros_like(model.B)
    for k in scheduled_set:
        if k not in uploads or k not in forwards:
            raise MissingUpload(f"no upload from scheduled device {k}")
        dA, dB = adapter_gradient(model, forwards[k].embedded, uploads[k])
        gA += dA
        gB += dB
    n = len(scheduled_set)
    return gA / n, gB / n


def apply_updates(model: SplitModel, adapter_grad, head_grads: dict, scheduled_set,
                  lr: float | None = None) -> None:
    """SGD step on the adapter and on the scheduled devices' heads, in place."""
    lr = model.learning_rate if lr is None else lr
    if lr == 0.0:
        return
    for k in scheduled_set:
        g = head_grads[k]
        model.head_weights[k] -= lr * g.head_weight
        model.head_biases[k] -= lr * g.head_bias
    gA, gB = adapter_grad
    model.A -= lr * gA
    model.B -= lr * gB


def payload_bits(batch_size: int, embed_dim: int, feat_dim: int, rank: int, bits_per_scalar: int) -> int:
    """Bits exchanged per scheduled device per round.

    q*m*(embed + 2*feat) covers the uplink embeddings, downlink features and
    uplink feature gradients of an m-sample batch; q*r*(embed + feat) covers
    the adapter bookkeeping. ``rank = 0`` drops the second term.
    """
    if min(batch_size, embed_dim, feat_dim, bits_per_scalar) < 1 or rank < 0:
        raise ValueError("payload dimensions must be positive")
    q = bits_per_scalar
    return q * batch_size * (embed_dim + 2 * feat_dim) + q * rank * (embed_dim + feat_dim)


def model_payload(cfg: ModelConfig) -> int:
    return payload_bits(cfg.batch_size, cfg.embed_dim, cfg.feat_dim, cfg.rank, cfg.bits_per_scalar)


def device_loss(model: SplitModel, k: int, x, y) -> float:
    z = model.encode(model.embed(k, x))
    return softmax_cross_entropy(model.head(k, z), np.asarray(y, dtype=int))[0]


def global_loss(model: SplitModel, datasets) -> float:
    """F(W): mean over devices of each device's loss on its whole shard."""
    return float(np.mean([device_loss(model, k, d.features, d.labels) for k, d in enumerate(datasets)]))


def full_gradients(model: SplitModel, datasets):
    """Per-device full-shard gradients.

    Returns ``(head_grads, adapter_grads)`` where ``head_grads[k]`` is the
    flattened (W_k, b_k) gradient of f_k and ``adapter_grads[k]`` the
    flattened (A, B) gradient of f_k.
    """
    heads, adapters = [], []
    for k, d in enumerate(datasets):
        fp = forward_round(model, {k: d.features}, [k])[k]
        g = local_gradients(model, fp, d.labels)
        dA, dB = adapter_gradient(model, fp.embedded, g.feature_grad)
        heads.append(np.concatenate([g.head_weight.ravel(), g.head_bias]))
        adapters.append(np.concatenate([dA.ravel(), dB.ravel()]))
    return heads, adapters


def global_gradient(model: SplitModel, datasets) -> np.ndarray:
    """Gradient of F(W) in ``trainable_vector`` layout."""
    heads, adapters = full_gradients(model, datasets)
    K = len(datasets)
    head_part = np.stack(heads) / K
    f, c = model.head_weights.shape[1:]
    w = head_part[:, :f * c].ravel()
    b = head_part[:, f * c:].ravel()
    return np.concatenate([np.sum(adapters, axis=0) / K, w, b])


class Evaluator:
    """Full-shard training loss and test accuracy with embeddings cached.

    The embeddings are frozen, so ``x @ W_e`` is computed once per device and
    every device is evaluated in one batched product.
    """

    def __init__(self, model: SplitModel, datasets, test_set):
        self.train_x = np.stack([model.embed(k, d.features) for k, d in enumerate(datasets)])
        self.train_y = np.stack([d.labels for d in datasets])
        x_test, y_test = test_set
        self.test_x = np.stack([model.embed(k, x_test) for k in range(model.num_devices)])
        self.y_test = np.asarray(y_test, dtype=int)

    @staticmethod
    def _logits(model: SplitModel, embedded: np.ndarray) -> np.ndarray:
        K, n, e = embedded.shape
        flat = embedded.reshape(K * n, e)
        z = (flat @ model.encoder + (flat @ model.A) @ model.B).reshape(K, n, -1)
        return z @ model.head_weights + model.head_biases[:, None, :]

    def train_loss(self, model: SplitModel) -> float:
        logits = self._logits(model, self.train_x)
        shifted = logits - logits.max(axis=2, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=2))
        picked = np.take_along_axis(shifted, self.train_y[:, :, None], axis=2)[:, :, 0]
        # per-device mean, then mean over devices (shards are equal-sized)
        return float(np.mean(log_norm - picked))

    def test_accuracy(self, model: SplitModel) -> float:
        pred = np.argmax(self._logits(model, self.test_x), axis=2)
        return float(np.mean(pred == self.y_test[None, :]))


@dataclass
class RoundTrace:
    t: int
    n: int
    delay: float
    queue: float
    objective: float
    train_loss: float
    test_accuracy: float
    payload: int
    wall_time: float  # seconds spent in the scheduler call
    scheduled_set: tuple[int, ...] = field(default=(), repr=False)


@dataclass
class TrainingRun:
    policy: str
    seed: int
    traces: list[RoundTrace]
    model: SplitModel | None
    datasets: list[DeviceDataset] | None
    queue: VirtualQueue
    initial_loss: float = float("nan")
    # (round, trainable vector, gradient of F) pairs recorded every probe_every rounds
    probes: list[tuple[int, np.ndarray, np.ndarray]] = field(default_factory=list)


def batch_rng(seed: int, t: int, k: int) -> np.random.Generator:
    """Minibatch generator shared by every policy for (seed, round, device)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(t), int(k), _BATCH_TAG]))


def training_step(model: SplitModel, datasets, scheduled_set, seed: int, t: int) -> float:
    """One protocol round for ``scheduled_set``; returns the mean batch loss."""
    batches = {k: datasets[k].sample_batch(batch_rng(seed, t, k)) for k in scheduled_set}
    forwards = forward_round(model, {k: b[0] for k, b in batches.items()}, scheduled_set)
    grads = {k: local_gradients(model, forwards[k], batches[k][1]) for k in scheduled_set}
    uploads = {k: g.feature_grad for k, g in grads.items()}
    adapter = aggregate_adapter_grads(model, uploads, forwards, scheduled_set)
    apply_updates(model, adapter, grads, scheduled_set)
    return float(np.mean([g.loss for g in grads.values()]))


def simulate(config, policy: str | None = None, seed: int | None = None, train: bool = True,
             probe_every: int = 0) -> TrainingRun:
    """Run ``config.rounds`` rounds of scheduling (and training when ``train``).

    Channel draws and minibatches depend only on (seed, round, device), so
    different policies see common random numbers. With ``train=False`` only
    the channel, scheduler and queue are simulated and the learning columns
    are NaN.
    """
    seed = config.seeds[0] if seed is None else int(seed)
    sched_cfg = config.scheduler_config()
    policy = policy or sched_cfg.policy
    channel_cfg = ChannelConfig(**{**config.channel.__dict__, "rng_seed": seed})
    mu = model_payload(config.model)
    budget = sched_cfg.delay_budget
    positions = deploy_devices(channel_cfg)
    K = channel_cfg.num_devices

    model = datasets = evaluator = None
    initial_loss = float("nan")
    if train:
        data_ss, model_ss = np.random.SeedSequence([seed, 0xDA7A]).spawn(2)
        datasets, test_set = make_datasets(config.data, config.model, K, np.random.default_rng(data_ss))
        model = SplitModel.initialize(config.model, K, np.random.default_rng(model_ss))
        evaluator = Evaluator(model, datasets, test_set)
        initial_loss = evaluator.train_loss(model)

    run = TrainingRun(policy, seed, [], model, datasets, VirtualQueue(), initial_loss)
    queue = run.queue
    for t in range(1, config.rounds + 1):
        snapshot = sample_gains(channel_cfg, positions, t)
        start = time.perf_counter()
        decision = schedule(snapshot, queue, sched_cfg, mu, channel_cfg, t, policy)
        wall = time.perf_counter() - start
        if decision.n:
            queue.update(decision.delay, budget, zeta(t, sched_cfg), sched_cfg.queue_variant)
        loss = acc = float("nan")
        if train:
            if decision.n:
                training_step(model, datasets, decision.scheduled_set, seed, t)
            loss = evaluator.train_loss(model)
            acc = evaluator.test_accuracy(model)
            if probe_every and t % probe_every == 0:
                run.probes.append((t, model.trainable_vector(), global_gradient(model, datasets)))
        run.traces.append(RoundTrace(t, decision.n, decision.delay, queue.value, decision.objective,
                                     loss, acc, mu, wall, decision.scheduled_set))
    return run


def run_training(config, policy: str | None = None, seed: int | None = None) -> list[RoundTrace]:
    """Train under ``policy`` for one seed and return the per-round traces."""
    return simulate(config, policy, seed).traces
