"""
Federated training simulation.

A global round broadcasts the global generator and discriminator to every
client, lets each client train for E local epochs on its own molecules,
collects the local models and averages them (FedAvg) into new global models.
Clients are simulated in-process; each one owns its data slice, models,
optimizer states and random generator.
"""
import copy
import logging
import time
from collections import OrderedDict, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from Molecules.autodiff import AdamState, configure_determinism, default_dtype, make_generator
from Molecules.gan import (
    EmptyDataset, DiscriminatorModel, GeneratorModel, GradientPenaltyConfig, TrainingOptions, draw_noise,
    encode_graphs, initialize_parameters, local_epoch,
)
from Molecules.models import AggregationWeighting, LossForm, PartitionMode
from Molecules.molgraph import N_MAX, molecular_formula

logger = logging.getLogger(__name__)

RATIO_TOLERANCE = 1e-9
CLIENT_SEED_STRIDE = 1000


class BadRatios(ValueError):
    pass


class ArchitectureMismatch(ValueError):
    pass


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int = 4
    epochs_per_round: int = 1000
    batch_size: int = 16
    rounds: int = 100
    partition: str = PartitionMode.IID
    alpha: float = 0.5
    seed: int = 0
    aggregation: str = AggregationWeighting.SAMPLES
    split_ratios: tuple = (0.8, 0.1, 0.1)
    deterministic: bool = False
    workers: int = 1

    n_max: int = N_MAX
    noise_dim: int = 16
    generator_dims: tuple = (32, 128)
    conv_dims: tuple = (32, 64)
    reduce_dim: int = 32
    head_dims: tuple = (64, 1)
    dropout_gen: float = 0.0
    dropout_disc: float = 0.0

    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lr_decay_interval: int = 1000
    lr_decay_factor: float = 100.0
    penalty: GradientPenaltyConfig = field(default_factory=GradientPenaltyConfig)
    loss_form: str = LossForm.WGAN
    temperature: float = 1.0
    noise_resample_interval: int = 0

    eval_interval: int = 0
    plateau_window: int = 10
    plateau_threshold: float = 0.05
    stop_on_plateau: bool = False

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError(f"num_clients must be at least 1, got {self.num_clients}")
        if self.epochs_per_round < 1:
            raise ValueError(f"epochs_per_round must be at least 1, got {self.epochs_per_round}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.rounds < 0:
            raise ValueError(f"rounds must be non-negative, got {self.rounds}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")


def _round_half_up(value):
    return int(np.floor(value + 0.5))


def split_dataset(n, ratios=(0.8, 0.1, 0.1), seed=0):
    """Seeded shuffle of range(n) cut into train / validation / test index lists."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > RATIO_TOLERANCE:
        raise BadRatios(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")

    order = np.random.default_rng(seed).permutation(n)
    n_train = min(n, _round_half_up(n * ratios[0]))
    n_val = min(n - n_train, _round_half_up(n * ratios[1]))
    if ratios[2] == 0:
        n_val = n - n_train
    train = sorted(order[:n_train].tolist())
    val = sorted(order[n_train:n_train + n_val].tolist())
    test = sorted(order[n_train + n_val:].tolist())
    return train, val, test


def _classes(indices, labels):
    groups = defaultdict(list)
    for index, label in zip(indices, labels):
        groups[label].append(index)
    return [groups[label] for label in sorted(groups)]


def partition_iid(train_indices, labels, num_clients, seed=0):
    """
    Deal every class round-robin over the clients after a seeded shuffle; the
    starting client rotates between classes so client totals stay balanced.
    """
    rng = np.random.default_rng(seed)
    shares = [[] for _ in range(num_clients)]
    offset = 0
    for members in _classes(train_indices, labels):
        for position, index in enumerate(rng.permutation(members).tolist()):
            shares[(offset + position) % num_clients].append(index)
        offset = (offset + len(members)) % num_clients
    return [sorted(share) for share in shares]


def partition_noniid(train_indices, labels, num_clients, alpha=0.5, seed=0):
    """Per class, client shares drawn from Dirichlet(alpha) and filled by a multinomial draw."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    rng = np.random.default_rng(seed)
    shares = [[] for _ in range(num_clients)]
    for members in _classes(train_indices, labels):
        members = rng.permutation(members).tolist()
        proportions = rng.dirichlet([alpha] * num_clients)
        counts = rng.multinomial(len(members), proportions)
        start = 0
        for client, count in enumerate(counts):
            shares[client].extend(members[start:start + count])
            start += count
    return [sorted(share) for share in shares]


def check_partition(shares, train_indices):
    seen = set()
    for share in shares:
        overlap = seen.intersection(share)
        if overlap:
            raise RuntimeError(f"partition assigns indices {sorted(overlap)[:5]} to more than one client")
        seen.update(share)
    if seen != set(train_indices):
        raise RuntimeError("partition does not cover the training split exactly")


def fedavg(state_dicts, weights):
    """Per-parameter weighted mean (weights normalized to sum to one), accumulated in float64."""
    state_dicts = list(state_dicts)
    weights = np.asarray(list(weights), dtype=np.float64)
    if not state_dicts:
        raise ValueError("fedavg needs at least one model")
    if len(weights) != len(state_dicts):
        raise ValueError(f"{len(state_dicts)} models but {len(weights)} weights")
    if (weights < 0).any() or weights.sum() <= 0:
        raise ValueError("aggregation weights must be non-negative with a positive sum")

    reference = state_dicts[0]
    for other in state_dicts[1:]:
        if list(other.keys()) != list(reference.keys()):
            raise ArchitectureMismatch("models have different parameter names")
        for key, tensor in reference.items():
            if other[key].shape != tensor.shape:
                raise ArchitectureMismatch(
                    f"parameter '{key}': shape {tuple(tensor.shape)} vs {tuple(other[key].shape)}"
                )

    fractions = weights / weights.sum()
    averaged = OrderedDict()
    for key, tensor in reference.items():
        total = torch.zeros(tensor.shape, dtype=torch.float64)
        for fraction, state in zip(fractions, state_dicts):
            total += float(fraction) * state[key].detach().to(torch.float64)
        averaged[key] = total.to(tensor.dtype)
    return averaged


class LocalDataset:
    """A client's molecules, copied out of the prepared dataset at creation."""

    def __init__(self, client_id, indices, V, A):
        self.client_id = client_id
        self.indices = tuple(indices)
        self.V = V
        self.A = A

    def __len__(self):
        return len(self.indices)


@dataclass
class PreparedDataset:
    graphs: list
    V: torch.Tensor
    A: torch.Tensor
    labels: list
    train: list
    validation: list
    test: list
    access_log: dict = field(default_factory=dict)

    @property
    def train_graphs(self):
        return [self.graphs[i] for i in self.train]

    def client_view(self, client_id, indices):
        """The only way a client obtains data; every handed-out index is logged per client."""
        indices = list(indices)
        self.access_log.setdefault(client_id, set()).update(indices)
        selector = torch.as_tensor(indices, dtype=torch.long)
        return LocalDataset(client_id, indices, self.V[selector].clone(), self.A[selector].clone())


def prepare_dataset(graphs, cfg):
    """Tensors, formula class labels and the train / validation / test split."""
    if not graphs:
        raise EmptyDataset("the dataset contains no usable molecules")
    V, A = encode_graphs(graphs, default_dtype())
    labels = [molecular_formula(g) for g in graphs]
    train, validation, test = split_dataset(len(graphs), cfg.split_ratios, cfg.seed)
    logger.info(
        f"Prepared {len(graphs)} molecules: {len(train)} train, {len(validation)} validation, {len(test)} test"
    )
    return PreparedDataset(graphs, V, A, labels, train, validation, test)


def epoch_batches(data, batch_size, rng=None):
    """Shuffled full batches of a client's data; the incomplete last batch is dropped."""
    order = torch.randperm(len(data), generator=rng)
    return [
        (data.V[order[start:start + batch_size]], data.A[order[start:start + batch_size]])
        for start in range(0, len(data) - batch_size + 1, batch_size)
    ]


def build_models(cfg, rng=None):
    dtype = default_dtype()
    generator = GeneratorModel(
        cfg.generator_dims, cfg.noise_dim, cfg.n_max, cfg.dropout_gen,
    ).to(dtype)
    discriminator = DiscriminatorModel(
        cfg.conv_dims, cfg.reduce_dim, cfg.head_dims, cfg.dropout_disc,
    ).to(dtype)
    initialize_parameters(generator, rng)
    initialize_parameters(discriminator, rng)
    return generator, discriminator


def build_adam(model, cfg):
    return AdamState(
        model.parameters(), cfg.lr, (cfg.beta1, cfg.beta2), cfg.lr_decay_interval, cfg.lr_decay_factor,
    )


def client_rng(cfg, client_id):
    return make_generator(cfg.seed + CLIENT_SEED_STRIDE * (client_id + 1))


@dataclass
class ClientState:
    client_id: int
    data: LocalDataset
    generator: GeneratorModel
    discriminator: DiscriminatorModel
    gen_state: AdamState
    disc_state: AdamState
    rng: torch.Generator
    epochs_done: int = 0
    noise: torch.Tensor = None

    @property
    def sample_count(self):
        return len(self.data)


@dataclass
class RoundRecord:
    round: int
    client_losses: list
    global_gen_loss: float
    global_disc_loss: float
    wall_ms: float

    def as_dict(self):
        return asdict(self)


@dataclass
class FederationState:
    round: int
    generator: GeneratorModel
    discriminator: DiscriminatorModel
    clients: list
    history: list = field(default_factory=list)
    stopped_early: bool = False

    def loss_series(self):
        return (
            [record.global_gen_loss for record in self.history],
            [record.global_disc_loss for record in self.history],
        )


def partition_training_set(cfg, dataset):
    train_labels = [dataset.labels[i] for i in dataset.train]
    if cfg.partition == PartitionMode.NON_IID:
        shares = partition_noniid(dataset.train, train_labels, cfg.num_clients, cfg.alpha, cfg.seed)
    else:
        shares = partition_iid(dataset.train, train_labels, cfg.num_clients, cfg.seed)
    check_partition(shares, dataset.train)
    return shares


def init_federation(cfg, dataset):
    configure_determinism(cfg.deterministic)
    generator, discriminator = build_models(cfg, make_generator(cfg.seed))

    clients = []
    for client_id, indices in enumerate(partition_training_set(cfg, dataset)):
        local_gen = copy.deepcopy(generator)
        local_disc = copy.deepcopy(discriminator)
        clients.append(ClientState(
            client_id=client_id,
            data=dataset.client_view(client_id, indices),
            generator=local_gen,
            discriminator=local_disc,
            gen_state=build_adam(local_gen, cfg),
            disc_state=build_adam(local_disc, cfg),
            rng=client_rng(cfg, client_id),
        ))
        logger.debug(f"Client {client_id}: {len(indices)} molecules")
    return FederationState(0, generator, discriminator, clients)


def train_client(client, cfg):
    """E local epochs; the Adam learning-rate schedule advances once per epoch."""
    trace = []
    for _ in range(cfg.epochs_per_round):
        interval = cfg.noise_resample_interval
        if interval > 0 and (client.noise is None or client.epochs_done % interval == 0):
            client.noise = draw_noise(cfg.batch_size, client.generator.noise_dim, client.rng, client.data.V.dtype)
        options = TrainingOptions(
            gen_state=client.gen_state,
            disc_state=client.disc_state,
            penalty=cfg.penalty,
            loss_form=cfg.loss_form,
            rng=client.rng,
            temperature=cfg.temperature,
            noise=client.noise if interval > 0 else None,
        )
        batches = epoch_batches(client.data, cfg.batch_size, client.rng)
        trace.extend(local_epoch(client.generator, client.discriminator, batches, options))
        client.gen_state.end_epoch()
        client.disc_state.end_epoch()
        client.epochs_done += 1
    return trace


def _mean(values):
    return float(np.mean(values)) if len(values) else float('nan')


def run_round(state, cfg):
    """Broadcast, local training, collection and FedAvg of both models."""
    started = time.perf_counter()
    global_gen = state.generator.state_dict()
    global_disc = state.discriminator.state_dict()
    for client in state.clients:
        client.generator.load_state_dict(global_gen)
        client.discriminator.load_state_dict(global_disc)

    active = []
    for client in state.clients:
        if client.sample_count < cfg.batch_size:
            logger.warning(
                f"Round {state.round + 1}: client {client.client_id} has {client.sample_count} molecules, "
                f"less than one batch of {cfg.batch_size}; skipped"
            )
        else:
            active.append(client)
    if not active:
        raise EmptyDataset("no client holds a full batch of molecules")

    if cfg.deterministic or cfg.workers <= 1 or len(active) == 1:
        traces = [train_client(client, cfg) for client in active]
    else:
        with ThreadPoolExecutor(max_workers=cfg.workers) as executor:
            traces = list(executor.map(lambda client: train_client(client, cfg), active))

    if cfg.aggregation == AggregationWeighting.UNIFORM:
        weights = [1.0] * len(active)
    else:
        weights = [client.sample_count for client in active]
    state.generator.load_state_dict(fedavg([c.generator.state_dict() for c in active], weights))
    state.discriminator.load_state_dict(fedavg([c.discriminator.state_dict() for c in active], weights))

    client_losses = [
        {
            'client': client.client_id,
            'samples': client.sample_count,
            'generator': _mean([step.generator for step in trace]),
            'discriminator': _mean([step.discriminator for step in trace]),
            'penalty': _mean([step.penalty for step in trace]),
        }
        for client, trace in zip(active, traces)
    ]
    state.round += 1
    record = RoundRecord(
        round=state.round,
        client_losses=client_losses,
        global_gen_loss=_mean([loss['generator'] for loss in client_losses]),
        global_disc_loss=_mean([loss['discriminator'] for loss in client_losses]),
        wall_ms=round((time.perf_counter() - started) * 1000.0, 3),
    )
    state.history.append(record)
    logger.info(
        f"Round {record.round}: generator loss {record.global_gen_loss:.4f}, "
        f"discriminator loss {record.global_disc_loss:.4f} ({len(active)} clients, {record.wall_ms:.0f} ms)"
    )
    return state


def has_plateaued(series, window=10, threshold=0.05):
    """
    True when each of the last ``window`` round-over-round changes is below
    ``threshold`` times the range of the whole curve.
    """
    if window < 1 or len(series) < window + 1:
        return False
    span = max(series) - min(series)
    if span == 0:
        return True
    tail = series[-(window + 1):]
    return all(abs(b - a) < threshold * span for a, b in zip(tail, tail[1:]))


def run_training(cfg, dataset, evaluate=None, on_round=None):
    """
    Run up to ``cfg.rounds`` global rounds. ``evaluate(state)`` is called every
    ``eval_interval`` rounds and after the last round; ``on_round(state,
    record)`` after every round. Returns the state and ``(round, report)`` pairs.
    """
    state = init_federation(cfg, dataset)
    reports = []
    announced = False
    for _ in range(cfg.rounds):
        run_round(state, cfg)
        if on_round is not None:
            on_round(state, state.history[-1])

        gen_series, disc_series = state.loss_series()
        converged = (
            has_plateaued(gen_series, cfg.plateau_window, cfg.plateau_threshold)
            and has_plateaued(disc_series, cfg.plateau_window, cfg.plateau_threshold)
        )
        if converged and not announced:
            logger.info(f"Both loss curves plateaued by round {state.round}")
            announced = True
        last = state.round == cfg.rounds or (converged and cfg.stop_on_plateau)
        if evaluate is not None and not last and cfg.eval_interval > 0 and state.round % cfg.eval_interval == 0:
            reports.append((state.round, evaluate(state)))
        if converged and cfg.stop_on_plateau and state.round < cfg.rounds:
            logger.info(f"Stopping after round {state.round} of {cfg.rounds} on loss plateau")
            state.stopped_early = True
            break

    if evaluate is not None and state.round > 0:
        reports.append((state.round, evaluate(state)))
    return state, reports
