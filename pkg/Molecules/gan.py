"""
Generator, relational graph convolution discriminator and the adversarial
training step.

The generator maps a noise batch through a tanh MLP to node logits (N x B) and
symmetric edge logits (N x N x T). The discriminator propagates atom features
through two relational convolutions, reduces them per node and aggregates the
nodes with a sigmoid gate into one score in (-1, 1) per graph.
"""
import logging
import re
from dataclasses import dataclass, field
from functools import partial

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from Molecules.autodiff import (
    adam_step, backward, categorical_sample, check_finite, check_shape, default_dtype, dropout,
    gumbel_softmax_sample,
)
from Molecules.models import EpsilonMode, GenerationMode, LossForm
from Molecules.molgraph import N_MAX, NUM_ATOM_TYPES, NUM_BOND_TYPES, AtomType, BondType, MolecularGraph

logger = logging.getLogger(__name__)

NOISE_DIM = 16
GRADIENT_NORM_EPS = 1e-12
LOG_EPS = 1e-8

DISCRIMINATOR_DIMS_PATTERN = re.compile(r'^\[(\d+),(\d+)\],(\d+),\[(\d+),(\d+)\]$')


class EmptyDataset(ValueError):
    pass


def initialize_parameters(module, rng=None):
    """Xavier-uniform weights and zero biases for every linear layer."""
    with torch.no_grad():
        for layer in module.modules():
            if isinstance(layer, nn.Linear):
                nn.init.xavier_uniform_(layer.weight, generator=rng)
                nn.init.zeros_(layer.bias)
    return module


class GeneratorModel(nn.Module):
    def __init__(self, layer_dims=(32, 128), noise_dim=NOISE_DIM, n_max=N_MAX, dropout_ratio=0.0,
                 num_atom_types=NUM_ATOM_TYPES, num_bond_types=NUM_BOND_TYPES):
        super().__init__()
        self.layer_dims = list(layer_dims)
        self.noise_dim = noise_dim
        self.n_max = n_max
        self.dropout_ratio = dropout_ratio
        self.num_atom_types = num_atom_types
        self.num_bond_types = num_bond_types

        self.hidden = nn.ModuleList()
        previous = noise_dim
        for width in self.layer_dims:
            self.hidden.append(nn.Linear(previous, width))
            previous = width
        self.node_head = nn.Linear(previous, n_max * num_atom_types)
        self.edge_head = nn.Linear(previous, n_max * n_max * num_bond_types)

    def forward(self, z, rng=None):
        check_shape(z, (None, self.noise_dim), 'noise batch')
        h = z
        for layer in self.hidden:
            h = torch.tanh(layer(h))
        h = dropout(h, self.dropout_ratio, self.training, rng)

        n, b, t = self.n_max, self.num_atom_types, self.num_bond_types
        node_logits = self.node_head(h).view(-1, n, b)
        edge_logits = self.edge_head(h).view(-1, n, n, t)
        edge_logits = (edge_logits + edge_logits.transpose(1, 2)) / 2
        return node_logits, edge_logits


def _zero_bond(like):
    one_hot = torch.zeros(like.shape[-1], dtype=like.dtype)
    one_hot[BondType.ZERO] = 1.0
    return one_hot


def _force_empty_diagonal(adjacency):
    n = adjacency.shape[1]
    off_diagonal = (1.0 - torch.eye(n, dtype=adjacency.dtype))[None, :, :, None]
    diagonal = torch.eye(n, dtype=adjacency.dtype)[None, :, :, None] * _zero_bond(adjacency)
    return adjacency * off_diagonal + diagonal


def _mirror_upper_triangle(adjacency):
    n = adjacency.shape[1]
    upper = torch.triu(torch.ones(n, n, dtype=adjacency.dtype), diagonal=1)[None, :, :, None]
    kept = adjacency * upper
    return kept + kept.transpose(1, 2)


def _clear_padding_edges(nodes, adjacency):
    real = 1.0 - nodes[..., AtomType.PAD]
    keep = (real[:, :, None] * real[:, None, :])[..., None]
    return adjacency * keep + (1.0 - keep) * _zero_bond(adjacency)


def generate(model, z, mode=GenerationMode.SOFT, rng=None, temperature=1.0):
    """
    Run the generator on a noise batch.

    ``soft`` returns the softmax distributions; ``hard`` draws straight-through
    Gumbel one-hot samples; ``categorical`` draws plain categorical samples
    without gradients. Discrete outputs are symmetric, have ZERO on the
    diagonal and no bonds at padding nodes.
    """
    node_logits, edge_logits = model(z, rng)

    if mode == GenerationMode.SOFT:
        nodes = F.softmax(node_logits, dim=-1)
        edges = _force_empty_diagonal(F.softmax(edge_logits, dim=-1))
        return nodes, edges

    if mode == GenerationMode.HARD:
        nodes = gumbel_softmax_sample(node_logits, temperature, hard=True, rng=rng)
        edges = gumbel_softmax_sample(edge_logits, temperature, hard=True, rng=rng)
    elif mode == GenerationMode.CATEGORICAL:
        with torch.no_grad():
            nodes = categorical_sample(F.softmax(node_logits, dim=-1), rng)
            edges = categorical_sample(F.softmax(edge_logits, dim=-1), rng)
    else:
        raise ValueError(f"unknown generation mode '{mode}'")

    edges = _force_empty_diagonal(_mirror_upper_triangle(edges))
    edges = _clear_padding_edges(nodes, edges)
    return nodes, edges


class RelationalGraphConvolution(nn.Module):
    """
    One propagation step: a skip map on (h_i, v_i) plus, per bond type, a map
    on (h_j, v_i) summed over the neighbours j and divided by the neighbour
    count; nodes without neighbours keep only the skip term. tanh output.
    """

    def __init__(self, in_dim, out_dim, num_atom_types=NUM_ATOM_TYPES, num_bond_types=NUM_BOND_TYPES):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.skip = nn.Linear(in_dim + num_atom_types, out_dim)
        self.relations = nn.ModuleList(
            nn.Linear(in_dim + num_atom_types, out_dim) for _ in range(num_bond_types - 1)
        )

    def forward(self, h, V, A):
        batch, n, _ = h.shape
        check_shape(h, (batch, n, self.in_dim), 'node features')
        check_shape(A, (batch, n, n, len(self.relations) + 1), 'adjacency')

        out = self.skip(torch.cat([h, V], dim=-1))

        # pairs[b, i, j] = (h_j, v_i)
        pairs = torch.cat([
            h.unsqueeze(1).expand(batch, n, n, h.shape[-1]),
            V.unsqueeze(2).expand(batch, n, n, V.shape[-1]),
        ], dim=-1)
        bonds = A[..., 1:]
        messages = torch.zeros_like(out)
        for k, relation in enumerate(self.relations):
            messages = messages + (bonds[..., k].unsqueeze(-1) * relation(pairs)).sum(dim=2)

        degree = bonds.sum(dim=(-1, -2))
        safe_degree = torch.where(degree > 0, degree, torch.ones_like(degree))
        return torch.tanh(out + messages / safe_degree.unsqueeze(-1))


def rgcn_layer(h, V, A, layer):
    return layer(h, V, A)


def parse_discriminator_dims(text):
    """Read '[a,b],c,[d,1]' into ([a, b], c, [d, 1])."""
    match = DISCRIMINATOR_DIMS_PATTERN.match(str(text).replace(' ', ''))
    if not match:
        raise ValueError(f"discriminator dims must look like '[a,b],c,[d,1]', got '{text}'")
    a, b, c, d, last = (int(value) for value in match.groups())
    if last != 1:
        raise ValueError(f"discriminator dims must end in a scalar output, got '{text}'")
    if min(a, b, c, d) < 1:
        raise ValueError(f"discriminator widths must be positive, got '{text}'")
    return [a, b], c, [d, 1]


def format_discriminator_dims(conv_dims, reduce_dim, head_dims):
    return f"[{conv_dims[0]},{conv_dims[1]}],{reduce_dim},[{head_dims[0]},{head_dims[1]}]"


class DiscriminatorModel(nn.Module):
    """
    Two relational convolutions, a per-node reduction and a gated sum over
    nodes of width ``head_dims[0]``. The final ``[d, 1]`` head is a linear map
    from that graph vector to the scalar score, squashed with tanh.
    """

    def __init__(self, conv_dims=(32, 64), reduce_dim=32, head_dims=(64, 1), dropout_ratio=0.0,
                 num_atom_types=NUM_ATOM_TYPES, num_bond_types=NUM_BOND_TYPES):
        super().__init__()
        self.conv_dims = list(conv_dims)
        self.reduce_dim = reduce_dim
        self.head_dims = list(head_dims)
        self.dropout_ratio = dropout_ratio
        self.num_atom_types = num_atom_types
        self.num_bond_types = num_bond_types

        self.convs = nn.ModuleList()
        previous = num_atom_types
        for width in self.conv_dims:
            self.convs.append(RelationalGraphConvolution(previous, width, num_atom_types, num_bond_types))
            previous = width
        self.reduce = nn.Linear(previous + num_atom_types, reduce_dim)
        self.gate = nn.Linear(reduce_dim + num_atom_types, self.head_dims[0])
        self.value = nn.Linear(reduce_dim + num_atom_types, self.head_dims[0])
        self.output = nn.Linear(self.head_dims[0], self.head_dims[-1])

    @property
    def dims_text(self):
        return format_discriminator_dims(self.conv_dims, self.reduce_dim, self.head_dims)

    def forward(self, V, A, rng=None):
        batch = V.shape[0]
        n = V.shape[1] if V.dim() == 3 else -1
        check_shape(V, (batch, n, self.num_atom_types), 'node labels')
        check_shape(A, (batch, n, n, self.num_bond_types), 'adjacency')

        h = V
        for conv in self.convs:
            h = dropout(rgcn_layer(h, V, A, conv), self.dropout_ratio, self.training, rng)
        h = torch.tanh(self.reduce(torch.cat([h, V], dim=-1)))

        x = torch.cat([h, V], dim=-1)
        gate = dropout(torch.sigmoid(self.gate(x)), self.dropout_ratio, self.training, rng)
        value = dropout(torch.tanh(self.value(x)), self.dropout_ratio, self.training, rng)
        graph = (gate * value).sum(dim=1)
        return torch.tanh(self.output(graph)).squeeze(-1)


def discriminate(model, V, A, rng=None):
    return model(V, A, rng)


def _shifted(d):
    return ((d + 1.0) / 2.0).clamp_min(LOG_EPS)


def generator_loss(d_outputs, loss_form=LossForm.WGAN):
    if loss_form == LossForm.WGAN:
        return (-d_outputs).mean()
    if loss_form == LossForm.LOG:
        return (-torch.log(_shifted(d_outputs))).mean()
    raise ValueError(f"unknown loss form '{loss_form}'")


def discriminator_loss(d_gen, d_exist, penalty, gamma=10.0, loss_form=LossForm.WGAN):
    if loss_form == LossForm.WGAN:
        return d_gen.mean() - d_exist.mean() + gamma * penalty
    if loss_form == LossForm.LOG:
        # Signs exactly as the log-form objective is written
        return (-torch.log(_shifted(d_gen))).mean() + torch.log(_shifted(d_exist)).mean() + gamma * penalty
    raise ValueError(f"unknown loss form '{loss_form}'")


@dataclass(frozen=True)
class GradientPenaltyConfig:
    gamma: float = 10.0
    epsilon_mode: str = EpsilonMode.UNIFORM
    epsilon: float = 0.5

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")
        if self.epsilon_mode not in EpsilonMode.values:
            raise ValueError(f"unknown epsilon mode '{self.epsilon_mode}'")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")


def interpolate(exist, gen, epsilon):
    shape = (-1,) + (1,) * (exist.dim() - 1)
    eps = epsilon.reshape(shape)
    return eps * exist + (1.0 - eps) * gen


def gradient_penalty(model, V_exist, A_exist, V_gen, A_gen, cfg, rng=None):
    """
    Mean over the batch of (||grad D(omega)|| - 1)^2, with omega a convex
    combination of existing and generated samples and the norm taken jointly
    over the node and edge inputs. Differentiable with respect to D's parameters.
    """
    check_shape(V_gen, tuple(V_exist.shape), 'generated node labels')
    check_shape(A_gen, tuple(A_exist.shape), 'generated adjacency')
    batch = V_exist.shape[0]
    if cfg.epsilon_mode == EpsilonMode.FIXED:
        epsilon = torch.full((batch,), float(cfg.epsilon), dtype=V_exist.dtype)
    else:
        epsilon = torch.rand(batch, generator=rng, dtype=V_exist.dtype)

    omega_V = interpolate(V_exist, V_gen, epsilon).detach().requires_grad_(True)
    omega_A = interpolate(A_exist, A_gen, epsilon).detach().requires_grad_(True)
    scores = model(omega_V, omega_A)
    grad_V, grad_A = backward(scores.sum(), [omega_V, omega_A], create_graph=True)

    squared = grad_V.pow(2).flatten(1).sum(dim=1) + grad_A.pow(2).flatten(1).sum(dim=1)
    norm = torch.sqrt(squared + GRADIENT_NORM_EPS)
    return ((norm - 1.0) ** 2).mean()


@dataclass
class TrainingOptions:
    gen_state: object
    disc_state: object
    penalty: GradientPenaltyConfig = field(default_factory=GradientPenaltyConfig)
    loss_form: str = LossForm.WGAN
    rng: torch.Generator = None
    temperature: float = 1.0
    noise: torch.Tensor = None


@dataclass(frozen=True)
class StepLoss:
    step: int
    discriminator: float
    generator: float
    penalty: float


def draw_noise(batch, noise_dim, rng=None, dtype=None):
    return torch.randn(batch, noise_dim, generator=rng, dtype=dtype or default_dtype())


def local_epoch(gen, disc, batches, opts):
    """
    One pass over the existing-molecule batches. Per batch: generate, take one
    discriminator Adam step, then one generator Adam step against the updated
    discriminator. Returns the per-step loss trace.
    """
    if not batches:
        raise EmptyDataset("no batches to train on")

    gen.train()
    disc.train()
    gen_params = list(gen.parameters())
    disc_params = list(disc.parameters())
    critic = partial(disc, rng=opts.rng)
    trace = []

    for step, (V_exist, A_exist) in enumerate(batches):
        batch = V_exist.shape[0]
        if opts.noise is not None:
            z = opts.noise[:batch]
        else:
            z = draw_noise(batch, gen.noise_dim, opts.rng, V_exist.dtype)
        V_gen, A_gen = generate(gen, z, GenerationMode.HARD, opts.rng, opts.temperature)

        d_gen = critic(V_gen.detach(), A_gen.detach())
        d_exist = critic(V_exist, A_exist)
        penalty = gradient_penalty(critic, V_exist, A_exist, V_gen.detach(), A_gen.detach(), opts.penalty, opts.rng)
        d_loss = discriminator_loss(d_gen, d_exist, penalty, opts.penalty.gamma, opts.loss_form)
        check_finite(d_loss, 'discriminator loss')
        adam_step(opts.disc_state, disc_params, backward(d_loss, disc_params))

        g_loss = generator_loss(critic(V_gen, A_gen), opts.loss_form)
        check_finite(g_loss, 'generator loss')
        adam_step(opts.gen_state, gen_params, backward(g_loss, gen_params))

        trace.append(StepLoss(step, float(d_loss.detach()), float(g_loss.detach()), float(penalty.detach())))

    return trace


def encode_graphs(graphs, dtype=None):
    """Stack graphs into (V, A) tensors of shapes (n, N, B) and (n, N, N, T)."""
    dtype = dtype or default_dtype()
    if not graphs:
        raise EmptyDataset("no graphs to encode")
    V = torch.as_tensor(np.stack([g.node_labels for g in graphs]), dtype=dtype)
    A = torch.as_tensor(np.stack([g.adjacency for g in graphs]), dtype=dtype)
    return V, A


def decode_graphs(V, A):
    V = V.detach().cpu().numpy()
    A = A.detach().cpu().numpy()
    return [MolecularGraph.from_tensors(V[k], A[k], V.shape[1]) for k in range(V.shape[0])]


def sample_graphs(model, n, rng=None, mode=GenerationMode.HARD, temperature=1.0):
    """Draw ``n`` discrete graphs from the generator with dropout disabled."""
    if mode == GenerationMode.SOFT:
        raise ValueError("graphs can only be sampled in hard or categorical mode")
    if n <= 0:
        return []
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            z = draw_noise(n, model.noise_dim, rng, model.node_head.weight.dtype)
            V, A = generate(model, z, mode, rng, temperature)
    finally:
        model.train(was_training)
    return decode_graphs(V, A)
