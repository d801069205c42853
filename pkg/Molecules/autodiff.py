"""
Numeric primitives on top of torch autograd.

Tensors are ``torch.Tensor`` values (float32, or float64 when MOLFED_FLOAT64 is
set); the autograd graph built during a forward pass is the tape. Everything
random takes an explicit ``torch.Generator`` so training runs are reproducible.
"""
import logging

import torch
from django.conf import settings
from torch.nn import functional as F
from torch.optim.lr_scheduler import StepLR

logger = logging.getLogger(__name__)

DISTRIBUTION_TOLERANCE = 1e-5


class ShapeMismatch(ValueError):
    def __init__(self, expected, actual, what='tensor'):
        self.expected = tuple(expected)
        self.actual = tuple(actual)
        super().__init__(f"{what}: expected shape {self.expected}, got {self.actual}")


class NonScalarOutput(ValueError):
    pass


class NonPositiveTemperature(ValueError):
    pass


class NotADistribution(ValueError):
    pass


class ForeignParameters(ValueError):
    pass


def default_dtype():
    return torch.float64 if settings.MOLFED_FLOAT64 else torch.float32


def configure_determinism(deterministic):
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def make_generator(seed):
    generator = torch.Generator()
    generator.manual_seed(int(seed))
    return generator


def check_shape(tensor, expected, what='tensor'):
    """Raise ShapeMismatch unless ``tensor`` has ``expected`` shape (None matches any size)."""
    actual = tuple(tensor.shape)
    if len(actual) != len(expected) or any(e is not None and e != a for e, a in zip(expected, actual)):
        raise ShapeMismatch(expected, actual, what)
    return tensor


def check_finite(tensor, what='tensor'):
    if not torch.isfinite(tensor).all():
        raise FloatingPointError(f"{what} contains NaN or Inf")
    return tensor


def backward(output, inputs, create_graph=False, retain_graph=None):
    """
    Gradients of a scalar ``output`` with respect to each tensor in ``inputs``.
    With ``create_graph`` the gradient computation is itself recorded, so the
    result can be differentiated again. Unused inputs get zero gradients.
    """
    if output.numel() != 1:
        raise NonScalarOutput(f"backward needs a scalar output, got shape {tuple(output.shape)}")
    inputs = list(inputs)
    grads = torch.autograd.grad(
        output.reshape(()), inputs,
        create_graph=create_graph, retain_graph=retain_graph, allow_unused=True,
    )
    return [torch.zeros_like(x) if g is None else g for x, g in zip(inputs, grads)]


def dropout(x, ratio, training=True, rng=None):
    """Inverted dropout: kept entries are scaled by 1 / (1 - ratio); identity at evaluation."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"dropout ratio must be in [0, 1), got {ratio}")
    if not training or ratio == 0.0:
        return x
    keep = torch.rand(x.shape, generator=rng, dtype=x.dtype) >= ratio
    return x * keep.to(x.dtype) / (1.0 - ratio)


def sample_gumbel(shape, rng=None, dtype=None):
    dtype = dtype or default_dtype()
    tiny = torch.finfo(dtype).tiny
    uniform = torch.rand(shape, generator=rng, dtype=dtype)
    return -torch.log(-torch.log(uniform.clamp_min(tiny)).clamp_min(tiny))


def gumbel_softmax_sample(logits, temperature=1.0, hard=False, rng=None):
    """
    softmax((logits + Gumbel noise) / temperature) over the last axis. With
    ``hard`` the value is the one-hot argmax while gradients are those of the
    soft sample (straight-through).
    """
    if temperature <= 0:
        raise NonPositiveTemperature(f"temperature must be positive, got {temperature}")
    noise = sample_gumbel(logits.shape, rng, logits.dtype)
    soft = F.softmax((logits + noise) / temperature, dim=-1)
    if not hard:
        return soft
    index = soft.argmax(dim=-1, keepdim=True)
    one_hot = torch.zeros_like(soft).scatter_(-1, index, 1.0)
    # soft - soft.detach() is exactly zero, so rows stay exactly one-hot
    return one_hot + (soft - soft.detach())


def categorical_sample(probabilities, rng=None):
    """Draw one category per row and return the draws as one-hot rows (no gradient)."""
    probabilities = probabilities.detach()
    sums = probabilities.sum(dim=-1)
    if (probabilities < 0).any() or ((sums - 1.0).abs() > DISTRIBUTION_TOLERANCE).any():
        raise NotADistribution("every row must be non-negative and sum to 1")
    categories = probabilities.shape[-1]
    flat = probabilities.reshape(-1, categories)
    draws = torch.multinomial(flat, 1, generator=rng).squeeze(-1)
    return F.one_hot(draws, categories).to(probabilities.dtype).reshape(probabilities.shape)


class AdamState:
    """
    Adam with bias correction; the learning rate is divided by
    ``lr_decay_factor`` every ``lr_decay_interval`` epochs.
    """

    def __init__(self, params, lr=1e-4, betas=(0.5, 0.999), lr_decay_interval=1000, lr_decay_factor=100.0):
        self.params = list(params)
        self.optimizer = torch.optim.Adam(self.params, lr=lr, betas=tuple(betas))
        self.scheduler = None
        if lr_decay_interval and lr_decay_interval > 0:
            self.scheduler = StepLR(self.optimizer, step_size=int(lr_decay_interval), gamma=1.0 / lr_decay_factor)
        self.step_count = 0

    @property
    def lr(self):
        return self.optimizer.param_groups[0]['lr']

    @property
    def betas(self):
        return self.optimizer.param_groups[0]['betas']

    def moments(self, param):
        state = self.optimizer.state.get(param, {})
        return state.get('exp_avg'), state.get('exp_avg_sq')

    def end_epoch(self):
        if self.scheduler is not None:
            self.scheduler.step()


def adam_step(state, params, grads):
    params = list(params)
    grads = list(grads)
    if len(params) != len(state.params):
        raise ShapeMismatch((len(state.params),), (len(params),), 'parameter list')
    if any(param is not own for param, own in zip(params, state.params)):
        raise ForeignParameters("parameters must be the ones the optimizer state was built for, in order")
    for param, grad in zip(params, grads):
        if param.shape != grad.shape:
            raise ShapeMismatch(param.shape, grad.shape, 'gradient')
    with torch.no_grad():
        for param, grad in zip(params, grads):
            param.grad = grad.detach().clone()
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    state.step_count += 1
    return params
