import math

import torch
from django.test import SimpleTestCase
from torch import nn
from torch.autograd import gradcheck, gradgradcheck

from Molecules.autodiff import AdamState, adam_step, backward, make_generator
from Molecules.gan import (
    DiscriminatorModel, EmptyDataset, GeneratorModel, GradientPenaltyConfig, RelationalGraphConvolution,
    TrainingOptions, decode_graphs, discriminate, discriminator_loss, encode_graphs, generate, generator_loss,
    gradient_penalty, initialize_parameters, local_epoch, parse_discriminator_dims, sample_graphs,
)
from Molecules.models import EpsilonMode, GenerationMode, LossForm
from Molecules.molgraph import AtomType, BondType
from Molecules.smiles import parse


def small_generator(seed=0, dropout_ratio=0.0):
    gen = GeneratorModel((8, 16), noise_dim=16, n_max=10, dropout_ratio=dropout_ratio)
    return initialize_parameters(gen, make_generator(seed))


def small_discriminator(seed=1, dropout_ratio=0.0):
    disc = DiscriminatorModel((8, 8), 8, (8, 1), dropout_ratio=dropout_ratio)
    return initialize_parameters(disc, make_generator(seed))


def batch_of(*smiles):
    return encode_graphs([parse(s) for s in smiles], dtype=torch.float32)


class LinearCritic(nn.Module):
    """Scores a graph by a fixed linear function of its one-hot tensors."""

    def __init__(self, weight_V, weight_A):
        super().__init__()
        self.weight_V = nn.Parameter(weight_V)
        self.weight_A = nn.Parameter(weight_A)

    def forward(self, V, A, rng=None):
        return (V * self.weight_V).flatten(1).sum(dim=1) + (A * self.weight_A).flatten(1).sum(dim=1)


class GeneratorTests(SimpleTestCase):
    def setUp(self):
        self.gen = small_generator()
        self.z = torch.randn(6, 16, generator=make_generator(7))

    def test_logit_shapes_and_symmetry(self):
        nodes, edges = self.gen(self.z)
        self.assertEqual(nodes.shape, (6, 10, 10))
        self.assertEqual(edges.shape, (6, 10, 10, 5))
        self.assertTrue(torch.allclose(edges, edges.transpose(1, 2)))

    def test_soft_distributions(self):
        nodes, edges = generate(self.gen, self.z, GenerationMode.SOFT)
        self.assertTrue(torch.allclose(nodes.sum(dim=-1), torch.ones(6, 10)))
        self.assertTrue(torch.allclose(edges.sum(dim=-1), torch.ones(6, 10, 10)))
        diagonal = edges[:, torch.arange(10), torch.arange(10)]
        self.assertTrue(torch.equal(diagonal[..., BondType.ZERO], torch.ones(6, 10)))

    def assert_discrete_invariants(self, nodes, edges):
        self.assertTrue(torch.equal(nodes.sum(dim=-1), torch.ones(nodes.shape[:2])))
        self.assertTrue(torch.equal(edges.sum(dim=-1), torch.ones(edges.shape[:3])))
        self.assertTrue(torch.equal(edges, edges.transpose(1, 2)))
        diagonal = edges[:, torch.arange(10), torch.arange(10)]
        self.assertTrue(torch.equal(diagonal[..., BondType.ZERO], torch.ones(edges.shape[0], 10)))
        pad = nodes[..., AtomType.PAD].bool()
        touching = pad[:, :, None] | pad[:, None, :]
        self.assertTrue(torch.equal(edges[..., BondType.ZERO][touching], torch.ones(int(touching.sum()))))
        # every decoded graph is well formed
        self.assertEqual(len(decode_graphs(nodes, edges)), nodes.shape[0])

    def test_hard_samples(self):
        nodes, edges = generate(self.gen, self.z, GenerationMode.HARD, make_generator(3))
        self.assert_discrete_invariants(nodes, edges)

        (edges * torch.arange(5.0)).sum().backward()
        grads = [p.grad for p in self.gen.parameters()]
        self.assertTrue(any(g is not None and g.abs().sum() > 0 for g in grads))

    def test_categorical_samples(self):
        nodes, edges = generate(self.gen, self.z, GenerationMode.CATEGORICAL, make_generator(3))
        self.assert_discrete_invariants(nodes, edges)
        self.assertFalse(edges.requires_grad)

    def test_dropout_only_while_training(self):
        gen = small_generator(dropout_ratio=0.5)
        gen.eval()
        first = gen(self.z, make_generator(1))[0]
        second = gen(self.z, make_generator(2))[0]
        self.assertTrue(torch.equal(first, second))

    def test_sample_graphs(self):
        self.gen.train()
        graphs = sample_graphs(self.gen, 5, make_generator(4))
        self.assertEqual(len(graphs), 5)
        self.assertTrue(all(g.num_nodes == 10 for g in graphs))
        self.assertTrue(self.gen.training)
        self.assertEqual(sample_graphs(self.gen, 0), [])
        with self.assertRaises(ValueError):
            sample_graphs(self.gen, 3, mode=GenerationMode.SOFT)

    def test_same_seed_same_samples(self):
        a = sample_graphs(self.gen, 4, make_generator(8))
        b = sample_graphs(self.gen, 4, make_generator(8))
        self.assertEqual(a, b)


class RelationalConvolutionTests(SimpleTestCase):
    def setUp(self):
        self.layer = initialize_parameters(RelationalGraphConvolution(10, 6), make_generator(0))
        self.V, self.A = batch_of('CC(=O)O', 'c1ccccc1', 'C')

    def naive(self, h, V, A):
        batch, n, _ = h.shape
        out = torch.zeros(batch, n, self.layer.out_dim)
        for b in range(batch):
            for i in range(n):
                total = self.layer.skip(torch.cat([h[b, i], V[b, i]]))
                degree = A[b, i, :, 1:].sum()
                messages = torch.zeros(self.layer.out_dim)
                for j in range(n):
                    for k, relation in enumerate(self.layer.relations):
                        if A[b, i, j, k + 1] > 0:
                            messages = messages + A[b, i, j, k + 1] * relation(torch.cat([h[b, j], V[b, i]]))
                if degree > 0:
                    total = total + messages / degree
                out[b, i] = torch.tanh(total)
        return out

    def test_matches_per_node_computation(self):
        h = torch.randn(3, 10, 10, generator=make_generator(5))
        with torch.no_grad():
            self.assertTrue(torch.allclose(self.layer(h, self.V, self.A), self.naive(h, self.V, self.A), atol=1e-5))

    def test_zero_relation_weights_leave_skip_term(self):
        with torch.no_grad():
            for relation in self.layer.relations:
                relation.weight.zero_()
                relation.bias.zero_()
            expected = torch.tanh(self.layer.skip(torch.cat([self.V, self.V], dim=-1)))
            self.assertTrue(torch.allclose(self.layer(self.V, self.V, self.A), expected))

    def test_isolated_nodes_keep_skip_term(self):
        V, A = batch_of('C')
        with torch.no_grad():
            expected = torch.tanh(self.layer.skip(torch.cat([V, V], dim=-1)))
            self.assertTrue(torch.allclose(self.layer(V, V, A), expected))

    def test_second_order_gradients(self):
        layer = self.layer.double()
        V, A = self.V[:1].double(), self.A[:1].double()
        h = torch.randn(1, 10, 10, dtype=torch.float64, generator=make_generator(6), requires_grad=True)
        self.assertTrue(gradcheck(lambda x: layer(x, V, A), (h,)))
        self.assertTrue(gradgradcheck(lambda x: layer(x, V, A), (h,)))


class DiscriminatorTests(SimpleTestCase):
    def setUp(self):
        self.disc = small_discriminator()
        self.disc.eval()

    def test_scores_in_range(self):
        V, A = batch_of('CCO', 'c1ccncc1', 'ClC(Cl)Cl')
        scores = discriminate(self.disc, V, A)
        self.assertEqual(scores.shape, (3,))
        self.assertTrue(((scores > -1) & (scores < 1)).all())

    def test_node_permutation_invariance(self):
        V, A = batch_of('OC(=O)c1ccccc1')
        order = torch.randperm(10, generator=make_generator(2))
        V_perm = V[:, order]
        A_perm = A[:, order][:, :, order]
        with torch.no_grad():
            self.assertTrue(torch.allclose(self.disc(V, A), self.disc(V_perm, A_perm), atol=1e-6))

    def test_dims_text(self):
        self.assertEqual(self.disc.dims_text, '[8,8],8,[8,1]')

    def test_scalar_head_follows_the_gated_sum(self):
        disc = initialize_parameters(DiscriminatorModel((4, 4), 4, (6, 1)), make_generator(0)).eval()
        self.assertEqual((disc.output.in_features, disc.output.out_features), (6, 1))
        V, A = batch_of('CCO')
        captured = []
        disc.output.register_forward_hook(lambda module, args, out: captured.append(args[0]))
        with torch.no_grad():
            score = disc(V, A)
        self.assertEqual(captured[0].shape, (1, 6))
        expected = torch.tanh(disc.output(captured[0])).squeeze(-1)
        self.assertTrue(torch.allclose(score, expected))

    def test_parse_dims(self):
        self.assertEqual(parse_discriminator_dims('[128,64],128,[128,1]'), ([128, 64], 128, [128, 1]))
        self.assertEqual(parse_discriminator_dims('[32, 64], 32, [64, 1]'), ([32, 64], 32, [64, 1]))
        for text in ('[32,64],32,[64,2]', '[32],32,[64,1]', '[0,4],4,[4,1]', 'large'):
            with self.subTest(text=text):
                with self.assertRaises(ValueError):
                    parse_discriminator_dims(text)


class LossTests(SimpleTestCase):
    def test_wgan_losses(self):
        d_gen = torch.tensor([0.5, -0.1])
        d_exist = torch.tensor([0.8, 0.4])
        self.assertAlmostEqual(generator_loss(d_gen).item(), -0.2, places=6)
        loss = discriminator_loss(d_gen, d_exist, torch.tensor(0.3), gamma=10.0)
        self.assertAlmostEqual(loss.item(), 0.2 - 0.6 + 3.0, places=6)

    def test_log_losses(self):
        d = torch.tensor([0.0])
        self.assertAlmostEqual(generator_loss(d, LossForm.LOG).item(), math.log(2), places=6)
        loss = discriminator_loss(torch.tensor([0.0]), torch.tensor([1.0]), torch.tensor(0.0), 10.0, LossForm.LOG)
        self.assertAlmostEqual(loss.item(), math.log(2), places=6)

    def test_log_loss_finite_at_minus_one(self):
        self.assertTrue(torch.isfinite(generator_loss(torch.tensor([-1.0]), LossForm.LOG)))

    def test_one_critic_step_lowers_the_loss_without_penalty(self):
        disc = small_discriminator()
        V_exist, A_exist = batch_of('CCO', 'c1ccncc1', 'CC(=O)O')
        V_gen, A_gen = batch_of('CC', 'O', 'CN')
        cfg = GradientPenaltyConfig(gamma=0.0)
        params = list(disc.parameters())
        state = AdamState(params, lr=1e-4, lr_decay_interval=0)

        def loss():
            penalty = gradient_penalty(disc, V_exist, A_exist, V_gen, A_gen, cfg, make_generator(0))
            return discriminator_loss(disc(V_gen, A_gen), disc(V_exist, A_exist), penalty, cfg.gamma)

        before = loss()
        adam_step(state, params, backward(before, params))
        self.assertLess(loss().item(), before.item())


class GradientPenaltyTests(SimpleTestCase):
    def setUp(self):
        self.V_exist, self.A_exist = batch_of('CCO', 'CN')
        self.V_gen, self.A_gen = batch_of('CC', 'O')

    def test_linear_critic(self):
        weight_V = torch.full((10, 10), 0.01)
        weight_A = torch.full((10, 10, 5), 0.02)
        critic = LinearCritic(weight_V, weight_A)
        expected = (math.sqrt(100 * 0.01 ** 2 + 500 * 0.02 ** 2) - 1.0) ** 2
        for mode in EpsilonMode.values:
            with self.subTest(mode=mode):
                cfg = GradientPenaltyConfig(epsilon_mode=mode)
                penalty = gradient_penalty(
                    critic, self.V_exist, self.A_exist, self.V_gen, self.A_gen, cfg, make_generator(0),
                )
                self.assertAlmostEqual(penalty.item(), expected, places=5)

    def test_unit_norm_critic_has_no_penalty(self):
        weight_A = torch.zeros(10, 10, 5)
        weight_A[0, 1, 1] = 1.0
        critic = LinearCritic(torch.zeros(10, 10), weight_A)
        penalty = gradient_penalty(
            critic, self.V_exist, self.A_exist, self.V_gen, self.A_gen, GradientPenaltyConfig(), make_generator(0),
        )
        self.assertAlmostEqual(penalty.item(), 0.0, places=6)

    def test_penalty_differentiable_in_parameters(self):
        disc = small_discriminator()
        penalty = gradient_penalty(
            disc, self.V_exist, self.A_exist, self.V_gen, self.A_gen, GradientPenaltyConfig(), make_generator(0),
        )
        penalty.backward()
        self.assertTrue(any(p.grad is not None and p.grad.abs().sum() > 0 for p in disc.parameters()))

    def test_config_validation(self):
        with self.assertRaises(ValueError):
            GradientPenaltyConfig(gamma=-1.0)
        with self.assertRaises(ValueError):
            GradientPenaltyConfig(epsilon_mode=EpsilonMode.FIXED, epsilon=1.5)


class LocalEpochTests(SimpleTestCase):
    def make_options(self, gen, disc):
        return TrainingOptions(
            gen_state=AdamState(gen.parameters(), lr=1e-3, lr_decay_interval=0),
            disc_state=AdamState(disc.parameters(), lr=1e-3, lr_decay_interval=0),
            rng=make_generator(5),
        )

    def test_one_step_per_batch(self):
        gen, disc = small_generator(), small_discriminator()
        opts = self.make_options(gen, disc)
        batches = [batch_of('CCO', 'CCN'), batch_of('c1ccccc1', 'CC=O')]
        before = [p.detach().clone() for p in gen.parameters()]

        trace = local_epoch(gen, disc, batches, opts)

        self.assertEqual([loss.step for loss in trace], [0, 1])
        self.assertEqual(opts.gen_state.step_count, 2)
        self.assertEqual(opts.disc_state.step_count, 2)
        self.assertTrue(all(math.isfinite(loss.generator) for loss in trace))
        self.assertTrue(any(not torch.equal(a, b) for a, b in zip(before, gen.parameters())))

    def test_reproducible(self):
        traces = []
        for _ in range(2):
            gen, disc = small_generator(), small_discriminator()
            traces.append(local_epoch(gen, disc, [batch_of('CCO', 'CCN')], self.make_options(gen, disc)))
        self.assertEqual(traces[0], traces[1])

    def test_empty_batches(self):
        gen, disc = small_generator(), small_discriminator()
        with self.assertRaises(EmptyDataset):
            local_epoch(gen, disc, [], self.make_options(gen, disc))


class EncodingTests(SimpleTestCase):
    def test_decode_inverts_encode(self):
        graphs = [parse(s) for s in ('CCO', 'c1ccsc1', 'FC(F)(F)Br')]
        V, A = encode_graphs(graphs)
        self.assertEqual(V.shape, (3, 10, 10))
        self.assertEqual(A.shape, (3, 10, 10, 5))
        self.assertEqual(decode_graphs(V, A), graphs)

    def test_empty(self):
        with self.assertRaises(EmptyDataset):
            encode_graphs([])
