from collections import Counter
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
from django.test import SimpleTestCase

from Molecules.autodiff import AdamState, default_dtype
from Molecules.federation import (
    ArchitectureMismatch, BadRatios, FederationConfig, LocalDataset, build_adam, build_models, check_partition,
    client_rng, epoch_batches, fedavg, has_plateaued, init_federation, partition_iid, partition_noniid,
    prepare_dataset, run_round, run_training, split_dataset,
)
from Molecules.gan import EmptyDataset, TrainingOptions, encode_graphs, local_epoch
from Molecules.models import AggregationWeighting, PartitionMode
from Molecules.smiles import load_dataset

FIXTURES = Path(__file__).resolve().parent / 'fixtures'

TOY = FederationConfig(
    num_clients=2,
    epochs_per_round=1,
    batch_size=4,
    rounds=2,
    seed=3,
    generator_dims=(8,),
    conv_dims=(4, 4),
    reduce_dim=4,
    head_dims=(4, 1),
    lr=1e-3,
    lr_decay_interval=0,
)


def fixture_graphs():
    return load_dataset(FIXTURES / 'esol_small.csv').graphs


class SplitTests(SimpleTestCase):
    def test_sizes(self):
        train, val, test = split_dataset(10, (0.8, 0.1, 0.1), seed=0)
        self.assertEqual((len(train), len(val), len(test)), (8, 1, 1))
        self.assertEqual(sorted(train + val + test), list(range(10)))

    def test_half_up_rounding(self):
        train, val, test = split_dataset(48, (0.8, 0.1, 0.1), seed=1)
        self.assertEqual((len(train), len(val), len(test)), (38, 5, 5))

    def test_seeded(self):
        self.assertEqual(split_dataset(30, seed=4), split_dataset(30, seed=4))
        self.assertNotEqual(split_dataset(30, seed=4), split_dataset(30, seed=5))

    def test_bad_ratios(self):
        for ratios in ((0.5, 0.5, 0.5), (0.9, 0.2, -0.1), (0.5, 0.5)):
            with self.subTest(ratios=ratios):
                with self.assertRaises(BadRatios):
                    split_dataset(10, ratios)


class PartitionTests(SimpleTestCase):
    def setUp(self):
        self.indices = list(range(100, 160))
        self.labels = ['A'] * 30 + ['B'] * 20 + ['C'] * 7 + ['D'] * 3

    def test_iid_balanced_per_class(self):
        shares = partition_iid(self.indices, self.labels, 4, seed=0)
        check_partition(shares, self.indices)
        self.assertLessEqual(max(map(len, shares)) - min(map(len, shares)), 1)

        label_of = dict(zip(self.indices, self.labels))
        for label, total in Counter(self.labels).items():
            counts = [sum(1 for i in share if label_of[i] == label) for share in shares]
            with self.subTest(label=label):
                self.assertEqual(sum(counts), total)
                self.assertLessEqual(max(counts) - min(counts), 1)

    def test_noniid_complete_and_reproducible(self):
        shares = partition_noniid(self.indices, self.labels, 5, alpha=0.3, seed=2)
        check_partition(shares, self.indices)
        self.assertEqual(shares, partition_noniid(self.indices, self.labels, 5, alpha=0.3, seed=2))

    def test_noniid_low_alpha_is_skewed(self):
        shares = partition_noniid(self.indices, self.labels, 4, alpha=0.05, seed=0)
        balanced = partition_iid(self.indices, self.labels, 4, seed=0)
        spread = max(map(len, shares)) - min(map(len, shares))
        self.assertGreater(spread, max(map(len, balanced)) - min(map(len, balanced)))

    def test_noniid_large_alpha_matches_iid_proportions(self):
        indices = list(range(1600))
        labels = [f"C{i % 4}" for i in indices]
        shares = partition_noniid(indices, labels, 4, alpha=1e6, seed=1)
        check_partition(shares, indices)
        observed = np.array([[sum(1 for i in share if labels[i] == label) for share in shares]
                             for label in ('C0', 'C1', 'C2', 'C3')])
        expected = np.full(observed.shape, 100.0)
        chi_squared = ((observed - expected) ** 2 / expected).sum()
        # 99.9th percentile of chi-squared with 12 degrees of freedom
        self.assertLess(chi_squared, 32.91)

    def test_noniid_alpha_must_be_positive(self):
        with self.assertRaises(ValueError):
            partition_noniid(self.indices, self.labels, 3, alpha=0.0)

    def test_check_partition_rejects_overlap_and_gaps(self):
        with self.assertRaises(RuntimeError):
            check_partition([[1, 2], [2, 3]], [1, 2, 3])
        with self.assertRaises(RuntimeError):
            check_partition([[1], [3]], [1, 2, 3])

    def test_more_clients_than_molecules(self):
        shares = partition_iid([0, 1], ['A', 'A'], 3, seed=0)
        self.assertEqual(sorted(map(len, shares)), [0, 1, 1])


class FedAvgTests(SimpleTestCase):
    def test_weighted_mean(self):
        averaged = fedavg(
            [{'w': torch.tensor([1.0, 2.0])}, {'w': torch.tensor([3.0, 6.0])}], [1, 3],
        )
        self.assertTrue(torch.allclose(averaged['w'], torch.tensor([2.5, 5.0])))
        self.assertEqual(averaged['w'].dtype, torch.float32)

    def test_uniform_weights(self):
        averaged = fedavg([{'w': torch.tensor([0.0])}, {'w': torch.tensor([1.0])}, {'w': torch.tensor([5.0])}], [1] * 3)
        self.assertTrue(torch.allclose(averaged['w'], torch.tensor([2.0])))

    def test_single_model_is_identity(self):
        weights = {'w': torch.randn(3, 3), 'b': torch.randn(3)}
        averaged = fedavg([weights], [7])
        self.assertTrue(all(torch.equal(averaged[k], weights[k]) for k in weights))

    def test_clients_trained_on_identical_data_average_to_either(self):
        graphs = fixture_graphs()[:16]
        V, A = encode_graphs(graphs, default_dtype())
        data = LocalDataset(0, range(16), V, A)
        models = []
        for _client in range(2):
            gen, disc = build_models(TOY, torch.Generator().manual_seed(0))
            rng = torch.Generator().manual_seed(5)
            options = TrainingOptions(build_adam(gen, TOY), build_adam(disc, TOY), TOY.penalty, TOY.loss_form, rng)
            local_epoch(gen, disc, epoch_batches(data, 4, rng), options)
            models.append(gen.state_dict())
        averaged = fedavg(models, [3, 13])
        for name, tensor in models[0].items():
            with self.subTest(name=name):
                self.assertTrue(torch.allclose(averaged[name], tensor, rtol=0, atol=1e-7))
                self.assertTrue(torch.equal(models[1][name], tensor))

    def test_architecture_mismatch(self):
        with self.assertRaises(ArchitectureMismatch):
            fedavg([{'w': torch.zeros(2)}, {'w': torch.zeros(3)}], [1, 1])
        with self.assertRaises(ArchitectureMismatch):
            fedavg([{'w': torch.zeros(2)}, {'v': torch.zeros(2)}], [1, 1])

    def test_bad_weights(self):
        with self.assertRaises(ValueError):
            fedavg([{'w': torch.zeros(2)}], [0])
        with self.assertRaises(ValueError):
            fedavg([], [])


class PlateauTests(SimpleTestCase):
    def test_flat_tail(self):
        self.assertTrue(has_plateaued([5.0, 4.0, 3.0, 3.0, 3.01, 3.0], window=3, threshold=0.05))

    def test_still_moving(self):
        self.assertFalse(has_plateaued([1.0, 2.0, 3.0, 4.0], window=3, threshold=0.05))

    def test_too_short(self):
        self.assertFalse(has_plateaued([1.0, 1.0], window=3))

    def test_constant(self):
        self.assertTrue(has_plateaued([2.0] * 4, window=3))


class FederationTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.graphs = fixture_graphs()

    def prepared(self, cfg=TOY):
        return prepare_dataset(self.graphs, cfg)

    def test_prepared_split(self):
        dataset = self.prepared()
        self.assertEqual((len(dataset.train), len(dataset.validation), len(dataset.test)), (38, 5, 5))
        self.assertEqual(dataset.V.shape, (48, 10, 10))
        self.assertEqual(len(dataset.labels), 48)

    def test_clients_only_see_their_training_share(self):
        dataset = self.prepared()
        state = init_federation(TOY, dataset)
        self.assertEqual(sorted(dataset.access_log), [0, 1])
        seen = set().union(*dataset.access_log.values())
        self.assertEqual(seen, set(dataset.train))
        self.assertFalse(seen & set(dataset.validation + dataset.test))
        self.assertEqual(sum(client.sample_count for client in state.clients), 38)

    def test_round_records(self):
        state, reports = run_training(TOY, self.prepared(), evaluate=lambda s: s.round)
        self.assertEqual(state.round, 2)
        self.assertEqual([record.round for record in state.history], [1, 2])
        self.assertEqual(reports, [(2, 2)])
        record = state.history[0]
        self.assertEqual([loss['client'] for loss in record.client_losses], [0, 1])
        self.assertEqual(sum(loss['samples'] for loss in record.client_losses), 38)
        expected = (record.client_losses[0]['generator'] + record.client_losses[1]['generator']) / 2
        self.assertAlmostEqual(record.global_gen_loss, expected)

    def test_evaluation_interval(self):
        cfg = replace(TOY, rounds=3, eval_interval=1)
        _state, reports = run_training(cfg, self.prepared(cfg), evaluate=lambda s: s.round)
        self.assertEqual([r for r, _ in reports], [1, 2, 3])

    def test_reproducible_runs(self):
        first, _ = run_training(TOY, self.prepared())
        second, _ = run_training(TOY, self.prepared())
        self.assertEqual(first.loss_series(), second.loss_series())
        for a, b in zip(first.generator.parameters(), second.generator.parameters()):
            self.assertTrue(torch.equal(a, b))

    def test_threaded_clients_match_sequential(self):
        sequential, _ = run_training(replace(TOY, workers=1), self.prepared())
        threaded, _ = run_training(replace(TOY, workers=2), self.prepared())
        self.assertEqual(sequential.loss_series(), threaded.loss_series())

    def test_zero_rounds(self):
        cfg = replace(TOY, rounds=0)
        state, reports = run_training(cfg, self.prepared(cfg), evaluate=lambda s: s.round)
        self.assertEqual(state.round, 0)
        self.assertEqual(state.history, [])
        self.assertEqual(reports, [])

    def test_small_clients_skipped(self):
        cfg = replace(TOY, num_clients=2, batch_size=20)
        state = init_federation(cfg, self.prepared(cfg))
        with self.assertLogs('Molecules.federation', level='WARNING'):
            with self.assertRaises(EmptyDataset):
                run_round(state, cfg)

    def test_stop_on_plateau(self):
        cfg = replace(TOY, rounds=5, plateau_window=1, plateau_threshold=10.0, stop_on_plateau=True)
        state, reports = run_training(cfg, self.prepared(cfg), evaluate=lambda s: s.round)
        self.assertTrue(state.stopped_early)
        self.assertEqual(state.round, 2)
        self.assertEqual(reports, [(2, 2)])

    def test_uniform_aggregation(self):
        cfg = replace(TOY, aggregation=AggregationWeighting.UNIFORM, partition=PartitionMode.NON_IID, alpha=1.0)
        state, _ = run_training(cfg, self.prepared(cfg))
        self.assertEqual(state.round, 2)

    def test_single_client_matches_centralized_training(self):
        cfg = replace(TOY, num_clients=1, epochs_per_round=2, batch_size=8, rounds=5)
        federated, _ = run_training(cfg, self.prepared(cfg))

        dataset = self.prepared(cfg)
        gen, disc = build_models(cfg, torch.Generator().manual_seed(cfg.seed))
        gen_state, disc_state = build_adam(gen, cfg), build_adam(disc, cfg)
        rng = client_rng(cfg, 0)
        selector = torch.as_tensor(dataset.train)
        data = LocalDataset(0, dataset.train, dataset.V[selector], dataset.A[selector])
        options = TrainingOptions(gen_state, disc_state, cfg.penalty, cfg.loss_form, rng, cfg.temperature)
        for _ in range(cfg.rounds * cfg.epochs_per_round):
            local_epoch(gen, disc, epoch_batches(data, cfg.batch_size, rng), options)
            gen_state.end_epoch()
            disc_state.end_epoch()

        for a, b in zip(federated.generator.parameters(), gen.parameters()):
            self.assertTrue(torch.equal(a, b))
        for a, b in zip(federated.discriminator.parameters(), disc.parameters()):
            self.assertTrue(torch.equal(a, b))


class EpochBatchTests(SimpleTestCase):
    def test_last_partial_batch_dropped(self):
        data = LocalDataset(0, range(10), torch.arange(10.0).reshape(10, 1), torch.zeros(10, 1))
        batches = epoch_batches(data, 4, torch.Generator().manual_seed(0))
        self.assertEqual([len(V) for V, _ in batches], [4, 4])
        self.assertEqual(len(set(torch.cat([V for V, _ in batches]).flatten().tolist())), 8)

    def test_adam_state_built_from_config(self):
        gen, _ = build_models(TOY, torch.Generator().manual_seed(0))
        state = build_adam(gen, TOY)
        self.assertIsInstance(state, AdamState)
        self.assertEqual(state.betas, (0.5, 0.999))
        self.assertIsNone(state.scheduler)
