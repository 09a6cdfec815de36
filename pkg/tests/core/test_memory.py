import json

from pathlib import Path
from tempfile import TemporaryDirectory
from unittest import TestCase

import numpy as np

from pymemrecon.core.grids import TokenGrid
from pymemrecon.core.memory import (
    MemoryBank,
    MemoryConfig,
    WorkingFrame,
    consolidate,
    frame_similarity,
    load_bank,
    memory_read,
    save_bank,
    topk_indices,
    total_tokens,
    working_insert,
)
from pymemrecon.core.tensor import Tensor
from pymemrecon.exceptions import (
    CheckpointError,
    EmptyMemoryError,
)
from pymemrecon.utils import save_arrays


def token_grid(array, frame_index=0, kind='key'):
    return TokenGrid(Tensor(np.asarray(array, dtype=np.float64)), frame_index, kind)


def random_frame(rng, num_tokens=4, dim=8, frame_index=0):
    keys = token_grid(rng.normal(size=(num_tokens, dim)), frame_index, 'key')
    values = token_grid(rng.normal(size=(num_tokens, dim)), frame_index, 'value')
    return keys, values


def softmax_oracle(query, keys):
    scores = query @ keys.T / np.sqrt(query.shape[1])
    scores = scores - scores.max(axis=1, keepdims=True)
    exps = np.exp(scores)
    return exps / exps.sum(axis=1, keepdims=True)


def long_term_bank(num_tokens, acc_attn, lt_max_tokens, topk_keep=None, dim=2):
    bank = MemoryBank(MemoryConfig(lt_max_tokens=lt_max_tokens, topk_keep=topk_keep))
    bank.lt_keys = Tensor(np.arange(num_tokens * dim, dtype=np.float64).reshape(num_tokens, dim))
    bank.lt_values = Tensor(-np.arange(num_tokens * dim, dtype=np.float64).reshape(num_tokens, dim))
    bank.acc_attn = np.asarray(acc_attn, dtype=np.float64)
    bank.origin = np.stack([np.arange(num_tokens), np.zeros(num_tokens, dtype=np.int64)], axis=-1)
    return bank


class TestMemoryConfig(TestCase):

    def test__defaults__valid_with_half_budget_kept(self):

        config = MemoryConfig()

        self.assertEqual(config.validate(), [])
        self.assertEqual(config.keep_tokens, 2000)

    def test__keep_larger_than_budget__diagnostic(self):

        errors = MemoryConfig(lt_max_tokens=10, topk_keep=11).validate()

        self.assertTrue(errors[0].startswith('topk_keep:'))


class TestMemoryReadClipping(TestCase):

    def bank_with_weights(self, probabilities, clip=5e-4):
        # with one-dimensional unit queries the attention row is softmax(log p) = p
        keys = np.log(np.asarray(probabilities, dtype=np.float64)).reshape(-1, 1)
        values = np.arange(1.0, len(probabilities) + 1.0).reshape(-1, 1)
        bank = MemoryBank(MemoryConfig(clip=clip))
        bank.working.append(WorkingFrame(Tensor(keys), Tensor(values), 0))
        return bank

    def test__row_with_small_entries__clipped_and_renormalised(self):

        bank = self.bank_with_weights([0.9996, 0.0003, 0.0001])

        fused, record = memory_read(token_grid([[1.0]], kind='query'), bank)

        np.testing.assert_allclose(record.weights, [[1.0, 0.0, 0.0]])
        np.testing.assert_allclose(fused.tokens.data, [[2.0]])
        self.assertEqual((record.clipped_count, record.fallback_rows), (2, 0))

    def test__row_entirely_below_threshold__unclipped_row_kept_and_warned(self):

        bank = self.bank_with_weights([0.7, 0.1, 0.1, 0.1], clip=0.3)
        query = token_grid([[0.0], [1.0]], kind='query')

        with self.assertLogs('pymemrecon.core.memory', level='WARNING'):
            _, record = memory_read(query, bank)

        np.testing.assert_allclose(record.weights[0], [0.25, 0.25, 0.25, 0.25])
        np.testing.assert_allclose(record.weights[1], [1.0, 0.0, 0.0, 0.0])
        self.assertEqual((record.clipped_count, record.fallback_rows), (3, 1))


class TestMemoryRead(TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(0)

    def test__empty_bank__empty_memory_error_raised(self):

        with self.assertRaises(EmptyMemoryError):
            memory_read(token_grid(np.ones((2, 4)), kind='query'), MemoryBank())

    def test__unknown_mode__value_error_raised(self):

        bank = MemoryBank()
        working_insert(bank, *random_frame(self.rng))

        with self.assertRaises(ValueError):
            memory_read(token_grid(np.ones((4, 8)), kind='query'), bank, mode='eval')

    def test__single_memory_token__full_attention_and_residual_sum(self):

        bank = MemoryBank()
        key, value = token_grid([[1.0, 2.0]]), token_grid([[3.0, -1.0]], kind='value')
        working_insert(bank, key, value)
        query = token_grid([[0.5, 0.5]], kind='query')

        fused, record = memory_read(query, bank)

        np.testing.assert_array_equal(record.weights, [[1.0]])
        np.testing.assert_allclose(fused.tokens.data, [[3.5, -0.5]])
        self.assertEqual(fused.kind, 'fused')
        self.assertEqual(record.clipped_count, 0)

    def test__query_equal_to_one_of_distant_keys__attention_concentrated(self):

        keys = 10.0 * np.eye(8)
        bank = MemoryBank()
        working_insert(bank, token_grid(keys), token_grid(self.rng.normal(size=(8, 8)), kind='value'))

        _, record = memory_read(token_grid(keys[[3]], kind='query'), bank)

        self.assertGreater(record.weights[0, 3], 0.99)

    def test__randomised_reads__clipped_rows_normalised_and_above_threshold(self):

        clip = 5e-4
        for _ in range(10_000):
            num_tokens = int(self.rng.integers(1, 64))
            dim = int(self.rng.integers(2, 9))
            scale = float(self.rng.uniform(0.1, 6.0))
            keys = scale * self.rng.normal(size=(num_tokens, dim))
            query = scale * self.rng.normal(size=(3, dim))

            bank = MemoryBank(MemoryConfig(clip=clip))
            bank.working.append(WorkingFrame(Tensor(keys), Tensor(self.rng.normal(size=(num_tokens, dim))), 0))
            _, record = memory_read(token_grid(query, kind='query'), bank)

            weights = record.weights
            raw = softmax_oracle(query, keys)
            np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-6)
            for row, raw_row in zip(weights, raw):
                surviving = row[row > 0]
                if not np.all(surviving >= clip):
                    np.testing.assert_allclose(row, raw_row, atol=1e-12)

    def test__every_weight_below_threshold__fallback_row_reported(self):

        bank = MemoryBank(MemoryConfig(clip=0.6))
        keys = np.zeros((2, 4))
        working_insert(bank, token_grid(keys), token_grid(np.ones((2, 4)), kind='value'))

        _, record = memory_read(token_grid(np.ones((1, 4)), kind='query'), bank)

        np.testing.assert_allclose(record.weights, [[0.5, 0.5]])
        self.assertEqual(record.fallback_rows, 1)

    def test__clipping_disabled__softmax_weights_returned(self):

        keys = self.rng.normal(size=(500, 4))
        query = self.rng.normal(size=(2, 4))
        bank = MemoryBank(MemoryConfig(clip_enabled=False))
        bank.working.append(WorkingFrame(Tensor(keys), Tensor(keys), 0))

        _, record = memory_read(token_grid(query, kind='query'), bank)

        np.testing.assert_allclose(record.weights, softmax_oracle(query, keys), atol=1e-12)
        self.assertEqual(record.clipped_count, 0)

    def test__train_mode_with_same_seed__reproducible_and_normalised(self):

        bank = MemoryBank()
        working_insert(bank, *random_frame(self.rng, num_tokens=16))
        query = token_grid(self.rng.normal(size=(4, 8)), kind='query')

        _, first = memory_read(query, bank, mode='train', rng=np.random.default_rng(5))
        _, second = memory_read(query, bank, mode='train', rng=np.random.default_rng(5))

        np.testing.assert_array_equal(first.weights, second.weights)
        np.testing.assert_allclose(first.weights.sum(axis=1), 1.0, atol=1e-9)
        self.assertGreater(first.clipped_count, 0)

    def test__train_mode_dropout_without_generator__value_error_and_bank_untouched(self):

        bank = MemoryBank(MemoryConfig(w_max=1, gating_enabled=False))
        working_insert(bank, *random_frame(self.rng, frame_index=0))
        working_insert(bank, *random_frame(self.rng, frame_index=1))
        query = token_grid(self.rng.normal(size=(4, 8)), kind='query')

        with self.assertRaises(ValueError):
            memory_read(query, bank, mode='train', dropout_p=0.15)

        np.testing.assert_array_equal(bank.acc_attn, np.zeros(4))
        self.assertEqual(bank.stats.reads, [])

    def test__train_mode_without_dropout__no_generator_needed(self):

        bank = MemoryBank()
        working_insert(bank, *random_frame(self.rng, num_tokens=16))

        _, record = memory_read(token_grid(self.rng.normal(size=(4, 8)), kind='query'), bank, mode='train', dropout_p=0.0)

        self.assertEqual(record.clipped_count, 0)

    def test__infer_mode__deterministic(self):

        bank = MemoryBank()
        working_insert(bank, *random_frame(self.rng, num_tokens=16))
        query = token_grid(self.rng.normal(size=(4, 8)), kind='query')

        first, _ = memory_read(query, bank)
        second, _ = memory_read(query, bank)

        np.testing.assert_array_equal(first.tokens.data, second.tokens.data)

    def test__read_with_long_term_tokens__pre_clip_column_sums_accumulated(self):

        bank = MemoryBank(MemoryConfig(w_max=1, gating_enabled=False))
        working_insert(bank, *random_frame(self.rng, frame_index=0))
        working_insert(bank, *random_frame(self.rng, frame_index=1))
        keys, _ = bank.keys_and_values()
        query = self.rng.normal(size=(4, 8))

        memory_read(token_grid(query, kind='query'), bank)
        after_one = bank.acc_attn.copy()
        memory_read(token_grid(query, kind='query'), bank)

        expected = softmax_oracle(query, keys.data)[:, :4].sum(axis=0)
        np.testing.assert_allclose(after_one, expected)
        np.testing.assert_allclose(bank.acc_attn, 2 * expected)
        self.assertTrue(np.all(bank.acc_attn >= after_one))

    def test__untracked_read__bank_untouched(self):

        bank = MemoryBank(MemoryConfig(w_max=1, gating_enabled=False))
        working_insert(bank, *random_frame(self.rng, frame_index=0))
        working_insert(bank, *random_frame(self.rng, frame_index=1))

        memory_read(token_grid(self.rng.normal(size=(4, 8)), kind='query'), bank, track=False)

        np.testing.assert_array_equal(bank.acc_attn, np.zeros(4))
        self.assertEqual(bank.stats.reads, [])

    def test__read_columns__long_term_first_then_working_oldest_first(self):

        bank = MemoryBank(MemoryConfig(w_max=2, gating_enabled=False))
        frames = [random_frame(self.rng, frame_index=i) for i in range(3)]
        for key, value in frames:
            working_insert(bank, key, value)

        keys, values = bank.keys_and_values()

        np.testing.assert_array_equal(
            keys.data, np.concatenate([key.tokens.data for key, _ in frames], axis=0)
        )
        self.assertEqual(bank.long_term_tokens, 4)
        self.assertEqual(bank.working_frame_indices, [1, 2])


class TestWorkingInsert(TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(1)

    def test__empty_working_memory__insert_succeeds(self):

        bank = MemoryBank()

        self.assertTrue(working_insert(bank, *random_frame(self.rng)))
        self.assertEqual(bank.num_working_frames, 1)

    def test__identical_key_grid__insert_skipped(self):

        bank = MemoryBank()
        key, value = random_frame(self.rng)
        working_insert(bank, key, value)

        inserted = working_insert(bank, key, value)

        self.assertFalse(inserted)
        self.assertEqual(bank.num_working_frames, 1)
        self.assertEqual(bank.stats.events[-1]['event'], 'gate_skip')

    def test__misaligned_key_and_value__value_error_raised(self):

        with self.assertRaises(ValueError):
            working_insert(MemoryBank(), token_grid(np.ones((4, 8))), token_grid(np.ones((3, 8)), kind='value'))

    def test__six_distinct_frames__oldest_frame_drained_to_long_term(self):

        bank = MemoryBank()
        first_key = None
        for frame_index in range(1, 7):
            key, value = random_frame(self.rng, frame_index=frame_index)
            first_key = key if first_key is None else first_key
            self.assertTrue(working_insert(bank, key, value))

        self.assertEqual(bank.working_frame_indices, [2, 3, 4, 5, 6])
        self.assertEqual(bank.long_term_tokens, 4)
        np.testing.assert_array_equal(bank.lt_keys.data, first_key.tokens.data)
        np.testing.assert_array_equal(bank.origin, [[1, 0], [1, 1], [1, 2], [1, 3]])

    def test__long_term_disabled__drained_frames_dropped_and_fewer_tokens(self):

        full = MemoryBank()
        working_only = MemoryBank(MemoryConfig(long_term_enabled=False))
        for frame_index in range(6):
            key, value = random_frame(self.rng, frame_index=frame_index)
            working_insert(full, key, value)
            working_insert(working_only, key, value)

        self.assertEqual(working_only.long_term_tokens, 0)
        self.assertLess(total_tokens(working_only), total_tokens(full))
        self.assertEqual(working_only.stats.events[-1]['event'], 'drop')

    def test__fifty_frame_run__token_bounds_hold_after_every_step(self):

        num_tokens = 256
        config = MemoryConfig(lt_max_tokens=4000)
        bank = MemoryBank(config)
        for frame_index in range(50):
            if bank.total_tokens:
                memory_read(token_grid(self.rng.normal(size=(num_tokens, 8)), frame_index, 'query'), bank)
            working_insert(bank, *random_frame(self.rng, num_tokens=num_tokens, frame_index=frame_index))

            self.assertLessEqual(bank.num_working_frames, 5)
            self.assertLessEqual(bank.long_term_tokens, config.lt_max_tokens)
            self.assertLessEqual(total_tokens(bank), 5 * num_tokens + 4000)

        self.assertTrue(any(event['event'] == 'consolidate' for event in bank.stats.events))


class TestFrameSimilarity(TestCase):

    def test__identical_and_negated_grids__plus_and_minus_one(self):

        keys = np.random.default_rng(0).normal(size=(4, 8))

        self.assertAlmostEqual(frame_similarity(keys, keys), 1.0)
        self.assertAlmostEqual(frame_similarity(keys, -keys), -1.0)


class TestConsolidate(TestCase):

    def test__three_tokens_keep_two__largest_accumulated_attention_survives(self):

        bank = long_term_bank(3, [5.0, 1.0, 3.0], lt_max_tokens=2, topk_keep=2)

        consolidate(bank)

        np.testing.assert_array_equal(bank.origin[:, 0], [0, 2])
        np.testing.assert_array_equal(bank.acc_attn, [5.0, 3.0])
        np.testing.assert_array_equal(bank.lt_keys.data, [[0.0, 1.0], [4.0, 5.0]])
        np.testing.assert_array_equal(bank.lt_values.data, [[-0.0, -1.0], [-4.0, -5.0]])

    def test__all_equal_attention__first_tokens_survive(self):

        bank = long_term_bank(10, np.ones(10), lt_max_tokens=8, topk_keep=4)

        consolidate(bank)

        np.testing.assert_array_equal(bank.origin[:, 0], [0, 1, 2, 3])
        self.assertEqual(bank.long_term_tokens, 4)

    def test__within_budget__no_op(self):

        bank = long_term_bank(5, np.arange(5), lt_max_tokens=5)

        consolidate(bank)

        self.assertEqual(bank.long_term_tokens, 5)
        self.assertEqual(bank.stats.events, [])

    def test__random_instances__matches_stable_sort_oracle(self):

        rng = np.random.default_rng(2)
        for _ in range(1000):
            num_tokens = int(rng.integers(2, 1001))
            lt_max = int(rng.integers(1, num_tokens))
            keep = int(rng.integers(1, lt_max + 1))
            acc_attn = rng.integers(0, 8, size=num_tokens).astype(np.float64) * rng.choice([0.5, 1.0])
            bank = long_term_bank(num_tokens, acc_attn, lt_max_tokens=lt_max, topk_keep=keep)

            consolidate(bank)

            oracle = sorted(sorted(range(num_tokens), key=lambda i: (-acc_attn[i], i))[:keep])
            np.testing.assert_array_equal(bank.origin[:, 0], oracle)
            np.testing.assert_array_equal(bank.acc_attn, acc_attn[oracle])
            self.assertEqual(bank.long_term_tokens, keep)

    def test__topk_indices__sorted_by_index(self):

        np.testing.assert_array_equal(topk_indices([1.0, 9.0, 9.0, 4.0], 3), [1, 2, 3])


class TestTotalTokens(TestCase):

    def test__empty_bank__zero(self):

        self.assertEqual(total_tokens(MemoryBank()), 0)

    def test__three_working_frames_and_forty_long_term__eighty_eight(self):

        rng = np.random.default_rng(3)
        bank = long_term_bank(40, np.zeros(40), lt_max_tokens=4000, dim=8)
        for frame_index in range(3):
            bank.working.append(WorkingFrame(Tensor(rng.normal(size=(16, 8))), Tensor(rng.normal(size=(16, 8))), frame_index))

        self.assertEqual(total_tokens(bank), 88)


class TestBankPersistence(TestCase):

    def test__saved_bank__restored_with_both_tiers(self):

        rng = np.random.default_rng(4)
        bank = MemoryBank(MemoryConfig(w_max=2, gating_enabled=False))
        for frame_index in range(4):
            working_insert(bank, *random_frame(rng, frame_index=frame_index))
        memory_read(token_grid(rng.normal(size=(4, 8)), kind='query'), bank)

        with TemporaryDirectory() as tmp_dir:
            save_bank(bank, tmp_dir)
            restored = load_bank(tmp_dir)

        self.assertEqual(restored.config, bank.config)
        self.assertEqual(restored.working_frame_indices, [2, 3])
        np.testing.assert_allclose(restored.lt_keys.data, bank.lt_keys.data, rtol=1e-6)
        np.testing.assert_allclose(restored.acc_attn, bank.acc_attn, rtol=1e-6)
        np.testing.assert_array_equal(restored.origin, bank.origin)

    def test__other_dump_kind__checkpoint_error_raised(self):

        with TemporaryDirectory() as tmp_dir:
            save_arrays(tmp_dir, {'a': np.ones(2)}, extra={'kind': 'pointmaps'})

            with self.assertRaises(CheckpointError):
                load_bank(tmp_dir)

    def test__stats_dump__json_with_reads_and_events(self):

        rng = np.random.default_rng(5)
        bank = MemoryBank()
        working_insert(bank, *random_frame(rng))
        memory_read(token_grid(rng.normal(size=(4, 8)), kind='query'), bank)

        with TemporaryDirectory() as tmp_dir:
            path = Path(tmp_dir) / 'stats.json'
            bank.stats.dump(path)
            document = json.loads(path.read_text())

        self.assertEqual(document['schema_version'], 1)
        self.assertEqual(len(document['reads']), 1)
        self.assertEqual(document['events'][0]['event'], 'insert')
