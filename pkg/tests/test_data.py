"""Data: multipath generation, angular-delay transform, partitions, file IO."""

import numpy as np
import pytest

from csilocal import data as D
from csilocal.model import CsiDims

DIMS = CsiDims(32, 32)


class TestChannelGeneration:
    def test_single_path_zero_delay_broadside_is_constant_gain(self):
        h = D.channel_from_paths(np.array([0.7 + 0.2j]), np.array([0.0]), np.array([0.0]),
                                 CsiDims(4, 8))
        assert np.allclose(h, 0.7 + 0.2j)

    def test_same_seed_identical(self):
        a = D.synth_channel("indoor", DIMS, seed=5)
        b = D.synth_channel("indoor", DIMS, seed=5)
        assert np.array_equal(a, b)

    def test_different_seeds_differ(self):
        assert not np.array_equal(D.synth_channel("outdoor", DIMS, seed=1),
                                  D.synth_channel("outdoor", DIMS, seed=2))

    def test_unknown_environment(self):
        with pytest.raises(D.DataError):
            D.synth_channel("underwater", DIMS, seed=0)

    def test_delay_energy_concentration(self):
        # indoor: >= 90% of delay-domain energy within the first quarter of bins;
        # outdoor spreads wider
        def concentration(env, n=1000):
            total = 0.0
            for i in range(n):
                h = D.synth_channel(env, DIMS, seed=[1, i])
                e = np.abs(D.dft2_angular_delay(h)) ** 2
                total += e[:, :DIMS.n_c // 4].sum() / e.sum()
            return total / n

        indoor = concentration("indoor")
        outdoor = concentration("outdoor")
        assert indoor >= 0.9
        assert outdoor < indoor


class TestAngularDelay:
    def test_constant_matrix_concentrates_at_dc(self):
        a = D.dft2_angular_delay(np.full((8, 8), 2.0 + 0.0j))
        energy = np.abs(a) ** 2
        assert energy[0, 0] == pytest.approx(energy.sum(), rel=1e-9)

    def test_unitarity(self, rng):
        h = rng.standard_normal((16, 16)) + 1j * rng.standard_normal((16, 16))
        a = D.dft2_angular_delay(h)
        assert abs(np.linalg.norm(a) / np.linalg.norm(h) - 1.0) < 1e-6

    def test_matches_direct_sum_oracle(self, rng):
        h = rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8))
        got = D.dft2_angular_delay(h)
        n_t = n_c = 8
        ref = np.zeros((n_t, n_c), dtype=complex)
        for a in range(n_t):
            for d in range(n_c):
                acc = 0.0 + 0.0j
                for t in range(n_t):
                    for c in range(n_c):
                        acc += (h[t, c]
                                * np.exp(-2j * np.pi * a * t / n_t)
                                * np.exp(+2j * np.pi * d * c / n_c))
                ref[a, d] = acc / np.sqrt(n_t * n_c)
        assert np.abs(got - ref).max() < 1e-6


class TestNormalization:
    def test_identity_when_already_unit_range(self):
        x = np.array([0.0, 0.25, 1.0], dtype=np.float32)
        y, rec = D.normalize_minmax(x)
        assert np.allclose(y, x)
        assert rec.offset == 0.0 and rec.scale == 1.0

    def test_round_trip(self, rng):
        x = rng.standard_normal(100).astype(np.float32) * 5
        y, rec = D.normalize_minmax(x)
        assert np.abs(D.denormalize(y, rec) - x).max() < 1e-5

    def test_extremes_hit_zero_and_one(self, rng):
        y, _ = D.normalize_minmax(rng.standard_normal(1000))
        assert y.min() == 0.0 and y.max() == 1.0

    def test_zero_dynamic_range(self):
        with pytest.raises(D.ZeroDynamicRangeError):
            D.normalize_minmax(np.full(10, 3.0))


class TestPartition:
    def _pool(self, n_in, n_out):
        mk = lambda n, v: np.full((n, 2, 2, 2), v, dtype=np.float32)
        return D.SamplePool(mk(n_in, 1.0), mk(n_out, 2.0))

    def test_paper_table_counts(self):
        spec = D.PartitionSpec.heterogeneous_table(13000, seed=0)
        shards = D.partition_noniid(self._pool(65001, 65001), spec)
        assert shards[0].mixture == (12350, 650)
        assert shards[-1].mixture == (650, 12350)
        assert all(s.count == 13000 for s in shards)

    def test_even_ratio_gives_equal_halves(self):
        spec = D.PartitionSpec(((5.0, 5.0),), samples_per_ue=10, seed=0)
        shards = D.partition_noniid(self._pool(10, 10), spec)
        assert shards[0].mixture == (5, 5)

    def test_no_duplicate_sample_ids(self):
        spec = D.PartitionSpec(tuple((7.0, 3.0) for _ in range(4)), 10, seed=1)
        shards = D.partition_noniid(self._pool(40, 40), spec)
        ids = [i for s in shards for i in s.sample_ids]
        assert len(ids) == len(set(ids)) == 40

    def test_pool_exhaustion_reports_counts(self):
        spec = D.PartitionSpec(((9.5, 0.5),), 1000, seed=0)
        with pytest.raises(D.InsufficientDataError, match="950"):
            D.partition_noniid(self._pool(100, 100), spec)

    def test_ratio_pairs_must_sum_to_ten(self):
        with pytest.raises(D.DataError):
            D.PartitionSpec(((6.0, 5.0),), 10)


class TestDatasetIO:
    def _gen(self, seed=3):
        return D.generate_dataset("indoor", CsiDims(8, 8), 2, 16, 8, seed=seed)

    def test_round_trip_bit_exact(self, tmp_path):
        gen = self._gen()
        path = tmp_path / "ds.bin"
        D.write_dataset(path, gen.train_shards + gen.test_shards, gen.normalization)
        shards, norm = D.read_dataset(path)
        assert norm.offset == gen.normalization.offset
        for orig, rt in zip(gen.train_shards + gen.test_shards, shards):
            assert np.array_equal(orig.data, rt.data)
            assert orig.env_tags == rt.env_tags
            assert orig.split == rt.split

    def test_file_size_formula(self, tmp_path):
        gen = self._gen()
        path = tmp_path / "ds.bin"
        D.write_dataset(path, gen.train_shards, gen.normalization)
        total = sum(s.count for s in gen.train_shards)
        assert path.stat().st_size == 24 + 4 * total * 2 * 8 * 8

    def test_bad_magic(self, tmp_path):
        gen = self._gen()
        path = tmp_path / "ds.bin"
        D.write_dataset(path, gen.train_shards, gen.normalization)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(D.BadMagicError):
            D.read_dataset(path)

    def test_version_mismatch(self, tmp_path):
        gen = self._gen()
        path = tmp_path / "ds.bin"
        D.write_dataset(path, gen.train_shards, gen.normalization)
        raw = bytearray(path.read_bytes())
        raw[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(D.VersionMismatchError):
            D.read_dataset(path)

    def test_truncated_payload(self, tmp_path):
        gen = self._gen()
        path = tmp_path / "ds.bin"
        D.write_dataset(path, gen.train_shards, gen.normalization)
        raw = path.read_bytes()
        path.write_bytes(raw[:-10])
        with pytest.raises(D.TruncatedPayloadError):
            D.read_dataset(path)


class TestGenerateDataset:
    def test_pure_function_of_arguments(self):
        a = D.generate_dataset("outdoor", CsiDims(4, 4), 2, 8, 4, seed=9)
        b = D.generate_dataset("outdoor", CsiDims(4, 4), 2, 8, 4, seed=9)
        for sa, sb in zip(a.train_shards, b.train_shards):
            assert np.array_equal(sa.data, sb.data)

    def test_normalized_into_unit_interval(self):
        gen = D.generate_dataset("noniid", CsiDims(4, 4), 10, 20, 10, seed=2)
        data = np.concatenate([s.data for s in gen.train_shards + gen.test_shards])
        assert data.min() >= 0.0 and data.max() <= 1.0
        assert data.min() == 0.0 and data.max() == 1.0

    def test_noniid_train_mixtures_follow_table_and_test_stays_balanced(self):
        gen = D.generate_dataset("noniid", CsiDims(4, 4), 10, 20, 10, seed=2)
        assert gen.train_shards[0].mixture == (19, 1)
        assert gen.train_shards[9].mixture == (1, 19)
        assert all(s.mixture == (5, 5) for s in gen.test_shards)

    def test_noniid_needs_table_or_ratios(self):
        with pytest.raises(D.DataError):
            D.generate_dataset("noniid", CsiDims(4, 4), 3, 10, 5, seed=0)
        gen = D.generate_dataset("noniid", CsiDims(4, 4), 3, 10, 5, seed=0,
                                 ratios=[(8.0, 2.0), (5.0, 5.0), (2.0, 8.0)])
        assert gen.train_shards[0].mixture == (8, 2)

    def test_single_environment_runs(self):
        gen = D.generate_dataset("indoor", CsiDims(4, 4), 2, 6, 4, seed=1)
        assert all(t == "indoor" for s in gen.train_shards for t in s.env_tags)
