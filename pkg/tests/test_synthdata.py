import numpy as np
import pytest

from chanex.errors import ConfigurationError, FormatError, ValidationError
from chanex.synthdata import (
    Dataset,
    TASK_KINDS,
    bump_field,
    complementarity_gap,
    derive_modality,
    gen_latent,
    load_dataset,
    make_dataset,
    save_dataset,
)
from chanex.synthdata import _ridge

from oracles import ridge_fit_predict


class TestLatentField:
    def test_single_bump_peaks_at_center(self):
        z = bump_field(33, 33, centers=[(16.0, 16.0)], widths=[2.0], amplitudes=[1.0])
        assert np.unravel_index(np.argmax(z), z.shape) == (16, 16)

    def test_same_seed_bit_identical(self):
        a = gen_latent(123).z
        b = gen_latent(123).z
        assert np.array_equal(a, b)

    def test_distinct_seeds_decorrelate(self):
        a = gen_latent(0).plane.ravel()
        b = gen_latent(1).plane.ravel()
        assert abs(np.corrcoef(a, b)[0, 1]) < 0.5

    def test_batch_statistics(self):
        # range stays in [0, 1] and the field is smooth for default parameters
        for seed in range(100):
            z = gen_latent(seed).plane
            assert z.min() >= 0.0 and z.max() <= 1.0
            rough = 0.5 * (
                np.abs(np.diff(z, axis=0)).mean() + np.abs(np.diff(z, axis=1)).mean()
            )
            assert rough < 0.2

    def test_degenerate_sizes_rejected(self):
        with pytest.raises(ValidationError):
            gen_latent(0, h=4, w=32)
        with pytest.raises(ValidationError):
            gen_latent(0, k=0)


class TestDeriveModality:
    def constant_field(self, value=0.4):
        from chanex.synthdata import LatentField

        return LatentField(z=np.full((1, 16, 16), value))

    def test_edge_of_constant_is_zero(self):
        view = derive_modality(self.constant_field(), "edge", seed=0, noise_sigma=0.0)
        assert np.all(view.data == 0.0)

    def test_coarse_of_constant_is_constant(self):
        view = derive_modality(self.constant_field(0.4), "coarse", seed=0, noise_sigma=0.0)
        np.testing.assert_allclose(view.data, 0.4, atol=1e-12)

    def test_quantized_matches_binning_oracle(self):
        z = gen_latent(5)
        view = derive_modality(z, "quantized", seed=0, noise_sigma=0.0)
        edges = np.array([0.25, 0.5, 0.75])
        want = (z.plane[None] >= edges[:, None, None]).sum(axis=0)
        np.testing.assert_array_equal(view.data[0], want)
        assert set(np.unique(view.data)) <= {0.0, 1.0, 2.0, 3.0}

    def test_noise_is_seeded(self):
        z = gen_latent(1)
        a = derive_modality(z, "coarse", seed=7, noise_sigma=0.05).data
        b = derive_modality(z, "coarse", seed=7, noise_sigma=0.05).data
        c = derive_modality(z, "coarse", seed=8, noise_sigma=0.05).data
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            derive_modality(gen_latent(0), "wavelet", seed=0, noise_sigma=0.0)


class TestMakeDataset:
    def test_single_sample_roundtrip(self, tmp_path):
        ds = make_dataset("fusion_regression", 1, 1, seed=3)
        path = tmp_path / "one.cendata"
        save_dataset(ds, path)
        back = load_dataset(path)
        assert back.equals(ds)

    def test_fixed_seed_bit_identical(self):
        a = make_dataset("fusion_regression", 4, 2, seed=9)
        b = make_dataset("fusion_regression", 4, 2, seed=9)
        assert a.equals(b)

    @pytest.mark.parametrize("kind", TASK_KINDS)
    def test_shapes_per_task_kind(self, kind):
        ds = make_dataset(kind, 3, 2, seed=0)
        n_mod = {"fusion_regression": 2, "fusion_segmentation": 2, "cycle_triplet": 3,
                 "multitask_pair": 1, "mm_mt_quad": 2}[kind]
        assert len(ds.inputs_train) == n_mod
        for arr in ds.inputs_train:
            assert arr.shape == (3, 1, 32, 32) and arr.dtype == np.float32
        for arr, tk in zip(ds.targets_val, ds.target_kinds):
            if tk == "labels":
                assert arr.shape == (2, 32, 32) and arr.dtype == np.int64
            else:
                assert arr.shape == (2, 1, 32, 32) and arr.dtype == np.float32

    def test_default_sizes_generate_quickly(self):
        import time

        t0 = time.time()
        make_dataset("fusion_regression", 256, 64, seed=0)
        assert time.time() - t0 < 5.0

    def test_bad_args(self):
        with pytest.raises(ConfigurationError):
            make_dataset("nope", 1, 1, seed=0)
        with pytest.raises(ValidationError):
            make_dataset("fusion_regression", 0, 1, seed=0)


class TestPersistence:
    def test_full_roundtrip_all_kinds(self, tmp_path):
        for kind in TASK_KINDS:
            ds = make_dataset(kind, 2, 2, seed=1)
            path = tmp_path / f"{kind}.cendata"
            save_dataset(ds, path)
            assert load_dataset(path).equals(ds)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.cendata"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
        with pytest.raises(FormatError, match="magic"):
            load_dataset(path)

    def test_truncated_payload(self, tmp_path):
        ds = make_dataset("fusion_regression", 2, 1, seed=0)
        path = tmp_path / "full.cendata"
        save_dataset(ds, path)
        clipped = path.read_bytes()[:-64]
        bad = tmp_path / "clipped.cendata"
        bad.write_bytes(clipped)
        with pytest.raises(FormatError):
            load_dataset(bad)


class TestComplementarity:
    def test_ridge_matches_oracle(self):
        r = np.random.default_rng(0)
        xtr = r.normal(size=(200, 2))
        y = xtr @ np.array([0.7, -0.3]) + 0.1 + 0.01 * r.normal(size=200)
        xva = r.normal(size=(50, 2))
        got = _ridge(xtr, y, xva)
        want = ridge_fit_predict(xtr, y, xva)
        np.testing.assert_allclose(got, want, atol=1e-10)

    def test_fusion_has_measured_headroom(self):
        # every single view must be strictly worse than the joint fit; the
        # measured gap for the default field is ~1.23 (see the acceptance
        # suite for the stated 1.5 target and its status)
        ds = make_dataset("fusion_regression", 128, 64, seed=0)
        rep = complementarity_gap(ds)
        assert rep["min_single_over_both"] > 1.15
        assert rep["mse_both"] < min(rep["mse_single"].values())

    def test_requires_two_modalities(self):
        ds = make_dataset("multitask_pair", 2, 2, seed=0)
        with pytest.raises(ConfigurationError):
            complementarity_gap(ds)
