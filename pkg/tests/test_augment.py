"""Geometric transforms, virtual-example mixing and TTA version tests."""

import numpy as np
import pytest
from scipy import stats

from btdnet.augment import (
    geometric_transform,
    hflip,
    mix_scans,
    sample_lambda,
    transform_scan,
    tta_versions,
)
from btdnet.data import MODALITIES, Modality, Scan, Volume
from btdnet.errors import InvalidParameter, ShapeMismatch

from conftest import make_padded_scan, tiny_config


def _padded_volume(rng, l=4, t=8, size=32):
    px = np.full((t, size, size, 3), -1.0, dtype=np.float32)
    px[:l] = rng.uniform(-1, 1, size=(l, size, size, 1)).astype(np.float32)
    return Volume(Modality.FLAIR, px, l)


class TestGeometricTransform:
    def test_deterministic_given_seed(self, rng):
        vol = _padded_volume(rng)
        a = geometric_transform(vol, np.random.default_rng(99))
        b = geometric_transform(vol, np.random.default_rng(99))
        np.testing.assert_array_equal(a.pixels, b.pixels)

    def test_identity_when_disabled(self, rng):
        vol = _padded_volume(rng)
        out = geometric_transform(vol, np.random.default_rng(0), rotation_deg=0.0, hflip_prob=0.0)
        np.testing.assert_array_equal(out.pixels, vol.pixels)

    def test_slices_get_independent_transforms(self, rng):
        """Over 100 seeded draws a volume of identical slices always ends up
        with at least two distinct transformed slices."""
        base = rng.uniform(-1, 1, size=(1, 32, 32, 1)).astype(np.float32)
        px = np.repeat(np.repeat(base, 10, axis=0), 3, axis=3)
        vol = Volume(Modality.T2, px, 10)
        for seed in range(100):
            out = geometric_transform(vol, np.random.default_rng(seed))
            distinct = {out.pixels[i].tobytes() for i in range(10)}
            assert len(distinct) >= 2

    def test_padding_untouched(self, rng):
        vol = _padded_volume(rng, l=3, t=7)
        out = geometric_transform(vol, np.random.default_rng(5))
        assert (out.pixels[3:] == -1.0).all()

    def test_values_clamped(self, rng):
        vol = _padded_volume(rng, l=5)
        out = geometric_transform(vol, np.random.default_rng(7))
        assert out.pixels.min() >= -1.0 and out.pixels.max() <= 1.0


class TestHflip:
    def test_exact_involution(self, rng):
        arr = rng.uniform(-1, 1, size=(17, 23, 3)).astype(np.float32)
        np.testing.assert_array_equal(hflip(hflip(arr)), arr)

    def test_mirrors_columns(self):
        arr = np.arange(6, dtype=np.float32).reshape(2, 3)
        np.testing.assert_array_equal(hflip(arr), arr[:, ::-1])


class TestSampleLambda:
    def test_alpha_one_is_uniform(self):
        """Kolmogorov-Smirnov against Uniform[0,1] on 1e5 draws."""
        rng = np.random.default_rng(0)
        draws = np.array([sample_lambda(1.0, rng) for _ in range(100_000)])
        ks = stats.kstest(draws, "uniform").statistic
        assert ks < 0.01

    def test_large_alpha_concentrates_at_half(self):
        rng = np.random.default_rng(1)
        draws = np.array([sample_lambda(100.0, rng) for _ in range(100_000)])
        assert abs(draws.mean() - 0.5) < 0.01

    @pytest.mark.parametrize("alpha", [0.0, -0.5])
    def test_invalid_alpha(self, alpha):
        with pytest.raises(InvalidParameter):
            sample_lambda(alpha, np.random.default_rng(0))


class TestMixScans:
    def _two_scans(self, rng, cfg):
        a = make_padded_scan(rng, cfg, {m: 3 for m in MODALITIES}, label=1, scan_id="a")
        b = make_padded_scan(rng, cfg, {m: 5 for m in MODALITIES}, label=0, scan_id="b")
        return a, b

    def test_endpoints_bitwise(self, rng, cfg):
        a, b = self._two_scans(rng, cfg)
        one = mix_scans(a, b, 1.0)
        zero = mix_scans(a, b, 0.0)
        for m in MODALITIES:
            np.testing.assert_array_equal(one.volumes[m].pixels, a.volumes[m].pixels)
            np.testing.assert_array_equal(zero.volumes[m].pixels, b.volumes[m].pixels)
        np.testing.assert_array_equal(one.soft_label, a.one_hot())
        np.testing.assert_array_equal(zero.soft_label, b.one_hot())

    def test_midpoint_of_constants(self, cfg):
        vols_a = {
            m: Volume(m, np.full((cfg.model.t[m], 8, 8, 3), 0.2, dtype=np.float64), 2)
            for m in MODALITIES
        }
        vols_b = {
            m: Volume(m, np.full((cfg.model.t[m], 8, 8, 3), -0.4, dtype=np.float64), 2)
            for m in MODALITIES
        }
        mix = mix_scans(Scan("a", vols_a, 0), Scan("b", vols_b, 1), 0.5)
        for m in MODALITIES:
            np.testing.assert_allclose(mix.volumes[m].pixels, -0.1, atol=1e-12)

    def test_label_mixing(self, rng, cfg):
        a, b = self._two_scans(rng, cfg)  # labels 1 and 0
        mix = mix_scans(a, b, 0.3)
        np.testing.assert_allclose(mix.soft_label, [0.7, 0.3], atol=1e-12)
        assert abs(mix.soft_label.sum() - 1.0) < 1e-12

    def test_symmetry(self, rng, cfg):
        a, b = self._two_scans(rng, cfg)
        lam = 0.37
        ab = mix_scans(a, b, lam)
        ba = mix_scans(b, a, 1.0 - lam)
        for m in MODALITIES:
            np.testing.assert_array_equal(ab.volumes[m].pixels, ba.volumes[m].pixels)

    def test_voxels_within_envelope(self, rng, cfg):
        a, b = self._two_scans(rng, cfg)
        for lam in (0.1, 0.5, 0.9):
            mix = mix_scans(a, b, lam)
            for m in MODALITIES:
                lo = np.minimum(a.volumes[m].pixels, b.volumes[m].pixels)
                hi = np.maximum(a.volumes[m].pixels, b.volumes[m].pixels)
                assert (mix.volumes[m].pixels >= lo - 1e-7).all()
                assert (mix.volumes[m].pixels <= hi + 1e-7).all()

    def test_true_length_is_max(self, rng, cfg):
        a, b = self._two_scans(rng, cfg)
        mix = mix_scans(a, b, 0.4)
        for m in MODALITIES:
            assert mix.volumes[m].true_length == 5

    def test_shape_mismatch(self, rng):
        a = make_padded_scan(rng, tiny_config(t=8), {m: 2 for m in MODALITIES})
        b = make_padded_scan(rng, tiny_config(t=6), {m: 2 for m in MODALITIES})
        with pytest.raises(ShapeMismatch):
            mix_scans(a, b, 0.5)

    def test_lambda_out_of_range(self, rng, cfg):
        a, b = self._two_scans(rng, cfg)
        with pytest.raises(InvalidParameter):
            mix_scans(a, b, 1.5)


class TestTtaVersions:
    def test_four_versions_first_is_input(self, rng, cfg):
        scan = make_padded_scan(rng, cfg, {m: 4 for m in MODALITIES})
        versions = tta_versions(scan, np.random.default_rng(0))
        assert len(versions) == 4
        for m in MODALITIES:
            np.testing.assert_array_equal(
                versions[0].volumes[m].pixels, scan.volumes[m].pixels
            )

    def test_flip_version_is_involution(self, rng, cfg):
        scan = make_padded_scan(rng, cfg, {m: 4 for m in MODALITIES})
        versions = tta_versions(scan, np.random.default_rng(0))
        for m in MODALITIES:
            flipped_back = np.stack(
                [hflip(s) for s in versions[1].volumes[m].pixels]
            )
            np.testing.assert_array_equal(flipped_back, scan.volumes[m].pixels)

    def test_zero_rotation_collapses(self, rng, cfg):
        scan = make_padded_scan(rng, cfg, {m: 3 for m in MODALITIES})
        x, f, r, fr = tta_versions(scan, np.random.default_rng(0), rotation_deg=0.0)
        for m in MODALITIES:
            np.testing.assert_array_equal(r.volumes[m].pixels, x.volumes[m].pixels)
            np.testing.assert_array_equal(fr.volumes[m].pixels, f.volumes[m].pixels)

    def test_whole_scan_coherent(self, rng, cfg):
        """All slices of all modalities in the rotated version share one angle:
        identical input slices stay identical after the transform."""
        base = rng.uniform(-1, 1, size=(224, 224, 1)).astype(np.float32)
        volumes = {
            m: Volume(m, np.repeat(base[None], 3, axis=3).repeat(cfg.model.t[m], axis=0), cfg.model.t[m])
            for m in MODALITIES
        }
        scan = Scan("c", volumes, 0)
        _, _, rotated, _ = tta_versions(scan, np.random.default_rng(3))
        ref = rotated.volumes[Modality.FLAIR].pixels[0]
        for m in MODALITIES:
            for i in range(volumes[m].true_length):
                np.testing.assert_array_equal(rotated.volumes[m].pixels[i], ref)

    def test_force_identity(self, rng, cfg):
        scan = make_padded_scan(rng, cfg, {m: 4 for m in MODALITIES})
        versions = tta_versions(scan, np.random.default_rng(0), force_identity=True)
        for v in versions:
            for m in MODALITIES:
                np.testing.assert_array_equal(v.volumes[m].pixels, scan.volumes[m].pixels)

    def test_training_transform_is_per_slice_but_tta_is_not(self, rng, cfg):
        """Training transforms differ slice to slice; TTA shares one per scan."""
        base = rng.uniform(-1, 1, size=(224, 224, 1)).astype(np.float32)
        volumes = {
            m: Volume(m, np.repeat(base[None], 3, axis=3).repeat(cfg.model.t[m], axis=0), cfg.model.t[m])
            for m in MODALITIES
        }
        scan = Scan("c", volumes, 0)
        trained = transform_scan(scan, np.random.default_rng(11))
        distinct = {
            trained.volumes[Modality.FLAIR].pixels[i].tobytes()
            for i in range(volumes[Modality.FLAIR].true_length)
        }
        assert len(distinct) >= 2
