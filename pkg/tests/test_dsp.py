import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from emasynth import dsp
from emasynth.dsp import (
    AcousticFeatures,
    analyze,
    export_world,
    import_world,
    mcep_to_spectrum,
    read_features,
    spectrum_to_mcep,
    synthesize,
    warp_phase,
    write_features,
)
from emasynth.errors import DomainError, ParseError


def brute_force_spectrum(c, alpha, fft_size):
    """Per-bin oracle: evaluate the cosine series with explicit loops."""
    half = fft_size // 2
    out = np.empty(half + 1)
    for k in range(half + 1):
        omega = math.pi * k / half
        beta = omega + 2.0 * math.atan2(
            alpha * math.sin(omega), 1.0 - alpha * math.cos(omega)
        )
        acc = c[0]
        for m in range(1, len(c)):
            acc += 2.0 * c[m] * math.cos(m * beta)
        out[k] = math.exp(acc)
    return out


def normalized_autocorrelation(x, lags):
    x = np.asarray(x, dtype=float)
    out = {}
    denom0 = float(np.dot(x, x))
    for lag in lags:
        a = x[:-lag] if lag else x
        b = x[lag:]
        out[lag] = float(np.dot(a, b)) / math.sqrt(
            max(np.dot(a, a) * np.dot(b, b), 1e-30)
        )
    return out


class TestWarp:
    @pytest.mark.parametrize("alpha", [-0.9, -0.42, 0.0, 0.42, 0.77])
    def test_endpoint_preservation(self, alpha):
        assert warp_phase(np.array([0.0]), alpha)[0] == pytest.approx(0.0, abs=1e-15)
        assert warp_phase(np.array([np.pi]), alpha)[0] == pytest.approx(np.pi, abs=1e-12)

    def test_alpha_domain(self):
        with pytest.raises(DomainError):
            warp_phase(np.array([0.5]), 1.0)

    def test_monotone(self):
        omega = np.linspace(0, np.pi, 500)
        beta = warp_phase(omega, 0.42)
        assert np.all(np.diff(beta) > 0)


class TestMcepSpectrum:
    def test_zero_coefficients_unit_spectrum(self):
        S = mcep_to_spectrum(np.zeros(25))
        assert_allclose(S, 1.0, atol=1e-14)

    def test_constant_term(self):
        c = np.zeros(25)
        c[0] = 1.0
        assert_allclose(mcep_to_spectrum(c), math.e, atol=1e-12)

    def test_unwarped_matches_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        c = rng.standard_normal(13) * 0.2
        S = mcep_to_spectrum(c, alpha=0.0, fft_size=128)
        assert_allclose(S, brute_force_spectrum(c, 0.0, 128), atol=1e-10)

    def test_warped_matches_brute_force_oracle(self):
        rng = np.random.default_rng(1)
        c = rng.standard_normal(9) * 0.3
        S = mcep_to_spectrum(c, alpha=0.42, fft_size=64)
        assert_allclose(S, brute_force_spectrum(c, 0.42, 64), atol=1e-10)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10**6))
    def test_log_linearity(self, seed):
        rng = np.random.default_rng(seed)
        c1 = rng.standard_normal(10) * 0.2
        c2 = rng.standard_normal(10) * 0.2
        lhs = np.log(mcep_to_spectrum(c1 + c2, 0.42, 128))
        rhs = np.log(mcep_to_spectrum(c1, 0.42, 128)) + np.log(
            mcep_to_spectrum(c2, 0.42, 128)
        )
        assert_allclose(lhs, rhs, atol=1e-10)

    def test_round_trip_recovers_coefficients(self):
        rng = np.random.default_rng(2)
        c_star = rng.standard_normal(25) * 0.3
        S = mcep_to_spectrum(c_star, 0.42, 1024)
        c_hat = spectrum_to_mcep(S, 0.42, 24)
        assert_allclose(c_hat, c_star, atol=1e-8)

    def test_unit_spectrum_zero_coefficients(self):
        c = spectrum_to_mcep(np.ones(513), 0.42, 24)
        assert_allclose(c, 0.0, atol=1e-10)

    def test_projection_idempotent(self):
        rng = np.random.default_rng(3)
        S = np.exp(rng.standard_normal(513) * 0.4)
        c1 = spectrum_to_mcep(S, 0.42, 24)
        c2 = spectrum_to_mcep(mcep_to_spectrum(c1, 0.42, 1024), 0.42, 24)
        assert_allclose(c2, c1, atol=1e-8)

    def test_out_of_span_residual_matches_normal_equations_oracle(self):
        rng = np.random.default_rng(4)
        S = np.exp(rng.standard_normal(257) * 0.5)
        order = 12
        c = spectrum_to_mcep(S, 0.42, order)
        basis = dsp._cosine_basis(0.42, 512, order)
        # dense normal-equations oracle
        c_oracle = np.linalg.solve(basis.T @ basis, basis.T @ np.log(S))
        resid = np.linalg.norm(basis @ c - np.log(S))
        resid_oracle = np.linalg.norm(basis @ c_oracle - np.log(S))
        assert abs(resid - resid_oracle) < 1e-8

    def test_non_positive_spectrum_rejected(self):
        with pytest.raises(DomainError):
            spectrum_to_mcep(np.zeros(513))


class TestAnalyze:
    def test_silence_is_unvoiced(self):
        rng = np.random.default_rng(5)
        audio = 1e-6 * rng.standard_normal(16000)
        feats = analyze(audio)
        assert np.all(feats.f0 == 0.0)
        assert np.all(feats.bap == 1.0)

    def test_pulse_train_f0(self):
        audio = np.zeros(16000)
        audio[::160] = 1.0  # exactly 100 Hz
        feats = analyze(audio)
        voiced = feats.f0 > 0
        assert voiced.mean() > 0.5
        assert 99.0 <= np.median(feats.f0[voiced]) <= 101.0

    def test_frame_count(self):
        for n in (16000, 12345, 8000):
            audio = np.random.default_rng(6).standard_normal(n) * 0.1
            feats = analyze(audio)
            assert feats.n_frames == round(n / 80)

    def test_too_short_rejected(self):
        with pytest.raises(DomainError):
            analyze(np.zeros(100))


class TestSynthesize:
    def test_empty_features(self):
        feats = AcousticFeatures(mcep=np.zeros((0, 25)), f0=np.zeros(0),
                                 bap=np.zeros((0, 1)))
        assert synthesize(feats).size == 0

    def test_unvoiced_noise_is_noise_like(self):
        T = 200
        feats = AcousticFeatures(mcep=np.zeros((T, 25)), f0=np.zeros(T),
                                 bap=np.ones((T, 1)))
        audio = synthesize(feats, noise_seed=1)
        assert audio.size == T * 80
        r = normalized_autocorrelation(audio, range(20, 400, 7))
        assert max(abs(v) for v in r.values()) < 0.2

    def test_voiced_pulse_train_periodicity(self):
        T = 200
        feats = AcousticFeatures(mcep=np.zeros((T, 25)),
                                 f0=np.full(T, 100.0),
                                 bap=np.zeros((T, 1)))
        audio = synthesize(feats)
        r = normalized_autocorrelation(audio, [160])
        assert r[160] >= 0.5

    def test_analyze_synthesize_f0_round_trip(self):
        T = 200
        for f0_val in (100.0, 160.0, 220.0):
            feats = AcousticFeatures(mcep=np.zeros((T, 25)),
                                     f0=np.full(T, f0_val),
                                     bap=np.zeros((T, 1)))
            audio = synthesize(feats)
            est = analyze(audio)
            voiced = est.f0 > 0
            assert voiced.mean() > 0.5
            assert abs(np.median(est.f0[voiced]) - f0_val) <= 5.0

    def test_deterministic_given_seed(self):
        T = 50
        feats = AcousticFeatures(mcep=np.zeros((T, 25)), f0=np.zeros(T),
                                 bap=np.ones((T, 1)))
        a = synthesize(feats, noise_seed=9)
        b = synthesize(feats, noise_seed=9)
        c = synthesize(feats, noise_seed=10)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)


class TestFeatureValidation:
    def test_bad_f0_range(self):
        with pytest.raises(DomainError):
            AcousticFeatures(mcep=np.zeros((3, 25)), f0=np.array([0.0, 30.0, 100.0]),
                             bap=np.ones((3, 1)))

    def test_bad_bap_range(self):
        with pytest.raises(DomainError):
            AcousticFeatures(mcep=np.zeros((2, 25)), f0=np.zeros(2),
                             bap=np.array([[1.5], [0.0]]))

    def test_negative_f0(self):
        with pytest.raises(DomainError):
            AcousticFeatures(mcep=np.zeros((1, 25)), f0=np.array([-1.0]),
                             bap=np.ones((1, 1)))


class TestFeatureFiles:
    def _features(self, T=17, M=24, B=2, seed=0):
        rng = np.random.default_rng(seed)
        f0 = np.where(rng.random(T) > 0.4, rng.uniform(80, 300, T), 0.0)
        return AcousticFeatures(
            mcep=rng.standard_normal((T, M + 1)).astype("<f4").astype(float),
            f0=f0.astype("<f4").astype(float),
            bap=rng.random((T, B)).astype("<f4").astype(float),
        )

    def test_file_round_trip_bit_exact(self, tmp_path):
        feats = self._features()
        p1 = tmp_path / "a.afv"
        p2 = tmp_path / "b.afv"
        write_features(p1, feats)
        loaded = read_features(p1)
        write_features(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()
        assert_allclose(loaded.mcep, feats.mcep)
        assert_allclose(loaded.f0, feats.f0)
        assert_allclose(loaded.bap, feats.bap)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.afv"
        p.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ParseError):
            read_features(p)

    def test_truncated_rejected(self, tmp_path):
        feats = self._features()
        p = tmp_path / "t.afv"
        write_features(p, feats)
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(ParseError):
            read_features(p)

    def test_world_export_import(self, tmp_path):
        feats = self._features(B=1, seed=3)
        feats.mcep *= 0.2
        paths = export_world(feats, tmp_path, "utt1")
        back = import_world(paths["f0"], paths["sp"], paths["ap"])
        assert_allclose(back.f0, feats.f0, atol=1e-12)
        assert_allclose(back.mcep, feats.mcep, atol=1e-6)
        assert_allclose(back.bap, feats.bap, atol=1e-12)
