import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import fft as sp_fft
from scipy import stats

from fibernlc.signal import (SNR_CAP_DB, DualPolSignal, NonFiniteError, align_circular,
                             angular_frequency, circular_convolve, constellation_points,
                             dbm_to_watt, downsample, effective_snr, fir_convolve_circular,
                             gen_symbol_frame, lowpass, matched_filter, normalize_to_power,
                             phase_offset_correct, resample_rational, rrc_taps, shape_pulses,
                             shape_pulses_periodic, watt_to_dbm)

from .conftest import crandn


# --- types ------------------------------------------------------------------

def test_dual_pol_signal_validation():
    with pytest.raises(ValueError):
        DualPolSignal(np.zeros((3, 4)), 1.0)
    with pytest.raises(ValueError):
        DualPolSignal(np.zeros((2, 4)), 0.0)
    with pytest.raises(NonFiniteError):
        DualPolSignal(np.array([[np.nan, 0], [0, 0]]), 1.0)
    with pytest.raises(ValueError):
        DualPolSignal.from_xy([1, 2], [1], 1.0)


def test_angular_frequency_follows_fft_order():
    w = angular_frequency(8, 8.0)
    assert w[0] == 0
    # E ~ exp(-j w t): bin k of the FFT carries w = -2 pi f_k
    np.testing.assert_allclose(w, -2 * np.pi * sp_fft.fftfreq(8, 1 / 8.0))


# --- symbols ----------------------------------------------------------------

def test_frame_size_and_unit_energy():
    fr = gen_symbol_frame(7, 2 ** 16, "16QAM")
    assert fr.symbols.shape == (2, 65536)
    assert abs(np.mean(np.abs(fr.symbols) ** 2) - 1) < 1e-12


def test_frame_deterministic():
    a = gen_symbol_frame(7, 1000)
    b = gen_symbol_frame(7, 1000)
    assert np.array_equal(a.symbols, b.symbols)
    assert not np.array_equal(a.symbols[0], a.symbols[1])


def test_frame_symbols_on_constellation():
    for name in ("QPSK", "16QAM"):
        pts = constellation_points(name)
        fr = gen_symbol_frame(3, 999, name)
        d = np.abs(fr.symbols[..., None] - pts).min(axis=-1)
        assert d.max() < 1e-15
        assert abs(np.mean(np.abs(pts) ** 2) - 1) < 1e-15


def test_frame_counts_uniform():
    # chi-square oracle over symbol counts
    fr = gen_symbol_frame(7, 10 ** 6, "16QAM")
    pts = constellation_points("16QAM")
    idx = np.abs(fr.symbols[0][:, None] - pts).argmin(axis=1)
    counts = np.bincount(idx, minlength=16)
    expected = 10 ** 6 / 16
    sigma = math.sqrt(10 ** 6 * (1 / 16) * (15 / 16))
    assert np.all(np.abs(counts - expected) <= 4 * sigma)
    assert stats.chisquare(counts).pvalue > 1e-4


def test_gray_mapping_neighbours_differ_by_one_bit():
    pts = constellation_points("16QAM")
    for a in range(16):
        for b in range(16):
            if abs(abs(pts[a] - pts[b]) - 2 / math.sqrt(10)) < 1e-12:
                assert bin(a ^ b).count("1") == 1


def test_unknown_constellation():
    with pytest.raises(ValueError):
        gen_symbol_frame(0, 10, "8PSK")


# --- RRC ----------------------------------------------------------------------

def test_rrc_taps_normalized_and_symmetric():
    t = rrc_taps(0.01, 64, 4).taps
    assert t.size == 257
    assert abs(np.sum(t ** 2) - 1) < 1e-12
    assert np.array_equal(t, t[::-1])
    assert np.argmax(np.abs(t)) == t.size // 2


def test_rrc_singular_points_finite():
    # rolloff 0.25 puts |t| = 1 exactly on a tap
    t = rrc_taps(0.25, 8, 4).taps
    assert np.all(np.isfinite(t))
    # the analytic limit agrees with neighbouring evaluations
    tt = rrc_taps(0.25, 8, 400).taps
    c = tt.size // 2
    i = c + 400
    assert abs(tt[i] - 0.5 * (tt[i - 1] + tt[i + 1])) < 1e-4 * np.abs(tt).max()


def test_rrc_cascade_isi():
    # span 256: truncation ISI of the 1% roll-off pulse falls below 1e-3
    t = rrc_taps(0.01, 256, 4).taps
    rc = np.convolve(t, t)
    c = rc.size // 2
    off = np.concatenate([rc[c::-4][1:], rc[c::4][1:]])
    assert np.abs(off).max() < 1e-3 * rc[c]


def test_shape_pulses_impulse_response():
    sym = np.zeros((2, 64), dtype=complex)
    sym[:, 0] = 1
    from fibernlc.signal import SymbolFrame
    fr = SymbolFrame(sym, 25e9, "16QAM")
    taps = rrc_taps(0.5, 8, 4)
    out = shape_pulses(fr, taps, 4)
    assert out.n_samples == 256
    expected = np.zeros(256)
    half = taps.taps.size // 2
    idx = (np.arange(taps.taps.size) - half) % 256
    expected[idx] = taps.taps
    np.testing.assert_allclose(out.x, expected, atol=1e-15)


def test_shaped_length_and_rate():
    fr = gen_symbol_frame(1, 2 ** 16)
    out = shape_pulses_periodic(fr, 0.01, 4)
    assert out.n_samples == 2 ** 18
    assert out.sample_rate == 100e9


def test_shaped_spectrum_out_of_band():
    # periodogram oracle: power outside (1 + rolloff) * baud / 2
    fr = gen_symbol_frame(5, 2 ** 14)
    sig = shape_pulses(fr, rrc_taps(0.01, 256, 4), 4)
    spec = np.abs(sp_fft.fft(sig.field, axis=-1)) ** 2
    f = np.abs(sp_fft.fftfreq(sig.n_samples, 1 / sig.sample_rate))
    oob = spec[:, f > 1.01 * 25e9 / 2].sum() / spec.sum()
    assert 10 * np.log10(oob) < -40


def test_periodic_shaping_then_matched_filter_is_exact():
    fr = gen_symbol_frame(2, 4096)
    sig = shape_pulses_periodic(fr, 0.01, 4)
    rx = downsample(matched_filter(sig, 0.01, fr.baud_rate), 4)
    np.testing.assert_allclose(rx, fr.symbols, atol=1e-12)


# --- convolution ----------------------------------------------------------------

def test_convolve_identity_and_shift(rng):
    x = crandn(rng, 2, 32)
    sig = DualPolSignal(x, 1.0)
    np.testing.assert_array_equal(fir_convolve_circular(sig, [1], [1]).field, x)
    d = np.zeros(9)
    d[4 + 3] = 1
    out = fir_convolve_circular(sig, d, d)
    np.testing.assert_allclose(out.field, np.roll(x, 3, axis=-1), atol=0)


def test_convolve_matches_direct_sum(rng):
    x = crandn(rng, 64)
    t = crandn(rng, 9)
    out = circular_convolve(x, t)
    ref = np.array([sum(t[k + 4] * x[(n - k) % 64] for k in range(-4, 5)) for n in range(64)])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_convolve_rejects_even_taps(rng):
    sig = DualPolSignal(crandn(rng, 2, 16), 1.0)
    with pytest.raises(ValueError):
        fir_convolve_circular(sig, np.ones(4), np.ones(3))


@given(st.integers(0, 2 ** 32 - 1), st.integers(0, 6), st.integers(16, 80))
def test_convolve_equals_fft_product(seed, half, n):
    r = np.random.default_rng(seed)
    x = crandn(r, n)
    t = crandn(r, 2 * half + 1)
    h = np.zeros(n, dtype=complex)
    h[(np.arange(-half, half + 1)) % n] = t
    ref = sp_fft.ifft(sp_fft.fft(x) * sp_fft.fft(h))
    np.testing.assert_allclose(circular_convolve(x, t), ref, atol=1e-10)


@given(st.integers(0, 2 ** 32 - 1), st.complex_numbers(max_magnitude=10, allow_nan=False),
       st.complex_numbers(max_magnitude=10, allow_nan=False))
def test_convolve_linear(seed, a, b):
    r = np.random.default_rng(seed)
    s1, s2, t = crandn(r, 48), crandn(r, 48), crandn(r, 7)
    lhs = circular_convolve(a * s1 + b * s2, t)
    rhs = a * circular_convolve(s1, t) + b * circular_convolve(s2, t)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12 * (1 + abs(a) + abs(b)) * 50)


# --- resampling and filtering ----------------------------------------------------

def test_resample_identity(rng):
    sig = DualPolSignal(crandn(rng, 2, 64), 1.0)
    assert resample_rational(sig, 1, 1) is sig


def test_resample_round_trip(rng):
    sig = DualPolSignal(crandn(rng, 2, 64), 1.0)
    up = resample_rational(sig, 2, 1)
    assert up.n_samples == 128 and up.sample_rate == 2.0
    back = resample_rational(up, 1, 2)
    np.testing.assert_allclose(back.field, sig.field, atol=1e-12)


@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([(2, 1), (3, 2), (4, 3), (5, 1)]))
def test_resample_up_down_identity(seed, ratio):
    up, down = ratio
    r = np.random.default_rng(seed)
    n = 48
    spec = np.zeros((2, n), dtype=complex)
    spec[:, :n // 3] = crandn(r, 2, n // 3)
    spec[:, -n // 3:] = crandn(r, 2, n // 3)
    sig = DualPolSignal(sp_fft.ifft(spec, axis=-1), 1.0)
    there = resample_rational(sig, up, down)
    back = resample_rational(there, down, up)
    np.testing.assert_allclose(back.field, sig.field, atol=1e-12)


def test_resample_errors(rng):
    sig = DualPolSignal(crandn(rng, 2, 15), 1.0)
    with pytest.raises(ValueError):
        resample_rational(sig, 2, 4)
    with pytest.raises(ValueError):
        resample_rational(sig, 1, 2)


def test_resample_rrc_in_band_preserved():
    fr = gen_symbol_frame(9, 4096)
    sig = shape_pulses_periodic(fr, 0.01, 4)
    half = resample_rational(sig, 1, 2)
    s4 = sp_fft.fft(sig.field, axis=-1)
    s2 = sp_fft.fft(half.field, axis=-1) * 2  # amplitude scaling m/n
    f4 = sp_fft.fftfreq(sig.n_samples, 1 / sig.sample_rate)
    f2 = sp_fft.fftfreq(half.n_samples, 1 / half.sample_rate)
    band = 1.01 * 12.5e9
    a = s4[:, np.abs(f4) <= band]
    b = s2[:, np.abs(f2) <= band]
    assert np.linalg.norm(a - b) / np.linalg.norm(a) < 1e-10


def test_lowpass_cases():
    n, fs = 64, 64.0
    t = np.arange(n) / fs
    tone = lambda f: np.exp(-2j * np.pi * f * t)
    sig = DualPolSignal(np.stack([tone(20), tone(20)]), fs)
    assert lowpass(sig, fs / 2) is sig
    np.testing.assert_allclose(lowpass(sig, 10).field, 0, atol=1e-14)
    two = DualPolSignal(np.stack([tone(5) + 0.5 * tone(20)] * 2), fs)
    out = lowpass(two, 10)
    np.testing.assert_allclose(out.field[0], tone(5), atol=1e-12)
    assert abs(out.power() / two.power() - 1 / 1.25) < 1e-12


def test_normalize_to_power(rng):
    sig = DualPolSignal(crandn(rng, 2, 100), 1.0)
    out = normalize_to_power(sig, 1e-3)
    assert abs(out.power() - 1e-3) <= 1e-15
    same = normalize_to_power(sig, sig.power())
    np.testing.assert_allclose(same.field, sig.field, rtol=1e-14)
    with pytest.raises(ValueError):
        normalize_to_power(DualPolSignal(np.zeros((2, 4)), 1.0), 1e-3)


def test_dbm_conversion():
    assert abs(dbm_to_watt(2.5) - 10 ** 0.25 * 1e-3) < 1e-18
    assert abs(dbm_to_watt(2.5) - 1.7783e-3) < 1e-7
    assert abs(watt_to_dbm(1e-3)) < 1e-12


# --- synchronization and SNR ------------------------------------------------------

def test_phase_offset_cases(rng):
    ref = crandn(rng, 50)
    out, th = phase_offset_correct(ref, ref)
    assert abs(th) < 1e-15
    np.testing.assert_allclose(out, ref, atol=1e-14)
    out, th = phase_offset_correct(np.exp(-1j * np.pi / 3) * ref, ref)
    assert abs(th - np.pi / 3) < 1e-12
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_phase_offset_beats_grid(rng):
    ref = crandn(rng, 500)
    rx = np.exp(-0.7j) * ref + 0.05 * crandn(rng, 500)
    out, _ = phase_offset_correct(rx, ref)
    best = np.sum(np.abs(out - ref) ** 2)
    for a in np.linspace(0, 2 * np.pi, 360, endpoint=False):
        assert best <= np.sum(np.abs(np.exp(1j * a) * rx - ref) ** 2) + 1e-12


def test_phase_offset_zero_inner_product(caplog):
    out, th = phase_offset_correct(np.array([1, 0]), np.array([0, 1]))
    assert th == 0
    assert "zero inner product" in caplog.text


def test_phase_offset_per_polarization(rng):
    ref = crandn(rng, 2, 40)
    rx = ref * np.exp(-1j * np.array([0.3, -1.1]))[:, None]
    out, th = phase_offset_correct(rx, ref)
    np.testing.assert_allclose(th, [0.3, -1.1], atol=1e-12)


def test_effective_snr_cases(rng):
    tx = gen_symbol_frame(4, 1000)
    assert effective_snr(tx.symbols, tx) == SNR_CAP_DB
    assert effective_snr(3 * np.exp(0.2j) * tx.symbols, tx) == SNR_CAP_DB


def test_effective_snr_monte_carlo():
    tx = gen_symbol_frame(11, 10 ** 5, "16QAM")
    r = np.random.default_rng(3)
    noise = math.sqrt(0.1 / 2) * crandn(r, 2, 10 ** 5)
    snr = effective_snr(tx.symbols + noise, tx)
    # the least-squares gain c = 1/(1 + var) leaves residual var/(1 + var),
    # so the estimator reads 1 + 1/var rather than 1/var
    assert abs(snr - 10 * math.log10(1 + 1 / 0.1)) < 0.1
    # the raw error power of the unscaled sequence gives 1/var
    raw = 10 * math.log10(np.sum(np.abs(tx.symbols) ** 2) / np.sum(np.abs(noise) ** 2))
    assert abs(raw - 10.0) < 0.1


@given(st.integers(0, 2 ** 32 - 1), st.floats(0.01, 100), st.floats(-np.pi, np.pi))
def test_effective_snr_scale_invariant(seed, mag, ang):
    r = np.random.default_rng(seed)
    tx = crandn(r, 2, 200)
    rx = tx + 0.3 * crandn(r, 2, 200)
    a = effective_snr(rx, tx)
    b = effective_snr(mag * np.exp(1j * ang) * rx, tx)
    assert abs(a - b) < 1e-9


def test_align_circular_cases(rng):
    tx = crandn(rng, 256)
    assert align_circular(tx, tx) == 0
    assert align_circular(np.roll(tx, 37), tx) == 37


def test_align_noisy_long():
    tx = gen_symbol_frame(21, 2 ** 16).symbols[0]
    r = np.random.default_rng(0)
    rx = np.roll(tx, 12345) + math.sqrt(0.1 / 2) * crandn(r, 2 ** 16)
    assert align_circular(rx, tx) == 12345


def test_align_tie_breaks_to_smallest_shift():
    tx = np.ones(16, dtype=complex)
    assert align_circular(tx, tx) == 0
