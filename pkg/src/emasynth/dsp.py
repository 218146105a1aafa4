"""Reference acoustic analyzer and synthesizer.

A self-contained source-filter vocoder used in place of an external one:
mel-cepstral spectral envelopes on an all-pass warped frequency axis,
autocorrelation F0 with a fixed voicing threshold, single-band
aperiodicity, and pulse+noise resynthesis with minimum-phase filters and
Hann overlap-add.  File formats (AFV1 and WORLD-style f64 arrays) are
defined here as well.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError, ParseError

SAMPLE_RATE = 16000.0
FRAME_PERIOD_MS = 5.0
HOP = 80                  # 5 ms at 16 kHz
WINDOW = 512              # 32 ms
FFT_SIZE = 1024
DEFAULT_ALPHA = 0.42
DEFAULT_MCEP_ORDER = 24
LIFTER_ORDER = 64
F0_MIN = 50.0
F0_MAX = 500.0
VOICING_THRESHOLD = 0.3
F0_WINDOW = 640           # 40 ms segment for autocorrelation

_LOG_POWER_FLOOR = 1e-20


@dataclass
class AcousticFeatures:
    """Per-frame acoustic description at a 5 ms frame period.

    mcep holds c0..cM (log-magnitude cosine-basis coefficients on the warped
    axis), f0 is in Hz with 0 marking unvoiced frames, bap is per-band
    aperiodicity in [0, 1] (1 = fully aperiodic).
    """

    mcep: np.ndarray
    f0: np.ndarray
    bap: np.ndarray
    frame_period_ms: float = FRAME_PERIOD_MS
    sample_rate: float = SAMPLE_RATE
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        self.mcep = np.asarray(self.mcep, dtype=float)
        self.f0 = np.asarray(self.f0, dtype=float)
        self.bap = np.asarray(self.bap, dtype=float)
        self.validate()

    def validate(self):
        T = self.mcep.shape[0]
        if self.mcep.ndim != 2:
            raise DomainError(f"mcep must be (T, M+1), got {self.mcep.shape}")
        if self.f0.shape != (T,):
            raise DomainError(f"f0 must have shape ({T},), got {self.f0.shape}")
        if self.bap.ndim != 2 or self.bap.shape[0] != T:
            raise DomainError(f"bap must be (T, B), got {self.bap.shape}")
        if not np.all(np.isfinite(self.mcep)):
            raise DomainError("mcep contains non-finite values")
        if np.any(self.f0 < 0):
            raise DomainError("f0 must be >= 0")
        voiced = self.f0 > 0
        if np.any((self.f0[voiced] < F0_MIN) | (self.f0[voiced] > F0_MAX)):
            raise DomainError(f"voiced f0 must lie in [{F0_MIN}, {F0_MAX}] Hz")
        if np.any((self.bap < 0) | (self.bap > 1)):
            raise DomainError("bap must lie in [0, 1]")

    @property
    def n_frames(self) -> int:
        return self.mcep.shape[0]

    @property
    def order(self) -> int:
        return self.mcep.shape[1] - 1


def warp_phase(omega: np.ndarray, alpha: float) -> np.ndarray:
    """All-pass warped phase beta_alpha(omega) on [0, pi].

    beta(0) = 0 and beta(pi) = pi for every |alpha| < 1.
    """
    if abs(alpha) >= 1.0:
        raise DomainError(f"|alpha| must be < 1, got {alpha}")
    omega = np.asarray(omega, dtype=float)
    return omega + 2.0 * np.arctan2(alpha * np.sin(omega), 1.0 - alpha * np.cos(omega))


def _cosine_basis(alpha: float, fft_size: int, order: int) -> np.ndarray:
    """(K, order+1) matrix: log S = basis @ c, K = fft_size/2 + 1 bins."""
    half = fft_size // 2
    omega = np.pi * np.arange(half + 1) / half
    beta = warp_phase(omega, alpha)
    m = np.arange(order + 1)
    basis = np.cos(np.outer(beta, m))
    basis[:, 1:] *= 2.0
    return basis


def mcep_to_spectrum(c: np.ndarray, alpha: float = DEFAULT_ALPHA,
                     fft_size: int = FFT_SIZE) -> np.ndarray:
    """Magnitude spectrum exp(c0 + 2 sum_m c_m cos(m beta(omega_k))).

    Accepts a single coefficient vector or a (T, M+1) matrix; returns
    fft_size/2 + 1 bins per frame.
    """
    c = np.asarray(c, dtype=float)
    single = c.ndim == 1
    C = c[None, :] if single else c
    basis = _cosine_basis(alpha, fft_size, C.shape[1] - 1)
    log_s = C @ basis.T
    S = np.exp(log_s)
    return S[0] if single else S


def spectrum_to_mcep(S: np.ndarray, alpha: float = DEFAULT_ALPHA,
                     order: int = DEFAULT_MCEP_ORDER) -> np.ndarray:
    """Least-squares fit of the warped cosine basis to log S over all bins.

    Exact (to solver precision) for any spectrum generated by
    mcep_to_spectrum; a projection for spectra outside the basis span.
    """
    S = np.asarray(S, dtype=float)
    if np.any(S <= 0):
        raise DomainError("spectrum bins must be strictly positive")
    single = S.ndim == 1
    M = S[None, :] if single else S
    n_bins = M.shape[1]
    if order + 1 > n_bins:
        raise DomainError(f"order {order} needs more bins than {n_bins}")
    fft_size = 2 * (n_bins - 1)
    basis = _cosine_basis(alpha, fft_size, order)
    c, *_ = np.linalg.lstsq(basis, np.log(M).T, rcond=None)
    c = c.T
    return c[0] if single else c


def _log_envelope_fit(log_s: np.ndarray, alpha: float, order: int) -> np.ndarray:
    """mcep fit to already-log spectra, (T, K) -> (T, order+1)."""
    n_bins = log_s.shape[1]
    basis = _cosine_basis(alpha, 2 * (n_bins - 1), order)
    c, *_ = np.linalg.lstsq(basis, log_s.T, rcond=None)
    return c.T


def _frame_signal(audio: np.ndarray, frame_len: int, n_frames: int) -> np.ndarray:
    """(T, frame_len) matrix of segments centered at t * HOP, zero-padded."""
    half = frame_len // 2
    padded = np.concatenate([np.zeros(half), audio, np.zeros(frame_len)])
    idx = np.arange(n_frames)[:, None] * HOP + np.arange(frame_len)[None, :]
    return padded[idx]


def _normalized_autocorr(frames: np.ndarray, max_lag: int) -> np.ndarray:
    """r(tau) for tau = 0..max_lag per frame, normalized per-lag.

    r(tau) = sum x_t x_{t+tau} / sqrt(sum_{t<L-tau} x_t^2 * sum_{t>=tau} x_t^2).
    """
    T, L = frames.shape
    nfft = 1
    while nfft < L + max_lag + 1:
        nfft *= 2
    spec = np.fft.rfft(frames, nfft, axis=1)
    raw = np.fft.irfft(spec * np.conj(spec), nfft, axis=1)[:, :max_lag + 1]
    csum = np.concatenate([np.zeros((T, 1)), np.cumsum(frames**2, axis=1)], axis=1)
    total = csum[:, L][:, None]
    lags = np.arange(max_lag + 1)
    head = np.take(csum, L - lags, axis=1)   # energy of frames[:, :L-tau]
    tail = total - np.take(csum, lags, axis=1)  # energy of frames[:, tau:]
    denom = np.sqrt(np.maximum(head * tail, 1e-30))
    return raw / denom


def analyze(audio: np.ndarray, alpha: float = DEFAULT_ALPHA,
            order: int = DEFAULT_MCEP_ORDER,
            voicing_threshold: float = VOICING_THRESHOLD) -> AcousticFeatures:
    """Extract mel-cepstra, F0 and band aperiodicity from 16 kHz mono audio.

    5 ms hop, 32 ms Hann analysis window, FFT size 1024.  F0 uses the peak
    of the per-lag normalized autocorrelation over 50-500 Hz with the given
    voicing threshold; the spectral envelope is a cepstrally smoothed
    (lifter order 64) log spectrum refit onto the warped cosine basis; bap
    is the noise-to-total energy ratio 1 - r^2 of the optimal-gain comb
    filter at the detected period (1 on unvoiced frames).
    """
    audio = np.asarray(audio, dtype=float).ravel()
    if audio.size < WINDOW:
        raise DomainError(
            f"audio too short: {audio.size} samples < one {WINDOW}-sample window"
        )
    n_frames = int(round(audio.size / HOP))
    window = np.hanning(WINDOW)

    frames = _frame_signal(audio, WINDOW, n_frames) * window
    spectra = np.fft.rfft(frames, FFT_SIZE, axis=1)
    log_power = np.log(np.maximum(np.abs(spectra)**2, _LOG_POWER_FLOOR))
    log_mag = 0.5 * log_power

    # cepstral smoothing: keep quefrencies up to the lifter order
    cepstra = np.fft.irfft(log_mag, FFT_SIZE, axis=1)
    liftered = np.zeros_like(cepstra)
    liftered[:, :LIFTER_ORDER + 1] = cepstra[:, :LIFTER_ORDER + 1]
    liftered[:, FFT_SIZE - LIFTER_ORDER:] = cepstra[:, FFT_SIZE - LIFTER_ORDER:]
    smooth_log = np.fft.rfft(liftered, FFT_SIZE, axis=1).real
    mcep = _log_envelope_fit(smooth_log, alpha, order)

    # F0 search on longer raw segments
    lag_min = int(np.floor(SAMPLE_RATE / F0_MAX))
    lag_max = int(np.ceil(SAMPLE_RATE / F0_MIN))
    f0_frames = _frame_signal(audio, F0_WINDOW, n_frames)
    r = _normalized_autocorr(f0_frames, lag_max)
    search = r[:, lag_min:lag_max + 1]
    peak_idx = np.argmax(search, axis=1)
    peak_val = search[np.arange(n_frames), peak_idx]
    lag = peak_idx + lag_min

    f0 = np.zeros(n_frames)
    bap = np.ones((n_frames, 1))
    voiced = peak_val > voicing_threshold
    octave_cost = 0.15  # per octave of lag; breaks sub-harmonic ties upward
    for t in np.nonzero(voiced)[0]:
        # sub-harmonic lags of a periodic signal correlate as well as the
        # true period, so candidate selection penalizes longer lags
        row = search[t]
        interior = (row[1:-1] >= row[:-2]) & (row[1:-1] >= row[2:])
        candidates = (np.nonzero(interior
                                 & (row[1:-1] > voicing_threshold))[0] + 1)
        if candidates.size:
            lags_c = candidates + lag_min
            scores = row[candidates] - octave_cost * np.log2(lags_c / lag_min)
            tau = float(lags_c[int(np.argmax(scores))])
        else:
            tau = float(lag[t])
        k = int(tau)
        if lag_min < k < lag_max:
            y0, y1, y2 = r[t, k - 1], r[t, k], r[t, k + 1]
            denom = y0 - 2.0 * y1 + y2
            if denom != 0:
                tau = k + 0.5 * (y0 - y2) / denom
        f0_t = SAMPLE_RATE / tau
        if F0_MIN <= f0_t <= F0_MAX:
            f0[t] = f0_t
            bap[t, 0] = float(np.clip(1.0 - peak_val[t]**2, 0.0, 1.0))
    return AcousticFeatures(mcep=mcep, f0=f0, bap=bap, alpha=alpha)


def _minimum_phase_response(S: np.ndarray) -> np.ndarray:
    """(T, K) magnitude spectra -> (T, K) complex minimum-phase responses.

    Real-cepstrum folding: the causal part of the log-spectrum cepstrum is
    doubled, giving a response whose magnitude equals S exactly.
    """
    log_s = np.log(np.maximum(S, _LOG_POWER_FLOOR))
    ceps = np.fft.irfft(log_s, FFT_SIZE, axis=1)
    folded = np.zeros_like(ceps)
    half = FFT_SIZE // 2
    folded[:, 0] = ceps[:, 0]
    folded[:, 1:half] = 2.0 * ceps[:, 1:half]
    folded[:, half] = ceps[:, half]
    return np.exp(np.fft.rfft(folded, FFT_SIZE, axis=1))


def synthesize(features: AcousticFeatures, noise_seed: int = 0) -> np.ndarray:
    """Render 16 kHz audio from acoustic features.

    Excitation per sample is (1-bap) * pulse train at f0 plus bap * white
    noise (pure noise on unvoiced frames), shaped per frame by the
    minimum-phase filter of the mel-cepstral envelope and Hann overlap-add
    at the 5 ms hop.  Deterministic for a fixed noise_seed.
    """
    T = features.n_frames
    n_out = T * HOP
    if T == 0:
        return np.zeros(0)

    f0_s = np.repeat(features.f0, HOP)[:n_out]
    bap_mean = features.bap.mean(axis=1)
    bap_s = np.repeat(bap_mean, HOP)[:n_out]

    rng = np.random.default_rng(noise_seed)
    noise = rng.standard_normal(n_out)

    # pulse positions from accumulated phase; fractional crossings are split
    # over two samples so non-integer periods stay exactly periodic
    pulses = np.zeros(n_out + 1)
    phase = 1.0  # fire a pulse at the first voiced sample
    for i in range(n_out):
        if f0_s[i] <= 0:
            continue
        step = f0_s[i] / SAMPLE_RATE
        prev = phase
        phase += step
        if phase >= 1.0:
            phase -= 1.0
            cross = i - 1.0 + (1.0 - prev) / step if prev < 1.0 else float(i)
            cross = min(max(cross, 0.0), float(n_out - 1))
            base = int(cross)
            frac = cross - base
            amp = np.sqrt(SAMPLE_RATE / f0_s[i])
            pulses[base] += amp * (1.0 - frac)
            pulses[base + 1] += amp * frac
    pulses = pulses[:n_out]
    voiced_s = f0_s > 0
    excitation = np.where(
        voiced_s, (1.0 - bap_s) * pulses + bap_s * noise, noise
    )

    S = mcep_to_spectrum(features.mcep, features.alpha, FFT_SIZE)
    H = _minimum_phase_response(S)

    window = np.hanning(WINDOW)
    half = WINDOW // 2
    padded = np.concatenate([np.zeros(half), excitation, np.zeros(FFT_SIZE)])
    idx = np.arange(T)[:, None] * HOP + np.arange(WINDOW)[None, :]
    segments = padded[idx] * window
    filtered = np.fft.irfft(np.fft.rfft(segments, FFT_SIZE, axis=1) * H,
                            FFT_SIZE, axis=1)

    out = np.zeros(n_out + FFT_SIZE + half)
    wsum = np.zeros_like(out)
    for t in range(T):
        start = t * HOP
        out[start:start + FFT_SIZE] += filtered[t]
        wsum[start:start + WINDOW] += window
    out = out[half:half + n_out]
    wsum = wsum[half:half + n_out]
    return out / np.maximum(wsum, 1e-8)


# ---------------------------------------------------------------------------
# Feature file format "AFV1"
# ---------------------------------------------------------------------------

_AFV1_MAGIC = b"AFV1"
_AFV1_HEADER = struct.Struct("<4sIIIddd")


def write_features(path, features: AcousticFeatures) -> None:
    """Write an AFV1 feature file (little-endian, f32 payload)."""
    T = features.n_frames
    n_mcep = features.mcep.shape[1]
    B = features.bap.shape[1]
    header = _AFV1_HEADER.pack(
        _AFV1_MAGIC, T, n_mcep, B,
        features.frame_period_ms, features.sample_rate, features.alpha,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(features.mcep, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(features.f0, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(features.bap, dtype="<f4").tobytes())


def read_features(path) -> AcousticFeatures:
    """Read an AFV1 feature file; inverse of write_features."""
    raw = Path(path).read_bytes()
    if len(raw) < _AFV1_HEADER.size or raw[:4] != _AFV1_MAGIC:
        raise ParseError("not an AFV1 feature file", source=path)
    magic, T, n_mcep, B, period, rate, alpha = _AFV1_HEADER.unpack_from(raw)
    offset = _AFV1_HEADER.size
    expected = offset + 4 * (T * n_mcep + T + T * B)
    if len(raw) != expected:
        raise ParseError(
            f"AFV1 payload size mismatch: {len(raw)} bytes, expected {expected}",
            source=path,
        )
    mcep = np.frombuffer(raw, dtype="<f4", count=T * n_mcep, offset=offset)
    offset += 4 * T * n_mcep
    f0 = np.frombuffer(raw, dtype="<f4", count=T, offset=offset)
    offset += 4 * T
    bap = np.frombuffer(raw, dtype="<f4", count=T * B, offset=offset)
    return AcousticFeatures(
        mcep=mcep.reshape(T, n_mcep).astype(float),
        f0=f0.astype(float),
        bap=bap.reshape(T, B).astype(float),
        frame_period_ms=period, sample_rate=rate, alpha=alpha,
    )


# ---------------------------------------------------------------------------
# WORLD-style plain f64 arrays (interoperability export/import)
# ---------------------------------------------------------------------------

def export_world(features: AcousticFeatures, out_dir, prefix: str,
                 fft_size: int = FFT_SIZE) -> dict:
    """Write WORLD-compatible f64 arrays: f0, power spectrogram, aperiodicity.

    Files are headerless little-endian f64, row-major (T x (fft_size/2+1)
    for sp/ap).  Returns the written paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    K = fft_size // 2 + 1
    S = mcep_to_spectrum(features.mcep, features.alpha, fft_size)
    sp = S**2
    B = features.bap.shape[1]
    edges = np.linspace(0, K, B + 1).astype(int)
    ap = np.empty((features.n_frames, K))
    for b in range(B):
        ap[:, edges[b]:edges[b + 1]] = features.bap[:, b:b + 1]
    paths = {
        "f0": out_dir / f"{prefix}.f0.f64",
        "sp": out_dir / f"{prefix}.sp.f64",
        "ap": out_dir / f"{prefix}.ap.f64",
    }
    paths["f0"].write_bytes(np.ascontiguousarray(features.f0, "<f8").tobytes())
    paths["sp"].write_bytes(np.ascontiguousarray(sp, "<f8").tobytes())
    paths["ap"].write_bytes(np.ascontiguousarray(ap, "<f8").tobytes())
    return paths


def import_world(f0_path, sp_path, ap_path, fft_size: int = FFT_SIZE,
                 alpha: float = DEFAULT_ALPHA, order: int = DEFAULT_MCEP_ORDER,
                 n_bands: int = 1) -> AcousticFeatures:
    """Read WORLD-style f64 arrays back into AcousticFeatures."""
    f0 = np.frombuffer(Path(f0_path).read_bytes(), dtype="<f8").astype(float)
    K = fft_size // 2 + 1
    sp = np.frombuffer(Path(sp_path).read_bytes(), dtype="<f8").reshape(-1, K)
    ap = np.frombuffer(Path(ap_path).read_bytes(), dtype="<f8").reshape(-1, K)
    if not (len(f0) == len(sp) == len(ap)):
        raise ParseError("WORLD arrays disagree on frame count")
    mcep = spectrum_to_mcep(np.sqrt(np.maximum(sp, _LOG_POWER_FLOOR)), alpha, order)
    edges = np.linspace(0, K, n_bands + 1).astype(int)
    bap = np.column_stack([
        np.clip(ap[:, edges[b]:edges[b + 1]].mean(axis=1), 0.0, 1.0)
        for b in range(n_bands)
    ])
    return AcousticFeatures(mcep=mcep, f0=f0, bap=bap, alpha=alpha)


# ---------------------------------------------------------------------------
# WAV writing (reading lives in ingest.load_audio)
# ---------------------------------------------------------------------------

def write_wav(path, samples: np.ndarray, sample_rate: int = int(SAMPLE_RATE)) -> None:
    """Write mono 16-bit PCM; samples are clipped to [-1, 1]."""
    samples = np.clip(np.asarray(samples, dtype=float), -1.0, 1.0)
    pcm = np.round(samples * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())
