"""Raw-recording ingestion.

Parses EMA TSV exports and PCM WAV audio, removes head motion with a
per-frame rigid (Kabsch) alignment against a median reference template,
resamples both modalities, and aligns articulatory frames with acoustic
frames.
"""

from __future__ import annotations

import math
import wave
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .dsp import AcousticFeatures
from .errors import (
    AlignmentError,
    FormatError,
    HeadCorrectionError,
    ParseError,
    RateError,
)
from .textgrid import AnnotationTier

ROLE_REFERENCE = "reference"
ROLE_MOVEMENT = "movement"

# Sensor placement: references on both mastoids, the upper incisor and the
# nasal bridge; movement sensors on tongue, lips and jaw.  Unknown ids are
# treated as movement sensors.
REFERENCE_SENSOR_IDS = ("mastoid_left", "mastoid_right", "upper_incisor",
                        "nasal_bridge")
MOVEMENT_SENSOR_IDS = ("tongue_tip", "tongue_body", "upper_lip", "lower_lip",
                       "jaw")

EMA_RAW_RATE = 400.0
EMA_MODEL_RATE = 200.0
AUDIO_RATE = 16000
RESAMPLE_TAPS = 65
EMA_LOWPASS_HZ = 90.0
AUDIO_CUTOFF_FRACTION = 0.45
COLLINEARITY_RTOL = 1e-9


@dataclass(frozen=True)
class Sensor:
    id: str
    role: str


@dataclass
class ArticulatoryRecording:
    """Time-indexed 3-D sensor positions in mm.

    positions has shape (frames, sensors, 3); absent sensors are masked out
    in channel_mask and carry NaN positions.
    """

    sample_rate: float
    sensors: list
    positions: np.ndarray
    channel_mask: np.ndarray

    def validate(self):
        if self.sample_rate not in (EMA_RAW_RATE, EMA_MODEL_RATE):
            raise RateError(f"sample rate must be 400 or 200 Hz, got {self.sample_rate}")
        if self.positions.ndim != 3 or self.positions.shape[1] != len(self.sensors):
            raise ParseError(f"positions shape {self.positions.shape} does not "
                             f"match {len(self.sensors)} sensors")
        present = self.positions[:, self.channel_mask, :]
        if not np.all(np.isfinite(present)):
            raise ParseError("present sensors contain non-finite positions")
        return self

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]

    def sensor_index(self, sensor_id: str) -> int:
        for i, s in enumerate(self.sensors):
            if s.id == sensor_id:
                return i
        raise KeyError(sensor_id)

    def movement_matrix(self) -> np.ndarray:
        """(T, 3 * n_present_movement) matrix of present movement channels."""
        cols = [i for i, s in enumerate(self.sensors)
                if s.role == ROLE_MOVEMENT and self.channel_mask[i]]
        return self.positions[:, cols, :].reshape(self.n_frames, -1)


def _role_for(sensor_id: str) -> str:
    return ROLE_REFERENCE if sensor_id in REFERENCE_SENSOR_IDS else ROLE_MOVEMENT


# ---------------------------------------------------------------------------
# EMA TSV
# ---------------------------------------------------------------------------

def parse_ema_tsv(path) -> ArticulatoryRecording:
    """Parse the canonical EMA TSV export.

    Column 1 is time_s, then three columns <id>_x, <id>_y, <id>_z per
    sensor, in mm.  A sensor whose columns are all NaN is masked absent;
    per-frame dropouts on an otherwise present sensor are a parse error.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty file", source=path)
    header = lines[0].split("\t")
    if header[0] != "time_s":
        raise ParseError(f"first column must be time_s, got {header[0]!r}",
                         source=path, line=1)
    coord_cols = header[1:]
    if len(coord_cols) % 3 != 0:
        raise ParseError("sensor columns must come in _x/_y/_z triples",
                         source=path, line=1)
    sensor_ids = []
    for i in range(0, len(coord_cols), 3):
        triple = coord_cols[i:i + 3]
        base = triple[0][:-2]
        if [f"{base}_x", f"{base}_y", f"{base}_z"] != triple:
            raise ParseError(f"malformed sensor triple {triple}", source=path, line=1)
        sensor_ids.append(base)

    n_cols = 1 + 3 * len(sensor_ids)
    times = np.empty(len(lines) - 1)
    data = np.empty((len(lines) - 1, 3 * len(sensor_ids)))
    for row, line in enumerate(lines[1:], start=2):
        cells = line.split("\t")
        if len(cells) != n_cols:
            raise ParseError(
                f"expected {n_cols} cells, found {len(cells)}", source=path, line=row
            )
        try:
            values = [float(c) for c in cells]
        except ValueError:
            bad = next(c for c in cells if not _is_float(c))
            raise ParseError(f"non-numeric cell {bad!r}", source=path, line=row)
        if math.isnan(values[0]):
            raise ParseError("time cell is NaN", source=path, line=row)
        times[row - 2] = values[0]
        data[row - 2] = values[1:]

    if times.size < 2:
        raise ParseError("need at least 2 rows to infer the sample rate", source=path)
    diffs = np.diff(times)
    if np.any(diffs <= 0):
        bad = int(np.argmax(diffs <= 0))
        raise ParseError("time column is not strictly increasing",
                         source=path, line=bad + 3)
    rate = 1.0 / float(np.median(diffs))
    rate = float(round(rate))

    T = times.size
    S = len(sensor_ids)
    positions = data.reshape(T, S, 3)
    mask = np.ones(S, dtype=bool)
    for s in range(S):
        nan_frames = np.isnan(positions[:, s, :]).any(axis=1)
        if nan_frames.all():
            mask[s] = False
        elif nan_frames.any():
            raise ParseError(
                f"sensor {sensor_ids[s]!r} has NaN cells but is not fully absent",
                source=path, line=int(np.argmax(nan_frames)) + 2,
            )
    sensors = [Sensor(sid, _role_for(sid)) for sid in sensor_ids]
    return ArticulatoryRecording(sample_rate=rate, sensors=sensors,
                                 positions=positions, channel_mask=mask).validate()


def _is_float(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False


def write_ema_tsv(path, recording: ArticulatoryRecording) -> None:
    """Write the canonical TSV format (inverse of parse_ema_tsv)."""
    header = ["time_s"]
    for s in recording.sensors:
        header += [f"{s.id}_x", f"{s.id}_y", f"{s.id}_z"]
    T = recording.n_frames
    times = np.arange(T) / recording.sample_rate
    flat = recording.positions.reshape(T, -1)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(header) + "\n")
        for t in range(T):
            cells = [f"{times[t]:.6f}"] + [_format_mm(v) for v in flat[t]]
            fh.write("\t".join(cells) + "\n")


def _format_mm(value: float) -> str:
    return "NaN" if math.isnan(value) else f"{value:.6f}"


# ---------------------------------------------------------------------------
# Head-motion correction
# ---------------------------------------------------------------------------

def _kabsch(P: np.ndarray, Q: np.ndarray):
    """Rigid transform (R, t) minimizing ||R P + t - Q||^2 over rows."""
    p_bar = P.mean(axis=0)
    q_bar = Q.mean(axis=0)
    H = (P - p_bar).T @ (Q - q_bar)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = q_bar - R @ p_bar
    return R, t


def head_correct(recording: ArticulatoryRecording,
                 reference_ids: list | None = None) -> ArticulatoryRecording:
    """Remove rigid head motion frame by frame.

    The template is the per-sensor median position of the reference sensors
    over time; each frame's rigid transform mapping its reference positions
    onto the template (orthogonal Procrustes / Kabsch) is applied to every
    sensor.  Requires at least three non-collinear present reference
    sensors.
    """
    if reference_ids is None:
        ref_idx = [i for i, s in enumerate(recording.sensors)
                   if s.role == ROLE_REFERENCE and recording.channel_mask[i]]
    else:
        ref_idx = [recording.sensor_index(rid) for rid in reference_ids]
        if not all(recording.channel_mask[i] for i in ref_idx):
            raise HeadCorrectionError("a requested reference sensor is absent")
    if len(ref_idx) < 3:
        raise HeadCorrectionError(
            f"need >= 3 reference sensors, have {len(ref_idx)}"
        )

    refs = recording.positions[:, ref_idx, :]
    template = np.median(refs, axis=0)
    centered = template - template.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    if svals[1] < COLLINEARITY_RTOL * svals[0]:
        raise HeadCorrectionError("reference sensors are (nearly) collinear")

    out = np.empty_like(recording.positions)
    for t in range(recording.n_frames):
        R, trans = _kabsch(refs[t], template)
        out[t] = recording.positions[t] @ R.T + trans
    return replace(recording, positions=out)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def _windowed_sinc_kernel(cutoff_norm: float, taps: int = RESAMPLE_TAPS) -> np.ndarray:
    """Hann-windowed sinc FIR, cutoff as a fraction of the sample rate.

    Normalized to unit sum so DC passes exactly.
    """
    n = np.arange(taps) - (taps - 1) / 2.0
    kernel = 2.0 * cutoff_norm * np.sinc(2.0 * cutoff_norm * n)
    kernel *= np.hanning(taps)
    return kernel / kernel.sum()


def resample_ema(recording: ArticulatoryRecording) -> ArticulatoryRecording:
    """400 Hz -> 200 Hz: zero-phase 90 Hz low-pass, then decimate by 2."""
    if recording.sample_rate != EMA_RAW_RATE:
        raise RateError(
            f"resample_ema expects 400 Hz input, got {recording.sample_rate}"
        )
    kernel = _windowed_sinc_kernel(EMA_LOWPASS_HZ / EMA_RAW_RATE)
    half = len(kernel) // 2
    T = recording.n_frames
    flat = recording.positions.reshape(T, -1)
    padded = np.pad(flat, ((half, half), (0, 0)), mode="edge")
    smoothed = np.empty_like(flat)
    for c in range(flat.shape[1]):
        smoothed[:, c] = np.convolve(padded[:, c], kernel, mode="valid")
    decimated = smoothed[::2]
    return replace(
        recording,
        sample_rate=EMA_MODEL_RATE,
        positions=decimated.reshape(-1, len(recording.sensors), 3),
    )


def _resample_sinc(x: np.ndarray, rate_in: float, rate_out: float) -> np.ndarray:
    """Windowed-sinc rate conversion with edge replication.

    Cutoff is 0.45 x the lower of the two rates; per-output-sample weight
    normalization keeps DC exact.
    """
    n_out = int(round(len(x) * rate_out / rate_in))
    t = np.arange(n_out) * (rate_in / rate_out)
    half = (RESAMPLE_TAPS - 1) // 2
    base = np.floor(t).astype(int)
    offsets = np.arange(-half, half + 1)
    idx = base[:, None] + offsets[None, :]
    u = t[:, None] - idx
    cutoff = AUDIO_CUTOFF_FRACTION * min(rate_in, rate_out) / rate_in
    weights = 2.0 * cutoff * np.sinc(2.0 * cutoff * u)
    win_pos = (u + half) / (2 * half)  # in [0, 1] across the kernel support
    weights *= np.where(
        (win_pos >= 0) & (win_pos <= 1),
        0.5 - 0.5 * np.cos(2.0 * np.pi * np.clip(win_pos, 0, 1)),
        0.0,
    )
    weights /= weights.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, len(x) - 1)
    return np.sum(x[idx] * weights, axis=1)


def load_audio(path) -> np.ndarray:
    """Load PCM WAV as mono float64 at 16 kHz, range [-1, 1].

    Accepts 16- and 24-bit PCM, 1-2 channels, any rate >= 16 kHz; channels
    are averaged and the signal resampled with a windowed-sinc low-pass.
    """
    try:
        with wave.open(str(path), "rb") as fh:
            n_channels = fh.getnchannels()
            sampwidth = fh.getsampwidth()
            rate = fh.getframerate()
            comptype = fh.getcomptype()
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"unsupported WAV file {path}: {exc}") from exc
    if comptype != "NONE":
        raise FormatError(f"compressed WAV not supported: {path}")
    if sampwidth == 2:
        samples = np.frombuffer(raw, dtype="<i2").astype(float) / 32768.0
    elif sampwidth == 3:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3)
        ints = (b[:, 0].astype(np.int32)
                | (b[:, 1].astype(np.int32) << 8)
                | (b[:, 2].astype(np.int32) << 16))
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
        samples = ints.astype(float) / float(1 << 23)
    else:
        raise FormatError(f"only 16/24-bit PCM supported, got {8 * sampwidth}-bit")
    if n_channels not in (1, 2):
        raise FormatError(f"expected 1-2 channels, got {n_channels}")
    if rate < AUDIO_RATE:
        raise FormatError(f"sample rate must be >= 16 kHz, got {rate}")
    samples = samples.reshape(-1, n_channels).mean(axis=1)
    if rate == AUDIO_RATE:
        return samples
    return _resample_sinc(samples, rate, AUDIO_RATE)


# ---------------------------------------------------------------------------
# Frame alignment
# ---------------------------------------------------------------------------

def speech_frame_bounds(speech_tier: AnnotationTier | None, n_frames: int):
    """Frame range [lo, hi) covering the outermost "speech" intervals."""
    if speech_tier is None:
        return 0, n_frames
    speech = speech_tier.labelled("speech")
    if not speech:
        return 0, n_frames
    start = min(iv.start for iv in speech)
    end = max(iv.end for iv in speech)
    lo = max(0, int(np.ceil(start * EMA_MODEL_RATE - 1e-9)))
    hi = min(n_frames, int(np.ceil(end * EMA_MODEL_RATE - 1e-9)))
    if hi <= lo:
        raise AlignmentError("speech region leaves no frames")
    return lo, hi


def align_frames(
    ema: ArticulatoryRecording,
    acoustic: AcousticFeatures,
    speech_tier: AnnotationTier | None = None,
    trim: bool = True,
    strict: bool = False,
):
    """Pair 200 Hz articulatory frames with 5 ms acoustic frames.

    Both streams are truncated to the shorter length; with trim set, frames
    outside the outermost "speech" intervals are dropped from both.  A
    pre-truncation length mismatch above 10% warns, or raises under strict.
    """
    if ema.sample_rate != EMA_MODEL_RATE:
        raise RateError(f"EMA stream must be at 200 Hz, got {ema.sample_rate}")
    if acoustic.frame_period_ms != 5.0:
        raise RateError(
            f"acoustic frame period must be 5 ms, got {acoustic.frame_period_ms}"
        )
    T_e, T_a = ema.n_frames, acoustic.n_frames
    mismatch = abs(T_e - T_a) / max(T_e, T_a, 1)
    if mismatch > 0.10:
        message = f"frame-count mismatch {T_e} vs {T_a} exceeds 10%"
        if strict:
            raise AlignmentError(message)
        warnings.warn(message, stacklevel=2)
    T = min(T_e, T_a)
    lo, hi = 0, T
    if trim and speech_tier is not None:
        lo, hi = speech_frame_bounds(speech_tier, T)
    ema_out = replace(ema, positions=ema.positions[lo:hi])
    acoustic_out = AcousticFeatures(
        mcep=acoustic.mcep[lo:hi],
        f0=acoustic.f0[lo:hi],
        bap=acoustic.bap[lo:hi],
        frame_period_ms=acoustic.frame_period_ms,
        sample_rate=acoustic.sample_rate,
        alpha=acoustic.alpha,
    )
    return ema_out, acoustic_out
