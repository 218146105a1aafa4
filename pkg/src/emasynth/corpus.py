"""Corpus data model, train/test partitioning, and a synthetic stand-in.

The stimulus inventory mirrors the recorded corpus: 226 utterances per
speaker across seven text categories plus 25 custom carrier-phrase
sentences (5 target words x 5 repetitions).  Two partitions are supported:

* synthesis: story items 70-79 held out (216 train / 10 test);
* manipulation: custom items with target words biet/boet/shock held out
  (211 train / 15 test), so baat and sok remain in training.

The synthetic generator emits, per utterance, a smooth articulatory
trajectory at 400 Hz (TSV), paired acoustic features from a fixed
nonlinear map of that trajectory (AFV1), rendered audio, and a speech
annotation, all byte-deterministic for a given seed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import dsp
from .errors import ConfigError, ParseError, PartitionError
from .ingest import (
    ArticulatoryRecording,
    MOVEMENT_SENSOR_IDS,
    REFERENCE_SENSOR_IDS,
    Sensor,
    _role_for,
    write_ema_tsv,
)
from .textgrid import AnnotationTier, Interval, serialize_textgrid

CATEGORY_WABLIEFT = "Wablieft"
CATEGORY_PAPA_EN_MARLOES = "PapaEnMarloes"
CATEGORY_MAN_UIT_FINLAND = "ManUitFinland"
CATEGORY_NOORDENWIND = "Noordenwind"
CATEGORY_ELS_GAAT_NAAR_MARKT = "ElsGaatNaarMarkt"
CATEGORY_MENEER_VAN_DAM = "MeneerVanDam"
CATEGORY_JORINDE_EN_JORINGEL = "JorindeEnJoringel"
CATEGORY_CUSTOM = "Custom"

# utterances per category for one complete speaker
CATEGORY_COUNTS = {
    CATEGORY_WABLIEFT: 76,
    CATEGORY_PAPA_EN_MARLOES: 8,
    CATEGORY_MAN_UIT_FINLAND: 14,
    CATEGORY_NOORDENWIND: 8,
    CATEGORY_ELS_GAAT_NAAR_MARKT: 10,
    CATEGORY_MENEER_VAN_DAM: 6,
    CATEGORY_JORINDE_EN_JORINGEL: 79,
    CATEGORY_CUSTOM: 25,
}
UTTERANCES_PER_SPEAKER = sum(CATEGORY_COUNTS.values())  # 226

VOWEL_WORDS = ("baat", "biet", "boet")
CONSONANT_WORDS = ("sok", "shock")
TARGET_WORDS = VOWEL_WORDS + CONSONANT_WORDS
REPETITIONS = 5
CARRIER_PHRASE = "Hij heeft tamme {word} gezegd."

STORY_TEST_INDICES = range(70, 80)          # synthesis held-out story items
MANIPULATION_TEST_WORDS = ("biet", "boet", "shock")

SETUP_SYNTHESIS = "synthesis"
SETUP_MANIPULATION = "manipulation"
SETUPS = (SETUP_SYNTHESIS, SETUP_MANIPULATION)

CONDITION_HEALTHY = "healthy"
CONDITION_ORAL_CANCER = "oral_cancer"

_CATEGORY_SLUGS = {
    CATEGORY_WABLIEFT: "wablieft",
    CATEGORY_PAPA_EN_MARLOES: "papa",
    CATEGORY_MAN_UIT_FINLAND: "finland",
    CATEGORY_NOORDENWIND: "noordenwind",
    CATEGORY_ELS_GAAT_NAAR_MARKT: "els",
    CATEGORY_MENEER_VAN_DAM: "vandam",
    CATEGORY_JORINDE_EN_JORINGEL: "story",
    CATEGORY_CUSTOM: "custom",
}


@dataclass
class UtteranceRecord:
    id: str
    speaker: str
    text: str
    category: str
    target_word: str | None = None
    repetition: int | None = None
    story_index: int | None = None
    ema_path: str = ""
    audio_path: str = ""
    annotation_path: str = ""
    feature_path: str = ""

    def validate(self):
        if self.category not in CATEGORY_COUNTS:
            raise ParseError(f"unknown category {self.category!r} in {self.id}")
        if self.category == CATEGORY_CUSTOM:
            if self.target_word not in TARGET_WORDS:
                raise ParseError(f"custom utterance {self.id} needs a target word")
            if self.repetition is None or not 1 <= self.repetition <= REPETITIONS:
                raise ParseError(f"custom utterance {self.id} needs repetition 1..5")
        else:
            if self.target_word is not None or self.repetition is not None:
                raise ParseError(
                    f"non-custom utterance {self.id} must not carry a target word"
                )
        if self.category == CATEGORY_JORINDE_EN_JORINGEL:
            if self.story_index is None or not 1 <= self.story_index <= 79:
                raise ParseError(f"story utterance {self.id} needs index 1..79")
        elif self.story_index is not None:
            raise ParseError(f"utterance {self.id} must not carry a story index")
        return self


@dataclass(frozen=True)
class SpeakerInfo:
    id: str
    condition: str
    gender: str

    def validate(self):
        if self.condition not in (CONDITION_HEALTHY, CONDITION_ORAL_CANCER):
            raise ParseError(f"unknown condition {self.condition!r}")
        return self


@dataclass
class CorpusManifest:
    speakers: list
    utterances: list

    def validate(self):
        for s in self.speakers:
            s.validate()
        ids = set()
        speaker_ids = {s.id for s in self.speakers}
        for u in self.utterances:
            u.validate()
            if u.id in ids:
                raise ParseError(f"duplicate utterance id {u.id}")
            if u.speaker not in speaker_ids:
                raise ParseError(f"utterance {u.id} references unknown speaker")
            ids.add(u.id)
        return self

    def utterances_for(self, speaker_id: str) -> list:
        return [u for u in self.utterances if u.speaker == speaker_id]

    def speaker(self, speaker_id: str) -> SpeakerInfo:
        for s in self.speakers:
            if s.id == speaker_id:
                return s
        raise KeyError(speaker_id)

    def to_dict(self) -> dict:
        return {
            "speakers": [asdict(s) for s in self.speakers],
            "utterances": [asdict(u) for u in self.utterances],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusManifest":
        speakers = [SpeakerInfo(**s) for s in d["speakers"]]
        utterances = [UtteranceRecord(**u) for u in d["utterances"]]
        return cls(speakers=speakers, utterances=utterances).validate()


def save_manifest(manifest: CorpusManifest, path) -> None:
    text = json.dumps(manifest.to_dict(), indent=2, sort_keys=True)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_manifest(path) -> CorpusManifest:
    return CorpusManifest.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class PartitionSpec:
    setup: str
    train_ids: tuple
    test_ids: tuple


def _check_complete(manifest: CorpusManifest) -> None:
    for speaker in manifest.speakers:
        counts = {cat: 0 for cat in CATEGORY_COUNTS}
        for u in manifest.utterances_for(speaker.id):
            counts[u.category] += 1
        for cat, expected in CATEGORY_COUNTS.items():
            if counts[cat] != expected:
                raise PartitionError(
                    f"speaker {speaker.id}: category {cat} has {counts[cat]} "
                    f"utterances, expected {expected}; partition infeasible"
                )


def build_partition(manifest: CorpusManifest, setup: str) -> PartitionSpec:
    """Split a complete manifest into the requested train/test setup.

    synthesis: story items 70-79 test, everything else (including all 25
    custom items) trains.  manipulation: custom biet/boet/shock test, all
    other utterances (including custom baat/sok) train.
    """
    if setup not in SETUPS:
        raise PartitionError(f"unknown setup {setup!r}; expected one of {SETUPS}")
    manifest.validate()
    _check_complete(manifest)

    def is_test(u: UtteranceRecord) -> bool:
        if setup == SETUP_SYNTHESIS:
            return (u.category == CATEGORY_JORINDE_EN_JORINGEL
                    and u.story_index in STORY_TEST_INDICES)
        return (u.category == CATEGORY_CUSTOM
                and u.target_word in MANIPULATION_TEST_WORDS)

    train, test = [], []
    for u in manifest.utterances:
        (test if is_test(u) else train).append(u.id)
    return PartitionSpec(setup=setup, train_ids=tuple(train), test_ids=tuple(test))


# ---------------------------------------------------------------------------
# Synthetic corpus generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthCorpusConfig:
    n_speakers: int = 1
    n_healthy: int = 1
    movement_sensors: int = 3
    segments_range: tuple = (3, 10)
    segment_duration_range_s: tuple = (0.1, 0.4)
    noise_scale: float = 0.01
    mcep_order: int = dsp.DEFAULT_MCEP_ORDER
    alpha: float = dsp.DEFAULT_ALPHA
    write_audio: bool = True

    def validate(self):
        if self.n_speakers < 1:
            raise ConfigError("need at least one speaker")
        if not 0 <= self.n_healthy <= self.n_speakers:
            raise ConfigError("n_healthy must lie in [0, n_speakers]")
        if not 1 <= self.movement_sensors <= len(MOVEMENT_SENSOR_IDS):
            raise ConfigError(
                f"movement_sensors must be 1..{len(MOVEMENT_SENSOR_IDS)}"
            )
        lo, hi = self.segments_range
        if not (1 <= lo <= hi):
            raise ConfigError("segments_range must satisfy 1 <= lo <= hi")
        dlo, dhi = self.segment_duration_range_s
        if not (0.05 <= dlo <= dhi):
            raise ConfigError("segment durations must be >= 50 ms and ordered")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be >= 0")
        return self


# reference sensors sit still in the head frame; articulators move around
# these per-sensor rest positions (mm)
_REFERENCE_POSITIONS = {
    "mastoid_left": (-62.0, 0.0, 0.0),
    "mastoid_right": (62.0, 0.0, 0.0),
    "upper_incisor": (0.0, 72.0, -18.0),
    "nasal_bridge": (0.0, 78.0, 42.0),
}
_MOVEMENT_REST_POSITIONS = {
    "tongue_tip": (0.0, 58.0, -6.0),
    "tongue_body": (0.0, 44.0, -9.0),
    "upper_lip": (0.0, 84.0, -2.0),
    "lower_lip": (0.0, 82.0, -12.0),
    "jaw": (0.0, 74.0, -30.0),
}

# fixed parameters of the trajectory-to-mcep map (independent of corpus seed)
_MAP_SEED = 715517
_MAP_INPUT_SCALE_MM = 6.0
_MAP_C0_BASE = -2.0


def _map_mixing_matrix(n_channels: int, order: int) -> np.ndarray:
    rng = np.random.default_rng(_MAP_SEED)
    B = rng.standard_normal((order + 1, n_channels)) / np.sqrt(n_channels)
    scale = 0.5 / (1.0 + 0.3 * np.arange(order + 1))
    return B * scale[:, None]


def _rest_vector(n_sensors: int) -> np.ndarray:
    rest = [_MOVEMENT_REST_POSITIONS[sid] for sid in MOVEMENT_SENSOR_IDS[:n_sensors]]
    return np.asarray(rest, dtype=float).reshape(-1)


def acoustic_map(movement_200: np.ndarray, config: SynthCorpusConfig) -> np.ndarray:
    """The fixed nonlinear trajectory-to-mcep map.

    Per frame: standardize each channel against its rest position, apply the
    per-channel polynomial z + 0.3 z^2 - 0.15 z^3, mix channels with a fixed
    matrix whose rows decay with cepstral index, and add the base c0.
    Deterministic and independent of the corpus seed, so stored features can
    be recomputed exactly from stored trajectories.
    """
    X = np.asarray(movement_200, dtype=float)
    rest = _rest_vector(config.movement_sensors)
    z = (X - rest) / _MAP_INPUT_SCALE_MM
    phi = z + 0.3 * z**2 - 0.15 * z**3
    B = _map_mixing_matrix(X.shape[1], config.mcep_order)
    mcep = phi @ B.T
    mcep[:, 0] += _MAP_C0_BASE
    return mcep


def _utterance_plan():
    """The per-speaker stimulus list mirroring the category table."""
    plan = []
    for cat, count in CATEGORY_COUNTS.items():
        if cat == CATEGORY_CUSTOM:
            for word in TARGET_WORDS:
                for rep in range(1, REPETITIONS + 1):
                    plan.append((cat, word, rep, None))
        elif cat == CATEGORY_JORINDE_EN_JORINGEL:
            for idx in range(1, count + 1):
                plan.append((cat, None, None, idx))
        else:
            for idx in range(1, count + 1):
                plan.append((cat, None, None, None))
    assert len(plan) == UTTERANCES_PER_SPEAKER
    return plan


def _word_offset(word: str, n_channels: int) -> np.ndarray:
    digest = hashlib.blake2s(word.encode(), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    return rng.uniform(-8.0, 8.0, n_channels)


def _cosine_interpolate(centers: np.ndarray, values: np.ndarray,
                        t: np.ndarray) -> np.ndarray:
    """Piecewise raised-cosine interpolation through (centers, values)."""
    seg = np.clip(np.searchsorted(centers, t, side="right") - 1, 0,
                  len(centers) - 2)
    left = centers[seg]
    right = centers[seg + 1]
    s = np.clip((t - left) / np.maximum(right - left, 1e-9), 0.0, 1.0)
    w = 0.5 - 0.5 * np.cos(np.pi * s)
    out = values[seg] * (1.0 - w[:, None]) + values[seg + 1] * w[:, None]
    out[t <= centers[0]] = values[0]
    out[t >= centers[-1]] = values[-1]
    return out


def _synthesize_trajectory(rng: np.random.Generator, config: SynthCorpusConfig,
                           target_word: str | None):
    """Random smooth movement trajectory at 400 Hz, (n400, n_channels) mm."""
    n_channels = 3 * config.movement_sensors
    lo, hi = config.segments_range
    n_seg = int(rng.integers(lo, hi + 1))
    durations = rng.uniform(*config.segment_duration_range_s, n_seg)
    total = float(durations.sum())
    T200 = max(2, int(round(total * 200.0)))
    n400 = 2 * T200
    t = np.arange(n400) / 400.0
    duration = n400 / 400.0

    boundaries = np.concatenate([[0.0], np.cumsum(durations)])
    boundaries *= duration / boundaries[-1]
    centers = 0.5 * (boundaries[:-1] + boundaries[1:])

    rest = _rest_vector(config.movement_sensors)
    targets = rest[None, :] + rng.normal(0.0, 6.0, (n_seg, n_channels))
    if target_word is not None:
        mid = slice(n_seg // 3, max(n_seg // 3 + 1, 2 * n_seg // 3))
        targets[mid] += _word_offset(target_word, n_channels)

    traj = _cosine_interpolate(centers, targets, t)
    freqs = rng.uniform(1.5, 4.0, n_channels)
    phases = rng.uniform(0.0, 2.0 * np.pi, n_channels)
    traj += 0.8 * np.sin(2.0 * np.pi * freqs[None, :] * t[:, None] + phases)
    return traj, duration


def _speech_margin(duration: float) -> float:
    return min(0.05, duration / 4.0)


def _utterance_features(rng: np.random.Generator, config: SynthCorpusConfig,
                        movement_400: np.ndarray, duration: float) -> dsp.AcousticFeatures:
    movement_200 = movement_400[::2]
    T = movement_200.shape[0]
    mcep = acoustic_map(movement_200, config)
    if config.noise_scale > 0:
        mcep = mcep + config.noise_scale * rng.standard_normal(mcep.shape)

    times = np.arange(T) / 200.0
    base_f0 = float(rng.uniform(105.0, 150.0))
    f0 = base_f0 + 12.0 * np.sin(2.0 * np.pi * 0.7 * times + rng.uniform(0, 2 * np.pi))
    margin = _speech_margin(duration)
    voiced = (times >= margin) & (times <= duration - margin)
    f0 = np.where(voiced, f0, 0.0)
    bap = np.where(voiced, 0.08 + 0.04 * np.square(np.sin(np.pi * times)), 1.0)

    return dsp.AcousticFeatures(
        mcep=np.asarray(mcep, dtype="<f4").astype(float),
        f0=np.asarray(f0, dtype="<f4").astype(float),
        bap=np.asarray(bap, dtype="<f4").astype(float)[:, None],
        alpha=config.alpha,
    )


def _stable_int(*parts) -> int:
    digest = hashlib.blake2s("|".join(str(p) for p in parts).encode(),
                             digest_size=6).digest()
    return int.from_bytes(digest, "little")


def generate_synthetic_corpus(out_dir, config: SynthCorpusConfig | None = None,
                              seed: int = 0) -> CorpusManifest:
    """Generate a complete synthetic corpus under out_dir.

    Per utterance: a 400 Hz movement trajectory riding on a static-reference
    rig (TSV), acoustic features from the fixed map (+ observation noise) as
    AFV1, a speech TextGrid, and rendered audio.  Fully deterministic for a
    given (config, seed): rerunning produces byte-identical files.
    """
    config = (config or SynthCorpusConfig()).validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    sensor_ids = list(REFERENCE_SENSOR_IDS) + list(
        MOVEMENT_SENSOR_IDS[:config.movement_sensors]
    )
    sensors = [Sensor(sid, _role_for(sid)) for sid in sensor_ids]
    ref_block = np.asarray([_REFERENCE_POSITIONS[sid]
                            for sid in REFERENCE_SENSOR_IDS], dtype=float)

    speakers = []
    utterances = []
    plan = _utterance_plan()
    for s_idx in range(config.n_speakers):
        speaker_id = f"spk{s_idx + 1:02d}"
        condition = (CONDITION_HEALTHY if s_idx < config.n_healthy
                     else CONDITION_ORAL_CANCER)
        gender = "female" if s_idx % 2 == 0 else "male"
        speakers.append(SpeakerInfo(speaker_id, condition, gender))

        for dirname in ("ema", "features", "audio", "annot"):
            (out_dir / speaker_id / dirname).mkdir(parents=True, exist_ok=True)

        cat_counters: dict = {}
        for u_idx, (cat, word, rep, story_idx) in enumerate(plan):
            rng = np.random.default_rng([seed, s_idx, u_idx])
            slug = _CATEGORY_SLUGS[cat]
            if cat == CATEGORY_CUSTOM:
                utt_id = f"{speaker_id}-custom-{word}-r{rep}"
                text = CARRIER_PHRASE.format(word=word)
            else:
                cat_counters[cat] = cat_counters.get(cat, 0) + 1
                number = story_idx if story_idx is not None else cat_counters[cat]
                utt_id = f"{speaker_id}-{slug}-{number:03d}"
                text = f"[{slug} sentence {number}]"

            movement, duration = _synthesize_trajectory(rng, config, word)
            movement = np.round(movement, 6)  # match TSV precision exactly
            n400 = movement.shape[0]
            refs = np.broadcast_to(ref_block, (n400, len(ref_block), 3))
            positions = np.concatenate(
                [refs, movement.reshape(n400, config.movement_sensors, 3)], axis=1
            )
            recording = ArticulatoryRecording(
                sample_rate=400.0, sensors=sensors, positions=positions,
                channel_mask=np.ones(len(sensors), dtype=bool),
            )
            features = _utterance_features(rng, config, movement, duration)

            rel = {
                "ema_path": f"{speaker_id}/ema/{utt_id}.tsv",
                "feature_path": f"{speaker_id}/features/{utt_id}.afv",
                "audio_path": f"{speaker_id}/audio/{utt_id}.wav",
                "annotation_path": f"{speaker_id}/annot/{utt_id}.TextGrid",
            }
            write_ema_tsv(out_dir / rel["ema_path"], recording)
            dsp.write_features(out_dir / rel["feature_path"], features)
            margin = _speech_margin(duration)
            tier = AnnotationTier("speech", [
                Interval(0.0, margin, ""),
                Interval(margin, duration - margin, "speech"),
                Interval(duration - margin, duration, ""),
            ])
            (out_dir / rel["annotation_path"]).write_text(
                serialize_textgrid([tier], xmin=0.0, xmax=duration),
                encoding="utf-8",
            )
            if config.write_audio:
                audio = dsp.synthesize(features,
                                       noise_seed=_stable_int(seed, utt_id))
                peak = np.abs(audio).max()
                if peak > 0:
                    audio = 0.7 * audio / peak
                dsp.write_wav(out_dir / rel["audio_path"], audio)
            else:
                rel["audio_path"] = ""

            utterances.append(UtteranceRecord(
                id=utt_id, speaker=speaker_id, text=text, category=cat,
                target_word=word, repetition=rep, story_index=story_idx,
                **rel,
            ))

    manifest = CorpusManifest(speakers=speakers, utterances=utterances).validate()
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
