"""Listening-test service.

Administers the three perceptual experiments: naturalness rating (MOS,
1-5), vowel identification (baat/biet/boet) and consonant identification
(sok/shock).  Builds seeded per-listener schedules over a stimulus
registry, serves audio, and persists one response per (session, stimulus)
to an append-only JSONL log that fully reconstructs service state on
restart.

Listeners only ever see opaque stimulus ids; condition and speaker stay on
the server and are joined back in at export time.
"""

import hashlib
import json
import os
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .corpus import (
    CATEGORY_CUSTOM,
    CATEGORY_JORINDE_EN_JORINGEL,
    CONSONANT_WORDS,
    CorpusManifest,
    STORY_TEST_INDICES,
    VOWEL_WORDS,
)
from .errors import ConfigError, IntegrityError

TASK_MOS = "mos"
TASK_VOWEL = "vowel_id"
TASK_CONSONANT = "consonant_id"
TASKS = (TASK_MOS, TASK_VOWEL, TASK_CONSONANT)

CONDITION_GROUND_TRUTH = "ground_truth"
CONDITION_RESYNTHESIS = "resynthesis"
CONDITION_PREDICTED = "predicted"
MOS_CONDITIONS = (CONDITION_GROUND_TRUTH, CONDITION_RESYNTHESIS,
                  CONDITION_PREDICTED)
ID_CONDITIONS = (CONDITION_GROUND_TRUTH, CONDITION_PREDICTED)

MOS_SENTENCES_PER_LISTENER = 5
ID_REPETITIONS_PER_CELL = 2


@dataclass(frozen=True)
class Stimulus:
    stimulus_id: str
    utterance_id: str
    speaker: str
    speaker_group: str
    condition: str
    audio_path: str
    word: str | None = None
    sentence_key: str | None = None


def _opaque_id(utterance_id: str, condition: str) -> str:
    digest = hashlib.blake2s(f"{utterance_id}|{condition}".encode(),
                             digest_size=8).hexdigest()
    return f"st{digest}"


class StimulusRegistry:
    def __init__(self, stimuli: list):
        self.by_id = {}
        for s in stimuli:
            if s.stimulus_id in self.by_id:
                raise ConfigError(f"duplicate stimulus id {s.stimulus_id}")
            self.by_id[s.stimulus_id] = s

    def __iter__(self):
        return iter(self.by_id.values())

    def get(self, stimulus_id: str) -> Stimulus:
        if stimulus_id not in self.by_id:
            raise KeyError(stimulus_id)
        return self.by_id[stimulus_id]

    def speakers(self) -> list:
        return sorted({s.speaker for s in self})

    def save(self, path) -> None:
        payload = {"stimuli": [asdict(s) for s in self]}
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path) -> "StimulusRegistry":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls([Stimulus(**s) for s in payload["stimuli"]])


def build_registry(corpus_root, manifest: CorpusManifest,
                   synthesis_audio: dict | None = None,
                   manipulation_audio: dict | None = None) -> StimulusRegistry:
    """Assemble the stimulus registry from corpus + run audio.

    synthesis_audio maps condition -> {utterance_id: wav path} for the MOS
    experiment (resynthesis/predicted); manipulation_audio maps
    {utterance_id: wav path} of predicted custom sentences for the
    identification experiments.  Ground-truth audio comes from the corpus.
    """
    corpus_root = Path(corpus_root)
    groups = {s.id: s.condition for s in manifest.speakers}
    stimuli = []
    synthesis_audio = synthesis_audio or {}
    manipulation_audio = manipulation_audio or {}
    for u in manifest.utterances:
        if (u.category == CATEGORY_JORINDE_EN_JORINGEL
                and u.story_index in STORY_TEST_INDICES):
            sentence_key = f"{u.story_index:03d}"
            paths = {CONDITION_GROUND_TRUTH: str(corpus_root / u.audio_path)}
            for cond in (CONDITION_RESYNTHESIS, CONDITION_PREDICTED):
                path = synthesis_audio.get(cond, {}).get(u.id)
                if path is not None:
                    paths[cond] = str(path)
            for cond, path in paths.items():
                stimuli.append(Stimulus(
                    stimulus_id=_opaque_id(u.id, cond), utterance_id=u.id,
                    speaker=u.speaker, speaker_group=groups[u.speaker],
                    condition=cond, audio_path=path, sentence_key=sentence_key,
                ))
        elif u.category == CATEGORY_CUSTOM:
            paths = {CONDITION_GROUND_TRUTH: str(corpus_root / u.audio_path)}
            predicted = manipulation_audio.get(u.id)
            if predicted is not None:
                paths[CONDITION_PREDICTED] = str(predicted)
            for cond, path in paths.items():
                stimuli.append(Stimulus(
                    stimulus_id=_opaque_id(u.id, cond), utterance_id=u.id,
                    speaker=u.speaker, speaker_group=groups[u.speaker],
                    condition=cond, audio_path=path, word=u.target_word,
                ))
    return StimulusRegistry(stimuli)


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------

class GridError(ConfigError):
    """The registry cannot fill the task grid; carries the gap list."""

    def __init__(self, task, gaps):
        super().__init__(f"incomplete grid for {task}: missing {gaps[:8]}"
                         + ("..." if len(gaps) > 8 else ""))
        self.gaps = gaps


def _session_id(listener_id: str, task: str, seed: int) -> str:
    digest = hashlib.blake2s(f"{listener_id}|{task}|{seed}".encode(),
                             digest_size=8).hexdigest()
    return f"sess-{digest}"


def build_schedule(registry: StimulusRegistry, listener_id: str, task: str,
                   seed: int) -> dict:
    """Draw one seeded session schedule for a listener.

    mos: 5 sentences sampled per listener x 3 conditions x all speakers;
    vowel_id: 3 words x 2 conditions x 2 repetitions x all speakers;
    consonant_id: same with 2 words.  The item order is a seeded uniform
    shuffle; items carry only opaque stimulus ids.
    """
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}")
    if not listener_id:
        raise ConfigError("listener_id must be non-empty")
    rng = np.random.default_rng([seed, int.from_bytes(
        hashlib.blake2s(f"{listener_id}|{task}".encode(), digest_size=6).digest(),
        "little")])
    speakers = registry.speakers()
    items = []
    gaps = []

    if task == TASK_MOS:
        pool = {}
        for s in registry:
            if s.sentence_key is not None:
                pool.setdefault(s.sentence_key, {})[(s.speaker, s.condition)] = s
        keys = sorted(pool)
        complete = [k for k in keys
                    if all((spk, cond) in pool[k]
                           for spk in speakers for cond in MOS_CONDITIONS)]
        if len(complete) < MOS_SENTENCES_PER_LISTENER:
            for k in keys:
                for spk in speakers:
                    for cond in MOS_CONDITIONS:
                        if (spk, cond) not in pool[k]:
                            gaps.append(f"sentence {k}: {spk}/{cond}")
            raise GridError(task, gaps or ["no sentences in registry"])
        chosen = rng.choice(len(complete), MOS_SENTENCES_PER_LISTENER,
                            replace=False)
        for ci in sorted(chosen.tolist()):
            key = complete[ci]
            for spk in speakers:
                for cond in MOS_CONDITIONS:
                    items.append(pool[key][(spk, cond)].stimulus_id)
    else:
        words = VOWEL_WORDS if task == TASK_VOWEL else CONSONANT_WORDS
        pool = {}
        for s in registry:
            if s.word in words:
                pool.setdefault((s.word, s.condition, s.speaker), []).append(s)
        for word in words:
            for cond in ID_CONDITIONS:
                for spk in speakers:
                    cell = sorted(pool.get((word, cond, spk), []),
                                  key=lambda s: s.utterance_id)
                    if len(cell) < ID_REPETITIONS_PER_CELL:
                        gaps.append(f"{word}/{cond}/{spk}")
                        continue
                    picked = rng.choice(len(cell), ID_REPETITIONS_PER_CELL,
                                        replace=False)
                    for pi in sorted(picked.tolist()):
                        items.append(cell[pi].stimulus_id)
        if gaps:
            raise GridError(task, gaps)

    order = rng.permutation(len(items))
    shuffled = [items[i] for i in order]
    return {
        "session_id": _session_id(listener_id, task, seed),
        "listener_id": listener_id,
        "task": task,
        "seed": seed,
        "items": shuffled,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }


# ---------------------------------------------------------------------------
# Durable response store
# ---------------------------------------------------------------------------

class ResponseStore:
    """Append-only JSONL log plus derived in-memory state.

    Every accepted record is written and fsynced before the caller sees an
    ack; replaying the log reconstructs sessions and responses exactly.
    """

    def __init__(self, log_path, registry: StimulusRegistry):
        self.log_path = Path(log_path)
        self.registry = registry
        self.sessions: dict = {}
        self.responses: dict = {}
        self._lock = threading.Lock()
        if self.log_path.exists():
            self._replay()

    def _replay(self) -> None:
        with open(self.log_path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                if record["type"] == "session":
                    self.sessions[record["session_id"]] = record
                elif record["type"] == "response":
                    key = (record["session_id"], record["stimulus_id"])
                    self.responses[key] = record

    def _append(self, record: dict) -> None:
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def create_session(self, listener_id: str, task: str, seed: int) -> dict:
        with self._lock:
            session_id = _session_id(listener_id, task, seed)
            if session_id in self.sessions:
                return self.sessions[session_id]
            schedule = build_schedule(self.registry, listener_id, task, seed)
            record = {"type": "session", **schedule}
            self._append(record)
            self.sessions[session_id] = record
            return record

    def get_session(self, session_id: str) -> dict:
        if session_id not in self.sessions:
            raise KeyError(session_id)
        return self.sessions[session_id]

    def answered(self, session_id: str) -> list:
        session = self.get_session(session_id)
        return [sid for sid in session["items"]
                if (session_id, sid) in self.responses]

    def _validate_answer(self, task: str, answer: dict) -> None:
        if not isinstance(answer, dict) or not answer:
            raise ValueError("answer must be a non-empty object")
        keys = set(answer)
        if task == TASK_MOS:
            if keys != {"mos"}:
                raise ValueError("MOS answers carry exactly the 'mos' field")
            if not isinstance(answer["mos"], int) or not 1 <= answer["mos"] <= 5:
                raise ValueError("MOS value must be an integer in 1..5")
        else:
            vocab = VOWEL_WORDS if task == TASK_VOWEL else CONSONANT_WORDS
            if keys == {"choice"}:
                if answer["choice"] not in vocab:
                    raise ValueError(f"choice must be one of {vocab}")
            elif keys == {"free_text"}:
                if not isinstance(answer["free_text"], str) or not answer["free_text"].strip():
                    raise ValueError("free_text must be a non-empty string")
            else:
                raise ValueError("answer carries either 'choice' or 'free_text'")

    def record_response(self, session_id: str, stimulus_id: str, answer: dict,
                        elapsed_ms: int = 0, replay_count: int = 0) -> dict:
        """Durably record one judgment.  Returns {'duplicate': bool}.

        Identical resubmission acks idempotently; a different answer for an
        already-answered stimulus is a conflict.
        """
        with self._lock:
            session = self.get_session(session_id)
            if stimulus_id not in session["items"]:
                raise KeyError(stimulus_id)
            self._validate_answer(session["task"], answer)
            key = (session_id, stimulus_id)
            if key in self.responses:
                prior = self.responses[key]
                if prior["answer"] == answer:
                    return {"duplicate": True}
                raise IntegrityError(
                    f"stimulus {stimulus_id} already has a different answer"
                )
            record = {
                "type": "response",
                "session_id": session_id,
                "stimulus_id": stimulus_id,
                "task": session["task"],
                "answer": answer,
                "elapsed_ms": int(elapsed_ms),
                "replay_count": int(replay_count),
                "received_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            }
            self._append(record)
            self.responses[key] = record
            return {"duplicate": False}

    def export(self, task: str | None = None) -> list:
        """Responses joined with stimulus metadata, for eval/stats."""
        out = []
        for (session_id, stimulus_id), record in sorted(self.responses.items()):
            if task is not None and record["task"] != task:
                continue
            stim = self.registry.get(stimulus_id)
            out.append({
                **{k: v for k, v in record.items() if k != "type"},
                "listener_id": self.sessions[session_id]["listener_id"],
                "utterance_id": stim.utterance_id,
                "speaker": stim.speaker,
                "speaker_group": stim.speaker_group,
                "condition": stim.condition,
                "presented_word": stim.word,
            })
        return out


def answer_text(record: dict) -> str:
    """The listener's wording for identification records."""
    answer = record["answer"]
    return answer.get("choice") or answer.get("free_text") or ""


# ---------------------------------------------------------------------------
# HTTP API
# ---------------------------------------------------------------------------

def create_app(store: ResponseStore, static_dir=None):
    from fastapi import FastAPI, HTTPException
    from fastapi.responses import FileResponse, JSONResponse, StreamingResponse
    from pydantic import BaseModel, Field

    class SessionRequest(BaseModel):
        listener_id: str = Field(min_length=1)
        task: str
        seed: int = 0

    class ResponseRequest(BaseModel):
        session_id: str
        stimulus_id: str
        answer: dict
        elapsed_ms: int = 0
        replay_count: int = 0

    app = FastAPI(title="emasynth listening service")

    def session_view(session: dict) -> dict:
        return {
            "session_id": session["session_id"],
            "task": session["task"],
            "total": len(session["items"]),
            "items": [{"index": i, "stimulus_id": sid}
                      for i, sid in enumerate(session["items"])],
            "answered": store.answered(session["session_id"]),
        }

    @app.get("/api/health")
    def health():
        return {"ok": True}

    @app.post("/api/session")
    def create_session(req: SessionRequest):
        try:
            session = store.create_session(req.listener_id, req.task, req.seed)
        except ConfigError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return session_view(session)

    @app.get("/api/session/{session_id}")
    def get_session(session_id: str):
        try:
            session = store.get_session(session_id)
        except KeyError:
            raise HTTPException(status_code=404, detail="unknown session")
        return session_view(session)

    @app.get("/api/stimulus/{stimulus_id}")
    def get_stimulus(stimulus_id: str):
        try:
            stim = store.registry.get(stimulus_id)
        except KeyError:
            raise HTTPException(status_code=404, detail="unknown stimulus")
        return FileResponse(stim.audio_path, media_type="audio/wav")

    @app.post("/api/response")
    def post_response(req: ResponseRequest):
        try:
            ack = store.record_response(req.session_id, req.stimulus_id,
                                        req.answer, req.elapsed_ms,
                                        req.replay_count)
        except KeyError as exc:
            raise HTTPException(status_code=404, detail=f"unknown id {exc}")
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        except IntegrityError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        return {"ok": True, **ack}

    @app.get("/api/export")
    def export(task: str | None = None):
        records = store.export(task)

        def stream():
            for record in records:
                yield json.dumps(record, sort_keys=True) + "\n"

        return StreamingResponse(stream(), media_type="application/x-ndjson")

    if static_dir is not None:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(static_dir), html=True),
                  name="ui")
    else:
        @app.get("/")
        def root():
            return JSONResponse({"service": "emasynth listening service",
                                 "ui": "not bundled"})
    return app
