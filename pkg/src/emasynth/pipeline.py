"""Pipeline stages behind the CLI.

Each stage reads the resolved run config, validates its upstream artifacts
by fingerprint, does its work, and writes its own fingerprint.  All
artifacts are deterministic for a fixed (config, seed): rerunning any
stage reproduces its outputs byte for byte.
"""

import hashlib
import json
import shutil
from pathlib import Path

import numpy as np

from . import dsp
from .config import RunConfig
from .corpus import (
    CATEGORY_CUSTOM,
    CorpusManifest,
    build_partition,
    load_manifest,
)
from .errors import DependencyError, EmasynthError
from .evaluate import (
    McdResult,
    confusion,
    format_scope,
    mcd,
    read_mcd_csv,
    report as render_report,
    write_confusion_csv,
    write_mcd_csv,
    write_stats_csv,
)
from .features import augment, fit_normalizer, Normalizer, stack_deltas
from .ingest import (
    head_correct,
    parse_ema_tsv,
    resample_ema,
    speech_frame_bounds,
)
from .model import (
    Checkpoint,
    LstmParams,
    LstmSpec,
    data_fingerprint,
    forward,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .stats import fishers_exact, paired_t, wilcoxon_signed_rank
from .errors import DegenerateDataError
from .service import answer_text, build_registry
from .corpus import CONSONANT_WORDS, VOWEL_WORDS
from .textgrid import parse_textgrid
from .trajopt import mlpg

CLEAN_VARIANT = "clean"


def sigma_tag(sigma: float) -> str:
    return f"sig{sigma:g}"


def variant_list(config: RunConfig) -> list:
    return [CLEAN_VARIANT] + [sigma_tag(s) for s in config.sigmas]


def checkpoint_name(speaker: str, aug_seed: int, variant: str) -> str:
    return f"{speaker}__s{aug_seed}__{variant}.ckpt"


# ---------------------------------------------------------------------------
# Fingerprints
# ---------------------------------------------------------------------------

def _fingerprint_path(run_dir: Path, stage: str) -> Path:
    return Path(run_dir) / stage / "fingerprint.json"


def write_fingerprint(config: RunConfig, stage: str, payload: dict | None = None):
    path = _fingerprint_path(Path(config.run_dir), stage)
    path.parent.mkdir(parents=True, exist_ok=True)
    record = {"stage": stage, "config_sha256": config.content_hash()}
    if payload:
        record.update(payload)
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def require_fingerprint(config: RunConfig, stage: str) -> dict:
    path = _fingerprint_path(Path(config.run_dir), stage)
    if not path.exists():
        raise DependencyError(
            f"stage requires upstream '{stage}' but fingerprint {path} is missing; "
            f"run `emasynth {stage}` first"
        )
    record = json.loads(path.read_text(encoding="utf-8"))
    if record.get("config_sha256") != config.content_hash():
        raise DependencyError(
            f"upstream '{stage}' fingerprint {path} was produced by a different "
            f"config (hash {record.get('config_sha256', '?')[:12]} != "
            f"{config.content_hash()[:12]}); re-run it"
        )
    return record


def write_resolved_config(config: RunConfig) -> None:
    config.save(Path(config.run_dir) / "config.json")


def _speakers_in_scope(config: RunConfig, manifest: CorpusManifest) -> list:
    if config.speakers:
        return list(config.speakers)
    return [s.id for s in manifest.speakers]


def _manifest(config: RunConfig) -> CorpusManifest:
    return load_manifest(Path(config.corpus_root) / "manifest.json")


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------

def stage_ingest(config: RunConfig) -> dict:
    """Parse, head-correct, resample and align every utterance in scope.

    Stores per-utterance npz bundles (articulatory matrix, target features,
    speech-frame bounds) under run_dir/features/ingested/.
    """
    config.validate()
    write_resolved_config(config)
    manifest = _manifest(config)
    corpus_root = Path(config.corpus_root)
    out_dir = Path(config.run_dir) / "features" / "ingested"
    out_dir.mkdir(parents=True, exist_ok=True)

    speakers = _speakers_in_scope(config, manifest)
    entries = []
    for u in manifest.utterances:
        if u.speaker not in speakers:
            continue
        recording = parse_ema_tsv(corpus_root / u.ema_path)
        recording = head_correct(recording)
        recording = resample_ema(recording)
        feats = dsp.read_features(corpus_root / u.feature_path)
        tiers = parse_textgrid(corpus_root / u.annotation_path)
        speech_tier = next((t for t in tiers if t.labelled("speech")), None)

        x = recording.movement_matrix()
        T = min(len(x), feats.n_frames)
        mismatch = abs(len(x) - feats.n_frames) / max(len(x), feats.n_frames, 1)
        if mismatch > 0.10 and config.strict_alignment:
            raise EmasynthError(
                f"{u.id}: articulatory/acoustic length mismatch above 10%"
            )
        lo, hi = speech_frame_bounds(speech_tier, T)
        np.savez(
            out_dir / f"{u.id}.npz",
            x=x[:T],
            mcep=feats.mcep[:T],
            f0=feats.f0[:T],
            bap=feats.bap[:T],
            speech=np.array([lo, hi], dtype=np.int64),
        )
        entries.append({"id": u.id, "speaker": u.speaker, "frames": int(T),
                        "speech_lo": int(lo), "speech_hi": int(hi),
                        "articulatory_dims": int(x.shape[1])})

    summary = {"utterances": entries, "n": len(entries)}
    (Path(config.run_dir) / "features" / "ingest_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    write_fingerprint(config, "ingest", {"n_utterances": len(entries)})
    return summary


def load_ingested(config: RunConfig, utterance_id: str) -> dict:
    path = Path(config.run_dir) / "features" / "ingested" / f"{utterance_id}.npz"
    if not path.exists():
        raise DependencyError(f"missing ingested features for {utterance_id}")
    with np.load(path) as data:
        return {k: data[k].copy() for k in data.files}


def _trimmed(config: RunConfig, bundle: dict, force_trim: bool | None = None):
    trim = config.trim_silence if force_trim is None else force_trim
    if trim:
        lo, hi = bundle["speech"]
        sl = slice(int(lo), int(hi))
    else:
        sl = slice(None)
    return bundle["x"][sl], bundle["mcep"][sl]


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _training_sets(config: RunConfig, manifest: CorpusManifest, speaker: str):
    partition = build_partition(manifest, config.setup)
    speaker_ids = {u.id for u in manifest.utterances_for(speaker)}
    train_ids = [uid for uid in partition.train_ids if uid in speaker_ids]
    test_ids = [uid for uid in partition.test_ids if uid in speaker_ids]
    return train_ids, test_ids


def stage_train(config: RunConfig) -> list:
    """Train one checkpoint per (speaker, augmentation seed, sigma variant).

    The clean variant trains on the speaker's training partition; each sigma
    variant adds one augmented copy of every training utterance.  The
    validation split is drawn from clean utterances only.
    """
    config.validate()
    require_fingerprint(config, "ingest")
    manifest = _manifest(config)
    windows = config.windows()
    ckpt_dir = Path(config.run_dir) / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    written = []
    for speaker in _speakers_in_scope(config, manifest):
        train_ids, _ = _training_sets(config, manifest, speaker)
        bundles = {uid: load_ingested(config, uid) for uid in train_ids}
        clean_raw = {}
        for uid in train_ids:
            x, y = _trimmed(config, bundles[uid])
            clean_raw[uid] = (x, y)

        for aug_seed in config.aug_seeds:
            hyper = config.hyper(aug_seed)
            rng = np.random.default_rng(aug_seed)
            order = rng.permutation(len(train_ids))
            n_val = min(len(train_ids) - 1,
                        max(1, int(round(config.val_fraction * len(train_ids)))))
            val_ids = [train_ids[i] for i in order[:n_val]]
            fit_ids = [train_ids[i] for i in order[n_val:]]

            for variant in variant_list(config):
                sigma = None
                if variant != CLEAN_VARIANT:
                    sigma = float(variant[3:])
                seqs = []
                for uid in fit_ids:
                    x, y = clean_raw[uid]
                    seqs.append((uid, stack_deltas(x, windows),
                                 stack_deltas(y, windows)))
                    if sigma is not None:
                        x_aug = augment(x, sigma, aug_seed, uid)
                        seqs.append((f"{uid}#aug", stack_deltas(x_aug, windows),
                                     stack_deltas(y, windows)))
                val = [(uid, stack_deltas(clean_raw[uid][0], windows),
                        stack_deltas(clean_raw[uid][1], windows))
                       for uid in val_ids]

                in_norm = fit_normalizer([s[1] for s in seqs])
                out_norm = fit_normalizer([s[2] for s in seqs])
                variances = np.concatenate(
                    [s[2] for s in seqs if not s[0].endswith("#aug")]
                ).var(axis=0)
                variances = np.maximum(variances, 1e-8)

                norm_seqs = [(sid, in_norm.apply(X), out_norm.apply(Y))
                             for sid, X, Y in seqs]
                norm_val = [(sid, in_norm.apply(X), out_norm.apply(Y))
                            for sid, X, Y in val]

                spec = LstmSpec(
                    input_dim=norm_seqs[0][1].shape[1],
                    output_dim=norm_seqs[0][2].shape[1],
                    hidden=config.hidden, layers=config.layers,
                )
                extras = {
                    "speaker": speaker,
                    "setup": config.setup,
                    "variant": variant,
                    "sigma": sigma,
                    "aug_seed": aug_seed,
                    "input_normalizer": in_norm.to_dict(),
                    "target_normalizer": out_norm.to_dict(),
                    "mlpg_variances": variances.tolist(),
                    "data_fingerprint": data_fingerprint(norm_seqs),
                    "trim_silence": config.trim_silence,
                }
                ckpt = train(norm_seqs, hyper, spec, extras=extras,
                             val_seqs=norm_val)
                path = ckpt_dir / checkpoint_name(speaker, aug_seed, variant)
                save_checkpoint(path, ckpt)
                written.append(str(path))

    write_fingerprint(config, "train", {"n_checkpoints": len(written)})
    return written


# ---------------------------------------------------------------------------
# prediction helpers
# ---------------------------------------------------------------------------

def predict_mcep(config: RunConfig, ckpt: Checkpoint, x_raw: np.ndarray) -> np.ndarray:
    """forward -> denormalize -> MLPG, on raw articulatory input."""
    windows = config.windows()
    in_norm = Normalizer.from_dict(ckpt.extras["input_normalizer"])
    out_norm = Normalizer.from_dict(ckpt.extras["target_normalizer"])
    X = in_norm.apply(stack_deltas(x_raw, windows))
    pred = forward(ckpt.params(), X)
    means = out_norm.invert(pred)
    variances = np.asarray(ckpt.extras["mlpg_variances"], dtype=float)
    return mlpg(means, variances, windows)


def _select_checkpoint(config: RunConfig, speaker: str, variant: str,
                       aug_seed: int) -> Checkpoint:
    path = (Path(config.run_dir) / "checkpoints"
            / checkpoint_name(speaker, aug_seed, variant))
    if not path.exists():
        raise DependencyError(f"missing checkpoint {path}")
    return load_checkpoint(path)


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def _synth_target_ids(config: RunConfig, manifest: CorpusManifest,
                      speaker: str) -> list:
    _, test_ids = _training_sets(config, manifest, speaker)
    ids = list(test_ids)
    if config.setup == "manipulation":
        # complete the identification grids: predicted audio for the custom
        # items that stayed in training (baat, sok)
        by_id = {u.id: u for u in manifest.utterances_for(speaker)}
        train_ids, _ = _training_sets(config, manifest, speaker)
        ids += [uid for uid in train_ids
                if by_id[uid].category == CATEGORY_CUSTOM]
    return ids


def _stable_noise_seed(*parts) -> int:
    digest = hashlib.blake2s("|".join(str(p) for p in parts).encode(),
                             digest_size=6).digest()
    return int.from_bytes(digest, "little")


def stage_synth(config: RunConfig, variant: str = CLEAN_VARIANT,
                aug_seed: int | None = None) -> dict:
    """Render predicted / resynthesis / ground-truth audio for the test set.

    predicted: network output smoothed by MLPG, combined with ground-truth
    F0 and aperiodicity (copy synthesis).  resynthesis: ground-truth MCEP
    through the same vocoder (the naturalness upper bound).  ground_truth:
    the corpus audio (copied), or rendered from ground-truth features when
    the corpus ships none.
    """
    config.validate()
    require_fingerprint(config, "ingest")
    require_fingerprint(config, "train")
    manifest = _manifest(config)
    if aug_seed is None:
        aug_seed = config.aug_seeds[0]
    run_dir = Path(config.run_dir)
    corpus_root = Path(config.corpus_root)

    rendered = []
    for speaker in _speakers_in_scope(config, manifest):
        ckpt = _select_checkpoint(config, speaker, variant, aug_seed)
        by_id = {u.id: u for u in manifest.utterances_for(speaker)}
        for uid in _synth_target_ids(config, manifest, speaker):
            bundle = load_ingested(config, uid)
            mcep_pred = predict_mcep(config, ckpt, bundle["x"])
            gt = dsp.AcousticFeatures(
                mcep=bundle["mcep"], f0=bundle["f0"], bap=bundle["bap"],
                alpha=config.alpha,
            )
            predicted = dsp.AcousticFeatures(
                mcep=mcep_pred, f0=bundle["f0"], bap=bundle["bap"],
                alpha=config.alpha,
            )
            resynth_mcd = mcd(bundle["mcep"], gt.mcep, config.exclude_c0)
            assert resynth_mcd == 0.0, "resynthesis must reproduce features"

            for condition, feats in (("predicted", predicted),
                                     ("resynthesis", gt)):
                fdir = run_dir / "features" / condition
                adir = run_dir / "audio" / condition
                fdir.mkdir(parents=True, exist_ok=True)
                adir.mkdir(parents=True, exist_ok=True)
                dsp.write_features(fdir / f"{uid}.afv", feats)
                audio = dsp.synthesize(
                    feats, noise_seed=_stable_noise_seed(config.seed, uid,
                                                         condition))
                peak = np.abs(audio).max()
                if peak > 0:
                    audio = 0.7 * audio / peak
                dsp.write_wav(adir / f"{uid}.wav", audio)

            gt_dir = run_dir / "audio" / "ground_truth"
            gt_dir.mkdir(parents=True, exist_ok=True)
            source = by_id[uid].audio_path
            if source:
                shutil.copyfile(corpus_root / source, gt_dir / f"{uid}.wav")
            else:
                audio = dsp.synthesize(
                    gt, noise_seed=_stable_noise_seed(config.seed, uid, "gt"))
                peak = np.abs(audio).max()
                if peak > 0:
                    audio = 0.7 * audio / peak
                dsp.write_wav(gt_dir / f"{uid}.wav", audio)
            rendered.append(uid)

    write_fingerprint(config, "synth",
                      {"variant": variant, "aug_seed": aug_seed,
                       "n_utterances": len(rendered)})
    return {"rendered": rendered, "variant": variant, "aug_seed": aug_seed}


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def mean_predictor_baseline(config: RunConfig, manifest: CorpusManifest,
                            speaker: str) -> float:
    """MCD of predicting the training-mean MCEP everywhere on the test set."""
    train_ids, test_ids = _training_sets(config, manifest, speaker)
    train_frames = []
    for uid in train_ids:
        _, y = _trimmed(config, load_ingested(config, uid))
        train_frames.append(y)
    mean_mcep = np.concatenate(train_frames).mean(axis=0)
    total, frames = 0.0, 0
    for uid in test_ids:
        _, y = _trimmed(config, load_ingested(config, uid),
                        force_trim=config.speech_only or config.trim_silence)
        pred = np.tile(mean_mcep, (len(y), 1))
        total += mcd(y, pred, config.exclude_c0) * len(y)
        frames += len(y)
    return total / max(frames, 1)


def stage_eval(config: RunConfig, responses_path=None) -> dict:
    """Objective evaluation.

    Writes eval/mcd.csv (canonical checkpoint, predicted + resynthesis, in
    the configured frame mode), eval/mcd_alt_mode.csv (the complementary
    mode), and eval/mcd_sweep.csv (every checkpoint of the augmentation
    sweep, for the statistics stage).  With a responses export, also writes
    eval/mos.csv and eval/confusion.csv.
    """
    config.validate()
    require_fingerprint(config, "ingest")
    require_fingerprint(config, "train")
    manifest = _manifest(config)
    run_dir = Path(config.run_dir)
    eval_dir = run_dir / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    groups = {s.id: s.condition for s in manifest.speakers}

    def test_mcd_rows(speaker, ckpt, speech_only):
        _, test_ids = _training_sets(config, manifest, speaker)
        rows = []
        for uid in test_ids:
            bundle = load_ingested(config, uid)
            mcep_pred = predict_mcep(config, ckpt, bundle["x"])
            if speech_only:
                lo, hi = (int(v) for v in bundle["speech"])
            else:
                lo, hi = 0, len(bundle["mcep"])
            value = mcd(bundle["mcep"][lo:hi], mcep_pred[lo:hi],
                        config.exclude_c0)
            rows.append((uid, hi - lo, value))
        return rows

    canonical_seed = config.aug_seeds[0]
    results_main, results_alt, sweep_rows = [], [], []
    for speaker in _speakers_in_scope(config, manifest):
        for aug_seed in config.aug_seeds:
            for variant in variant_list(config):
                ckpt = _select_checkpoint(config, speaker, variant, aug_seed)
                rows = test_mcd_rows(speaker, ckpt, config.speech_only)
                frames = sum(r[1] for r in rows)
                mean_val = (sum(r[1] * r[2] for r in rows) / frames
                            if frames else float("nan"))
                sweep_rows.append({
                    "speaker": speaker, "aug_seed": aug_seed,
                    "variant": variant, "setup": config.setup,
                    "frames": frames, "mean_mcd_db": f"{mean_val:.6f}",
                })
                if variant == CLEAN_VARIANT and aug_seed == canonical_seed:
                    for uid, n, value in rows:
                        results_main.append(McdResult(
                            utterance_id=uid, speaker=speaker,
                            speaker_condition=groups[speaker],
                            setup=config.setup, condition="predicted",
                            frames=n, mcd_db=value,
                        ))
                        results_main.append(McdResult(
                            utterance_id=uid, speaker=speaker,
                            speaker_condition=groups[speaker],
                            setup=config.setup, condition="resynthesis",
                            frames=n, mcd_db=0.0,
                        ))
                    for uid, n, value in test_mcd_rows(
                            speaker, ckpt, not config.speech_only):
                        results_alt.append(McdResult(
                            utterance_id=uid, speaker=speaker,
                            speaker_condition=groups[speaker],
                            setup=config.setup, condition="predicted",
                            frames=n, mcd_db=value,
                        ))

    write_mcd_csv(eval_dir / "mcd.csv", results_main)
    write_mcd_csv(eval_dir / "mcd_alt_mode.csv", results_alt)

    import csv as _csv
    import io as _io

    buf = _io.StringIO()
    writer = _csv.DictWriter(buf, fieldnames=("speaker", "aug_seed", "variant",
                                              "setup", "frames", "mean_mcd_db"),
                             lineterminator="\n")
    writer.writeheader()
    for row in sweep_rows:
        writer.writerow(row)
    (eval_dir / "mcd_sweep.csv").write_text(buf.getvalue(), encoding="utf-8")

    summary = {
        "mode": "speech_only" if config.speech_only else "all_frames",
        "alt_mode": "all_frames" if config.speech_only else "speech_only",
        "n_sweep_checkpoints": len(sweep_rows),
    }

    if responses_path is not None:
        _write_perceptual_tables(config, eval_dir, groups, responses_path)
        summary["responses"] = str(responses_path)

    (eval_dir / "eval_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    write_fingerprint(config, "eval", {"n_results": len(results_main)})
    return summary


def _load_responses(responses_path) -> list:
    records = []
    with open(responses_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def _write_perceptual_tables(config, eval_dir, groups, responses_path):
    records = _load_responses(responses_path)
    mos_rows = []
    for r in records:
        if r["task"] == "mos":
            mos_rows.append({
                "listener": r["listener_id"],
                "utterance_id": r["utterance_id"],
                "speaker": r["speaker"],
                "speaker_condition": r["speaker_group"],
                "condition": r["condition"],
                "rating": r["answer"]["mos"],
            })
    if mos_rows:
        import csv as _csv
        import io as _io

        buf = _io.StringIO()
        writer = _csv.DictWriter(
            buf, fieldnames=("listener", "utterance_id", "speaker",
                             "speaker_condition", "condition", "rating"),
            lineterminator="\n")
        writer.writeheader()
        for row in sorted(mos_rows, key=lambda r: (r["listener"],
                                                   r["utterance_id"],
                                                   r["condition"])):
            writer.writerow(row)
        (eval_dir / "mos.csv").write_text(buf.getvalue(), encoding="utf-8")

    tables = []
    for task, vocab in (("vowel_id", VOWEL_WORDS),
                        ("consonant_id", CONSONANT_WORDS)):
        for condition in ("ground_truth", "predicted"):
            for group in ("healthy", "oral_cancer"):
                pairs = [(r["presented_word"], answer_text(r))
                         for r in records
                         if r["task"] == task and r["condition"] == condition
                         and r["speaker_group"] == group]
                if pairs:
                    tables.append(confusion(pairs, vocab, task=task,
                                            condition=condition,
                                            speaker_group=group))
    if tables:
        write_confusion_csv(eval_dir / "confusion.csv", tables)


# ---------------------------------------------------------------------------
# stats
# ---------------------------------------------------------------------------

def stage_stats(config: RunConfig, responses_path=None) -> list:
    """Statistical tests over the evaluation artifacts.

    Augmentation paired t-tests (paired by random seed) per speaker and
    sigma level, plus pooled; with responses, Fisher tests per
    identification word/group and Wilcoxon MOS comparisons per speaker and
    pooled.
    """
    config.validate()
    require_fingerprint(config, "eval")
    run_dir = Path(config.run_dir)
    import csv as _csv

    with open(run_dir / "eval" / "mcd_sweep.csv", newline="",
              encoding="utf-8") as fh:
        sweep = [dict(row) for row in _csv.DictReader(fh)]

    rows = []
    notes = []
    speakers = sorted({r["speaker"] for r in sweep})

    def sweep_value(speaker, aug_seed, variant):
        for r in sweep:
            if (r["speaker"] == speaker and int(r["aug_seed"]) == aug_seed
                    and r["variant"] == variant):
                return float(r["mean_mcd_db"])
        raise DependencyError(
            f"sweep row missing for {speaker}/{aug_seed}/{variant}"
        )

    if len(config.aug_seeds) < 2 and config.sigmas:
        notes.append("augmentation t-tests skipped: need >= 2 seeds to pair")
    sigmas = config.sigmas if len(config.aug_seeds) >= 2 else ()
    for sigma in sigmas:
        variant = sigma_tag(sigma)
        for speaker in speakers:
            clean = [sweep_value(speaker, s, CLEAN_VARIANT)
                     for s in config.aug_seeds]
            augd = [sweep_value(speaker, s, variant) for s in config.aug_seeds]
            try:
                res = paired_t(clean, augd)
            except DegenerateDataError:
                notes.append(f"paired_t degenerate for {speaker}/{variant}")
                continue
            rows.append({
                "test": "paired_t",
                "scope": format_scope(speaker=speaker, setup=config.setup,
                                      sigma=f"{sigma:g}"),
                "statistic": res.statistic, "df": res.df,
                "p": res.p_two_sided, "method": res.method, "n": res.n,
            })
        pooled_clean, pooled_aug = [], []
        for speaker in speakers:
            for s in config.aug_seeds:
                pooled_clean.append(sweep_value(speaker, s, CLEAN_VARIANT))
                pooled_aug.append(sweep_value(speaker, s, variant))
        try:
            res = paired_t(pooled_clean, pooled_aug)
            rows.append({
                "test": "paired_t",
                "scope": format_scope(speaker="all", setup=config.setup,
                                      sigma=f"{sigma:g}"),
                "statistic": res.statistic, "df": res.df,
                "p": res.p_two_sided, "method": res.method, "n": res.n,
            })
        except DegenerateDataError:
            notes.append(f"pooled paired_t degenerate for {variant}")

    if responses_path is not None:
        records = _load_responses(responses_path)
        rows.extend(_identification_fisher_rows(records))
        rows.extend(_mos_wilcoxon_rows(records))

    stats_dir = run_dir / "stats"
    stats_dir.mkdir(parents=True, exist_ok=True)
    write_stats_csv(stats_dir / "stats.csv", rows)
    (stats_dir / "stats_summary.json").write_text(
        json.dumps({"n_tests": len(rows), "notes": notes}, indent=2,
                   sort_keys=True) + "\n", encoding="utf-8")
    write_fingerprint(config, "stats", {"n_tests": len(rows)})
    return rows


def _identification_fisher_rows(records) -> list:
    rows = []
    for task, vocab in (("vowel_id", VOWEL_WORDS),
                        ("consonant_id", CONSONANT_WORDS)):
        for group in ("healthy", "oral_cancer"):
            for word in vocab:
                cells = {}
                for condition in ("ground_truth", "predicted"):
                    correct = wrong = 0
                    for r in records:
                        if (r["task"] == task and r["speaker_group"] == group
                                and r["condition"] == condition
                                and r["presented_word"] == word):
                            if answer_text(r).strip().lower() == word:
                                correct += 1
                            else:
                                wrong += 1
                    cells[condition] = (correct, wrong)
                a, b = cells["ground_truth"]
                c, d = cells["predicted"]
                if a + b == 0 or c + d == 0:
                    continue
                res = fishers_exact(a, b, c, d)
                rows.append({
                    "test": "fishers_exact",
                    "scope": format_scope(task=task, word=word, group=group),
                    "statistic": res.statistic, "df": None,
                    "p": res.p_two_sided, "method": res.method, "n": res.n,
                })
    return rows


def _mos_wilcoxon_rows(records) -> list:
    ratings = {}
    speakers = set()
    for r in records:
        if r["task"] != "mos":
            continue
        key = (r["listener_id"], r["utterance_id"])
        ratings.setdefault(key, {})[r["condition"]] = (
            r["answer"]["mos"], r["speaker"])
        speakers.add(r["speaker"])

    comparisons = (("ground_truth", "resynthesis"),
                   ("resynthesis", "predicted"))
    rows = []
    for cond_a, cond_b in comparisons:
        by_speaker = {s: ([], []) for s in sorted(speakers)}
        pooled = ([], [])
        for key, conditions in sorted(ratings.items()):
            if cond_a in conditions and cond_b in conditions:
                va, speaker = conditions[cond_a]
                vb, _ = conditions[cond_b]
                by_speaker[speaker][0].append(va)
                by_speaker[speaker][1].append(vb)
                pooled[0].append(va)
                pooled[1].append(vb)
        for speaker, (xa, xb) in list(by_speaker.items()) + [("all", pooled)]:
            if len(xa) < 1:
                continue
            try:
                res = wilcoxon_signed_rank(xa, xb)
            except DegenerateDataError:
                continue
            rows.append({
                "test": "wilcoxon_signed_rank",
                "scope": format_scope(speaker=speaker,
                                      condition=f"{cond_a}_vs_{cond_b}"),
                "statistic": res.statistic, "df": None,
                "p": res.p_two_sided, "method": res.method, "n": res.n,
            })
    return rows


# ---------------------------------------------------------------------------
# report / export / analyze / registry
# ---------------------------------------------------------------------------

def stage_report(config: RunConfig) -> dict:
    config.validate()
    require_fingerprint(config, "eval")
    summary = render_report(config.run_dir)
    write_fingerprint(config, "report", {})
    return summary


def stage_export_world(config: RunConfig, source: str = "corpus") -> list:
    """Write WORLD-compatible f64 arrays for external vocoders."""
    config.validate()
    manifest = _manifest(config)
    run_dir = Path(config.run_dir)
    out_dir = run_dir / "world" / source
    written = []
    if source == "corpus":
        corpus_root = Path(config.corpus_root)
        for u in manifest.utterances:
            if config.speakers and u.speaker not in config.speakers:
                continue
            feats = dsp.read_features(corpus_root / u.feature_path)
            paths = dsp.export_world(feats, out_dir, u.id)
            written.append(str(paths["sp"]))
    elif source == "predicted":
        require_fingerprint(config, "synth")
        pred_dir = run_dir / "features" / "predicted"
        for path in sorted(pred_dir.glob("*.afv")):
            feats = dsp.read_features(path)
            paths = dsp.export_world(feats, out_dir, path.stem)
            written.append(str(paths["sp"]))
    else:
        raise EmasynthError(f"unknown export source {source!r}")
    return written


def stage_analyze(config: RunConfig) -> list:
    """Run the reference analyzer over corpus audio; writes AFV1 files."""
    config.validate()
    manifest = _manifest(config)
    corpus_root = Path(config.corpus_root)
    out_dir = Path(config.run_dir) / "features" / "analyzed"
    out_dir.mkdir(parents=True, exist_ok=True)
    from .ingest import load_audio

    written = []
    for u in manifest.utterances:
        if config.speakers and u.speaker not in config.speakers:
            continue
        if not u.audio_path:
            continue
        audio = load_audio(corpus_root / u.audio_path)
        feats = dsp.analyze(audio, alpha=config.alpha, order=config.mcep_order)
        path = out_dir / f"{u.id}.afv"
        dsp.write_features(path, feats)
        written.append(str(path))
    return written


def build_run_registry(config: RunConfig):
    """Stimulus registry over corpus ground truth + this run's rendered audio."""
    manifest = _manifest(config)
    run_dir = Path(config.run_dir)
    synthesis_audio = {}
    manipulation_audio = {}
    for condition in ("predicted", "resynthesis"):
        adir = run_dir / "audio" / condition
        if adir.exists():
            synthesis_audio[condition] = {
                p.stem: str(p) for p in sorted(adir.glob("*.wav"))
            }
    pred = synthesis_audio.get("predicted", {})
    manipulation_audio = dict(pred)
    gt_dir = run_dir / "audio" / "ground_truth"
    gt_override = ({p.stem: str(p) for p in sorted(gt_dir.glob("*.wav"))}
                   if gt_dir.exists() else {})
    registry = build_registry(Path(config.corpus_root), manifest,
                              synthesis_audio=synthesis_audio,
                              manipulation_audio=manipulation_audio)
    if gt_override:
        from .service import Stimulus, StimulusRegistry

        patched = []
        for s in registry:
            if (s.condition == "ground_truth"
                    and s.utterance_id in gt_override):
                patched.append(Stimulus(
                    stimulus_id=s.stimulus_id, utterance_id=s.utterance_id,
                    speaker=s.speaker, speaker_group=s.speaker_group,
                    condition=s.condition,
                    audio_path=gt_override[s.utterance_id],
                    word=s.word, sentence_key=s.sentence_key,
                ))
            else:
                patched.append(s)
        registry = StimulusRegistry(patched)
    return registry
