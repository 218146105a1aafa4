import json
from pathlib import Path

import numpy as np
import pytest

from emasynth import dsp
from emasynth.cli import main
from emasynth.config import RunConfig
from emasynth.corpus import SynthCorpusConfig, generate_synthetic_corpus
from emasynth.evaluate import read_mcd_csv, read_stats_csv
from emasynth.model import load_checkpoint


def write_config(path, corpus_root, run_dir, **overrides) -> Path:
    config = {
        "corpus_root": str(corpus_root),
        "run_dir": str(run_dir),
        "setup": "synthesis",
        "seed": 0,
        "trim_silence": True,
        "augmentation": {"sigmas": [0.1], "seeds": [0, 1]},
        "train": {"lr": 0.005, "max_epochs": 2, "patience": 2,
                  "val_fraction": 0.1, "hidden": 8, "layers": 1},
    }
    config.update(overrides)
    path.write_text(json.dumps(config, indent=2))
    return path


@pytest.fixture(scope="module")
def pipeline_run(synthetic_corpus, tmp_path_factory):
    """One full pipeline run shared by the assertions below."""
    root, _ = synthetic_corpus
    base = tmp_path_factory.mktemp("cli")
    run_dir = base / "run"
    cfg = write_config(base / "config.json", root, run_dir)
    for stage in ("ingest", "train", "synth", "eval", "stats", "report"):
        assert main([stage, "--config", str(cfg)]) == 0, stage
    return cfg, run_dir


class TestPipeline:
    def test_artifacts_exist(self, pipeline_run):
        _, run_dir = pipeline_run
        assert (run_dir / "config.json").exists()
        assert (run_dir / "features" / "ingest_summary.json").exists()
        ckpts = sorted((run_dir / "checkpoints").glob("*.ckpt"))
        # (clean + 1 sigma) x 2 seeds
        assert len(ckpts) == 4
        assert (run_dir / "eval" / "mcd.csv").exists()
        assert (run_dir / "eval" / "mcd_sweep.csv").exists()
        assert (run_dir / "stats" / "stats.csv").exists()
        assert (run_dir / "report" / "report.txt").exists()

    def test_mcd_rows_per_test_utterance(self, pipeline_run):
        _, run_dir = pipeline_run
        results = read_mcd_csv(run_dir / "eval" / "mcd.csv")
        predicted = [r for r in results if r.condition == "predicted"]
        resynth = [r for r in results if r.condition == "resynthesis"]
        assert len(predicted) == 10  # synthesis test set of one speaker
        assert len(resynth) == 10
        assert all(r.mcd_db == 0.0 for r in resynth)
        assert all(r.mcd_db > 0.0 for r in predicted)

    def test_predicted_audio_and_features(self, pipeline_run):
        _, run_dir = pipeline_run
        wavs = sorted((run_dir / "audio" / "predicted").glob("*.wav"))
        afvs = sorted((run_dir / "features" / "predicted").glob("*.afv"))
        assert len(wavs) == 10 and len(afvs) == 10
        feats = dsp.read_features(afvs[0])
        assert feats.n_frames > 0

    def test_checkpoint_extras_complete(self, pipeline_run):
        _, run_dir = pipeline_run
        ckpt = load_checkpoint(
            sorted((run_dir / "checkpoints").glob("*clean.ckpt"))[0]
        )
        for key in ("input_normalizer", "target_normalizer", "mlpg_variances",
                    "data_fingerprint", "speaker", "sigma", "aug_seed"):
            assert key in ckpt.extras
        assert ckpt.extras["sigma"] is None

    def test_stats_rows(self, pipeline_run):
        _, run_dir = pipeline_run
        rows = read_stats_csv(run_dir / "stats" / "stats.csv")
        t_rows = [r for r in rows if r["test"] == "paired_t"]
        assert len(t_rows) >= 1
        assert all(0 < r["p"] <= 1 for r in rows)

    def test_stage_rerun_is_byte_identical(self, pipeline_run):
        cfg, run_dir = pipeline_run
        mcd_before = (run_dir / "eval" / "mcd.csv").read_bytes()
        sweep_before = (run_dir / "eval" / "mcd_sweep.csv").read_bytes()
        assert main(["eval", "--config", str(cfg)]) == 0
        assert (run_dir / "eval" / "mcd.csv").read_bytes() == mcd_before
        assert (run_dir / "eval" / "mcd_sweep.csv").read_bytes() == sweep_before

    def test_export_world(self, pipeline_run):
        cfg, run_dir = pipeline_run
        assert main(["export-world", "--config", str(cfg),
                     "--source", "predicted"]) == 0
        files = sorted((run_dir / "world" / "predicted").glob("*.sp.f64"))
        assert len(files) == 10
        K = 513
        sp = np.frombuffer(files[0].read_bytes(), dtype="<f8").reshape(-1, K)
        assert np.all(sp > 0)


class TestExitCodes:
    def test_missing_dependency_exit_3(self, synthetic_corpus, tmp_path):
        root, _ = synthetic_corpus
        cfg = write_config(tmp_path / "c.json", root, tmp_path / "fresh-run")
        assert main(["train", "--config", str(cfg)]) == 3

    def test_validation_error_exit_2(self, synthetic_corpus, tmp_path):
        root, _ = synthetic_corpus
        cfg = write_config(tmp_path / "c.json", root, tmp_path / "run",
                           setup="bogus")
        assert main(["ingest", "--config", str(cfg)]) == 2

    def test_unknown_config_field_exit_2(self, synthetic_corpus, tmp_path):
        root, _ = synthetic_corpus
        cfg = write_config(tmp_path / "c.json", root, tmp_path / "run",
                           typo_field=1)
        assert main(["ingest", "--config", str(cfg)]) == 2

    def test_missing_corpus_exit_2(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", tmp_path / "nowhere",
                           tmp_path / "run")
        assert main(["ingest", "--config", str(cfg)]) == 2

    def test_fingerprint_mismatch_after_config_change(self, synthetic_corpus,
                                                      tmp_path):
        root, _ = synthetic_corpus
        run_dir = tmp_path / "run"
        cfg = write_config(tmp_path / "c.json", root, run_dir)
        assert main(["ingest", "--config", str(cfg)]) == 0
        cfg2 = write_config(tmp_path / "c2.json", root, run_dir,
                            trim_silence=False)
        assert main(["train", "--config", str(cfg2)]) == 3


@pytest.fixture(scope="module")
def audio_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("audio-corpus")
    config = SynthCorpusConfig(
        segments_range=(3, 3),
        segment_duration_range_s=(0.08, 0.1),
        write_audio=True,
    )
    manifest = generate_synthetic_corpus(root, config, seed=5)
    return root, manifest


class TestAnalyze:
    def test_analyze_writes_features(self, audio_corpus, tmp_path):
        root, manifest = audio_corpus
        cfg = write_config(tmp_path / "c.json", root, tmp_path / "run")
        assert main(["analyze", "--config", str(cfg)]) == 0
        outs = sorted((tmp_path / "run" / "features" / "analyzed").glob("*.afv"))
        assert len(outs) == len(manifest.utterances)
        feats = dsp.read_features(outs[0])
        assert feats.mcep.shape[1] == 25


class TestConfig:
    def test_content_hash_ignores_run_dir(self, synthetic_corpus, tmp_path):
        root, _ = synthetic_corpus
        a = RunConfig.load(write_config(tmp_path / "a.json", root, "runs/a"))
        b = RunConfig.load(write_config(tmp_path / "b.json", root, "runs/b"))
        assert a.content_hash() == b.content_hash()
        c = RunConfig.load(write_config(tmp_path / "c.json", root, "runs/a",
                                        seed=99))
        assert a.content_hash() != c.content_hash()

    def test_round_trip(self, synthetic_corpus, tmp_path):
        root, _ = synthetic_corpus
        cfg = RunConfig.load(write_config(tmp_path / "a.json", root, "runs/a"))
        cfg.save(tmp_path / "resolved.json")
        again = RunConfig.load(tmp_path / "resolved.json")
        assert again.to_dict() == cfg.to_dict()
