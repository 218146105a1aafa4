import filecmp
from pathlib import Path

import numpy as np
import pytest
from numpy.testing import assert_allclose

from emasynth import dsp
from emasynth.corpus import (
    CATEGORY_CUSTOM,
    CATEGORY_JORINDE_EN_JORINGEL,
    MANIPULATION_TEST_WORDS,
    SETUP_MANIPULATION,
    SETUP_SYNTHESIS,
    SynthCorpusConfig,
    UTTERANCES_PER_SPEAKER,
    acoustic_map,
    build_partition,
    generate_synthetic_corpus,
    load_manifest,
)
from emasynth.errors import ConfigError, ParseError, PartitionError
from emasynth.ingest import parse_ema_tsv

from conftest import FAST_CONFIG


@pytest.fixture(scope="module")
def small_corpus(synthetic_corpus):
    return synthetic_corpus


def tree_bytes(root: Path) -> dict:
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*")) if p.is_file()
    }


class TestPartition:
    def test_synthesis_counts(self, small_corpus):
        _, manifest = small_corpus
        spec = build_partition(manifest, SETUP_SYNTHESIS)
        assert len(spec.train_ids) == 216
        assert len(spec.test_ids) == 10
        by_id = {u.id: u for u in manifest.utterances}
        for uid in spec.test_ids:
            u = by_id[uid]
            assert u.category == CATEGORY_JORINDE_EN_JORINGEL
            assert 70 <= u.story_index <= 79

    def test_manipulation_counts(self, small_corpus):
        _, manifest = small_corpus
        spec = build_partition(manifest, SETUP_MANIPULATION)
        assert len(spec.train_ids) == 211
        assert len(spec.test_ids) == 15
        by_id = {u.id: u for u in manifest.utterances}
        test_words = {by_id[uid].target_word for uid in spec.test_ids}
        assert test_words == set(MANIPULATION_TEST_WORDS)

    def test_partition_is_a_partition(self, small_corpus):
        _, manifest = small_corpus
        all_ids = {u.id for u in manifest.utterances}
        for setup in (SETUP_SYNTHESIS, SETUP_MANIPULATION):
            spec = build_partition(manifest, setup)
            train, test = set(spec.train_ids), set(spec.test_ids)
            assert train | test == all_ids
            assert train & test == set()

    def test_manipulation_train_contains_baat_and_sok(self, small_corpus):
        _, manifest = small_corpus
        spec = build_partition(manifest, SETUP_MANIPULATION)
        by_id = {u.id: u for u in manifest.utterances}
        custom_train = [by_id[uid] for uid in spec.train_ids
                        if by_id[uid].category == CATEGORY_CUSTOM]
        assert sorted({u.target_word for u in custom_train}) == ["baat", "sok"]
        assert len(custom_train) == 10

    def test_missing_category_infeasible(self, small_corpus):
        _, manifest = small_corpus
        import copy

        pruned = copy.deepcopy(manifest)
        pruned.utterances = [u for u in pruned.utterances
                             if u.category != CATEGORY_CUSTOM]
        with pytest.raises(PartitionError, match="Custom"):
            build_partition(pruned, SETUP_MANIPULATION)

    def test_unknown_setup(self, small_corpus):
        _, manifest = small_corpus
        with pytest.raises(PartitionError):
            build_partition(manifest, "bogus")


class TestManifest:
    def test_counts(self, small_corpus):
        _, manifest = small_corpus
        assert len(manifest.utterances) == UTTERANCES_PER_SPEAKER
        customs = [u for u in manifest.utterances if u.category == CATEGORY_CUSTOM]
        assert len(customs) == 25

    def test_json_round_trip(self, small_corpus):
        root, manifest = small_corpus
        loaded = load_manifest(root / "manifest.json")
        assert loaded.to_dict() == manifest.to_dict()

    def test_invariants_enforced(self, small_corpus):
        _, manifest = small_corpus
        import copy

        bad = copy.deepcopy(manifest)
        for u in bad.utterances:
            if u.category == CATEGORY_CUSTOM:
                u.target_word = None
                break
        with pytest.raises(ParseError):
            bad.validate()

    def test_non_custom_cannot_carry_word(self, small_corpus):
        _, manifest = small_corpus
        import copy

        bad = copy.deepcopy(manifest)
        for u in bad.utterances:
            if u.category != CATEGORY_CUSTOM:
                u.target_word = "baat"
                u.repetition = 1
                break
        with pytest.raises(ParseError):
            bad.validate()


class TestGenerator:
    def test_determinism_byte_identical(self, tmp_path):
        cfg = SynthCorpusConfig(segments_range=(3, 3),
                                segment_duration_range_s=(0.08, 0.1),
                                write_audio=True)
        a = tmp_path / "a"
        b = tmp_path / "b"
        generate_synthetic_corpus(a, cfg, seed=7)
        generate_synthetic_corpus(b, cfg, seed=7)
        ta, tb = tree_bytes(a), tree_bytes(b)
        assert ta.keys() == tb.keys()
        assert all(ta[k] == tb[k] for k in ta)

    def test_different_seed_differs(self, tmp_path):
        cfg = FAST_CONFIG
        a = tmp_path / "a"
        b = tmp_path / "b"
        generate_synthetic_corpus(a, cfg, seed=1)
        generate_synthetic_corpus(b, cfg, seed=2)
        ta, tb = tree_bytes(a), tree_bytes(b)
        assert ta.keys() == tb.keys()
        assert any(ta[k] != tb[k] for k in ta if k.endswith(".tsv"))

    def test_noiseless_features_recomputable_from_trajectory(self, tmp_path):
        cfg = SynthCorpusConfig(segments_range=(3, 3),
                                segment_duration_range_s=(0.08, 0.1),
                                noise_scale=0.0, write_audio=False)
        root = tmp_path / "c"
        manifest = generate_synthetic_corpus(root, cfg, seed=3)
        for u in manifest.utterances[:5]:
            rec = parse_ema_tsv(root / u.ema_path)
            stored = dsp.read_features(root / u.feature_path)
            recomputed = acoustic_map(rec.movement_matrix()[::2], cfg)
            assert_allclose(stored.mcep,
                            recomputed.astype("<f4").astype(float), atol=0.0)

    def test_zero_speakers_rejected(self):
        with pytest.raises(ConfigError):
            SynthCorpusConfig(n_speakers=0).validate()

    def test_zero_sensors_rejected(self):
        with pytest.raises(ConfigError):
            SynthCorpusConfig(movement_sensors=0).validate()

    def test_emitted_files_parse(self, small_corpus):
        root, manifest = small_corpus
        u = manifest.utterances[0]
        rec = parse_ema_tsv(root / u.ema_path)
        assert rec.sample_rate == 400.0
        assert rec.n_frames % 2 == 0
        feats = dsp.read_features(root / u.feature_path)
        assert feats.n_frames == rec.n_frames // 2

    def test_word_dependent_trajectories_differ(self, small_corpus):
        root, manifest = small_corpus
        by_word = {}
        for u in manifest.utterances:
            if u.category == CATEGORY_CUSTOM and u.repetition == 1:
                rec = parse_ema_tsv(root / u.ema_path)
                by_word[u.target_word] = rec.movement_matrix().mean(axis=0)
        gap = np.linalg.norm(by_word["biet"] - by_word["boet"])
        assert gap > 0.5
