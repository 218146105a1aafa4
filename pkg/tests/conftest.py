import pytest

from emasynth.corpus import SynthCorpusConfig, generate_synthetic_corpus

FAST_CONFIG = SynthCorpusConfig(
    segments_range=(3, 4),
    segment_duration_range_s=(0.08, 0.12),
    write_audio=False,
)


@pytest.fixture(scope="session")
def synthetic_corpus(tmp_path_factory):
    """One shared no-audio synthetic corpus (1 speaker, short utterances)."""
    root = tmp_path_factory.mktemp("shared-corpus")
    manifest = generate_synthetic_corpus(root, FAST_CONFIG, seed=7)
    return root, manifest
