import numpy as np
import pytest

from dataset import AnnotationTrack, FeatureSequence, SynthConfig, Video, synth_generate, write_corpus
from model import ModelConfig, init_params


def tiny_model_config(**overrides) -> ModelConfig:
    """feature_dim 8, 2 heads, ff 16, 1 block, head widths 8/4."""
    settings = dict(
        feature_dim=8,
        num_heads=2,
        ff_dim=16,
        num_encoder_blocks=1,
        head_hidden_1=8,
        head_hidden_2=4,
    )
    settings.update(overrides)
    return ModelConfig(**settings)


def mark_bn_trained(params):
    """Pretend batch-norm statistics were accumulated so infer mode is allowed."""
    for state in params.bn_states.values():
        state.updates = 1
    return params


def make_video(
    video_id="vid0",
    steps=6,
    dim=8,
    segments=None,
    behavior="smile",
    subject_id="subj0",
    seed=0,
    frames_per_step=64,
    frames_per_second=32.0,
) -> Video:
    """A random-feature video; with 64 frames at 32 fps each step lasts 2 s and centers fall on odd seconds."""
    rng = np.random.default_rng(seed)
    features = FeatureSequence(video_id, rng.standard_normal((steps, dim)), frames_per_step, frames_per_second)
    tracks = {behavior: AnnotationTrack(video_id, behavior, list(segments or []))}
    return Video(features=features, subject_id=subject_id, tracks=tracks)


@pytest.fixture
def tiny_config():
    return tiny_model_config()


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, seed=3)


@pytest.fixture
def small_synth_config():
    return SynthConfig(num_videos=6, steps_per_video=12, feature_dim=8, segment_steps=(2, 4), seed=5)


@pytest.fixture
def small_corpus(small_synth_config):
    return synth_generate(small_synth_config)


@pytest.fixture
def corpus_dir(tmp_path, small_corpus):
    return write_corpus(tmp_path / "corpus", small_corpus)
