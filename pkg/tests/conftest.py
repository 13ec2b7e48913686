import numpy as np
import pytest

from acoustok.corpus import SynthSpec, synthesize_corpus
from acoustok.tokenizer import GaussState, Granularity, LevelModel, TokenHmm


def oracle_level_model(spec: SynthSpec) -> LevelModel:
    """The generating model itself, as a LevelModel: the decode upper bound."""
    hmms = []
    mean_dur = (spec.frames_per_state[0] + spec.frames_per_state[1]) / 2.0
    self_prob = max(0.0, 1.0 - 1.0 / mean_dur)
    for token in range(spec.n_tokens):
        states = [
            GaussState.single(
                spec.state_mean(token, s), np.full(spec.dim, spec.emission_std**2)
            )
            for s in range(spec.states_per_token)
        ]
        trans = np.tile([self_prob, 1.0 - self_prob], (spec.states_per_token, 1))
        hmms.append(TokenHmm(token, states, trans))
    prior = np.full(spec.n_tokens, 1.0 / spec.n_tokens)
    return LevelModel(Granularity(spec.states_per_token, spec.n_tokens), hmms, prior)


def frame_error_rate(labels, truth) -> float:
    """Fraction of frames whose decoded id differs from the true id (same id space)."""
    wrong = 0
    total = 0
    for utt, seq in labels.items():
        hyp = seq.frame_labels()
        ref = np.empty_like(hyp)
        for token, start, end in truth.spans[utt]:
            ref[start:end] = token
        wrong += int(np.sum(hyp != ref))
        total += len(hyp)
    return wrong / total


@pytest.fixture(scope="session")
def small_corpus():
    """20 utterances, 5 well-separated tokens: the standard desk fixture."""
    spec = SynthSpec(n_tokens=5, states_per_token=3, dim=8, n_utterances=20)
    corpus, truth = synthesize_corpus(spec, seed=12345)
    return spec, corpus, truth


@pytest.fixture(scope="session")
def recovery_corpus():
    """Larger fixture with distinct per-state structure, enough frames per
    state that the ML mean estimate is well inside 0.2 sigma."""
    spec = SynthSpec(
        n_tokens=5,
        states_per_token=3,
        dim=8,
        n_utterances=80,
        state_drift=2.0,
        frames_per_state=(4, 7),
    )
    corpus, truth = synthesize_corpus(spec, seed=12345)
    return spec, corpus, truth
