import numpy as np
import pytest

from acoustok.corpus import (
    AudioError,
    FeatureSequence,
    SynthSpec,
    Waveform,
    apply_cmvn,
    extract_features,
    load_audio,
    load_corpus,
    read_matf,
    save_audio,
    save_corpus,
    synthesize_corpus,
    utterance_stats,
    window_context,
    write_features_csv,
    write_matf,
)


def make_tone(seconds=1.0, sr=16000, freq=440.0, amp=0.5):
    t = np.arange(int(seconds * sr)) / sr
    return Waveform(amp * np.sin(2 * np.pi * freq * t), sr, "tone")


class TestLoadAudio:
    def test_one_second_16k(self, tmp_path):
        save_audio(tmp_path / "a.wav", make_tone())
        w = load_audio(tmp_path / "a.wav")
        assert len(w.samples) == 16000
        assert w.sample_rate == 16000
        assert np.max(np.abs(w.samples)) <= 1.0

    def test_stereo_rejected(self, tmp_path):
        import wave

        with wave.open(str(tmp_path / "st.wav"), "wb") as f:
            f.setnchannels(2)
            f.setsampwidth(2)
            f.setframerate(16000)
            f.writeframes(b"\x00\x00" * 200)
        with pytest.raises(AudioError, match="unsupported encoding"):
            load_audio(tmp_path / "st.wav")

    def test_all_zero_pcm(self, tmp_path):
        save_audio(tmp_path / "z.wav", Waveform(np.zeros(800), 16000, "z"))
        w = load_audio(tmp_path / "z.wav")
        assert np.all(w.samples == 0.0)

    def test_garbage_file(self, tmp_path):
        (tmp_path / "bad.wav").write_bytes(b"not a wav at all")
        with pytest.raises(AudioError):
            load_audio(tmp_path / "bad.wav")


class TestExtractFeatures:
    def test_frame_count_one_second(self):
        # floor((16000 - 400) / 160) + 1
        feats = extract_features(make_tone())
        assert feats.frames.shape == (98, 39)

    def test_constant_signal_zero_deltas(self):
        w = Waveform(np.full(8000, 0.25), 16000, "const")
        feats = extract_features(w)
        assert np.max(np.abs(feats.frames[:, 13:])) < 1e-9

    def test_default_dim_is_39(self):
        assert extract_features(make_tone(0.2)).dim == 39

    def test_deterministic(self):
        a = extract_features(make_tone())
        b = extract_features(make_tone())
        assert np.array_equal(a.frames, b.frames)

    def test_too_short(self):
        with pytest.raises(AudioError, match="shorter than one window"):
            extract_features(Waveform(np.zeros(100), 16000, "short"))


class TestCmvn:
    def test_column_means_zeroed(self):
        rng = np.random.default_rng(0)
        seq = FeatureSequence(rng.normal(3.0, 2.0, size=(50, 7)))
        out = apply_cmvn(seq)
        assert np.max(np.abs(out.frames.mean(axis=0))) < 1e-9
        assert np.max(np.abs(out.frames.var(axis=0) - 1.0)) < 1e-9

    def test_idempotent(self):
        rng = np.random.default_rng(1)
        seq = FeatureSequence(rng.normal(size=(40, 5)))
        once = apply_cmvn(seq)
        twice = apply_cmvn(once)
        assert np.max(np.abs(once.frames - twice.frames)) < 1e-9

    def test_constant_column_floored(self):
        frames = np.ones((30, 3))
        frames[:, 1] = np.arange(30)
        out = apply_cmvn(FeatureSequence(frames))
        assert np.all(out.frames[:, 0] == 0.0)
        assert np.all(out.frames[:, 2] == 0.0)


class TestWindowContext:
    def test_width(self):
        seq = FeatureSequence(np.zeros((10, 39)))
        assert window_context(seq, 4).frames.shape == (10, 351)

    def test_single_frame_replication(self):
        seq = FeatureSequence(np.arange(39, dtype=float)[None, :])
        ctx = window_context(seq, 4)
        assert ctx.frames.shape == (1, 351)
        assert np.array_equal(ctx.frames[0], np.tile(seq.frames[0], 9))

    def test_radius_zero_identity(self):
        rng = np.random.default_rng(2)
        seq = FeatureSequence(rng.normal(size=(8, 4)))
        assert np.array_equal(window_context(seq, 0).frames, seq.frames)

    def test_blocks_are_clamped_source_rows(self):
        rng = np.random.default_rng(3)
        seq = FeatureSequence(rng.normal(size=(6, 3)))
        r = 2
        ctx = window_context(seq, r)
        for t in range(6):
            for bi, k in enumerate(range(-r, r + 1)):
                src = min(max(t + k, 0), 5)
                assert np.array_equal(ctx.frames[t, bi * 3 : (bi + 1) * 3], seq.frames[src])


class TestUtteranceStats:
    def test_length(self):
        seq = FeatureSequence(np.random.default_rng(0).normal(size=(20, 39)))
        assert utterance_stats(seq).shape == (78,)

    def test_constant_std_zero(self):
        seq = FeatureSequence(np.full((10, 4), 2.5))
        stats = utterance_stats(seq)
        assert np.array_equal(stats[:4], np.full(4, 2.5))
        assert np.array_equal(stats[4:], np.zeros(4))

    def test_identical_inputs(self):
        frames = np.random.default_rng(4).normal(size=(15, 6))
        a = utterance_stats(FeatureSequence(frames, utterance_id="a"))
        b = utterance_stats(FeatureSequence(frames.copy(), utterance_id="b"))
        assert np.array_equal(a, b)


class TestSynthesizeCorpus:
    def test_deterministic(self):
        spec = SynthSpec()
        c1, t1 = synthesize_corpus(spec, seed=7)
        c2, t2 = synthesize_corpus(spec, seed=7)
        for a, b in zip(c1, c2):
            assert np.array_equal(a.frames, b.frames)
        assert t1.spans == t2.spans

    def test_single_token(self):
        spec = SynthSpec(n_tokens=1, n_utterances=3, allow_repeats=True)
        _, truth = synthesize_corpus(spec, seed=0)
        for spans in truth.spans.values():
            assert all(s[0] == 0 for s in spans)

    def test_all_tokens_appear(self):
        spec = SynthSpec(n_tokens=5, n_utterances=20)
        _, truth = synthesize_corpus(spec, seed=1)
        seen = {s[0] for spans in truth.spans.values() for s in spans}
        assert seen == set(range(5))

    def test_spans_tile_utterances(self):
        corpus, truth = synthesize_corpus(SynthSpec(), seed=2)
        for seq in corpus:
            spans = truth.spans[seq.utterance_id]
            assert spans[0][1] == 0
            assert spans[-1][2] == seq.n_frames
            for prev, cur in zip(spans, spans[1:]):
                assert prev[2] == cur[1]

    def test_invalid_spec(self):
        with pytest.raises(ValueError, match="invalid spec"):
            synthesize_corpus(SynthSpec(n_tokens=0), seed=0)

    def test_explicit_sequences(self):
        spec = SynthSpec(token_sequences={"q": [2, 0, 3]})
        _, truth = synthesize_corpus(spec, seed=3)
        assert [s[0] for s in truth.spans["q"]] == [2, 0, 3]


class TestFeatureFiles:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(5)
        seq = FeatureSequence(rng.normal(size=(12, 7)).astype(np.float32), utterance_id="u")
        write_matf(tmp_path / "u.matf", seq)
        first = (tmp_path / "u.matf").read_bytes()
        back = read_matf(tmp_path / "u.matf")
        assert np.array_equal(back.frames, seq.frames)
        write_matf(tmp_path / "u2.matf", back)
        assert (tmp_path / "u2.matf").read_bytes() == first

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.matf").write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(ValueError, match="bad magic"):
            read_matf(tmp_path / "x.matf")

    def test_csv_header(self, tmp_path):
        seq = FeatureSequence(np.zeros((2, 3)))
        write_features_csv(tmp_path / "f.csv", seq)
        header = (tmp_path / "f.csv").read_text().splitlines()[0]
        assert header == "0,1,2"

    def test_corpus_roundtrip(self, tmp_path):
        corpus, _ = synthesize_corpus(SynthSpec(n_utterances=4), seed=6)
        save_corpus(tmp_path / "c", corpus)
        back = load_corpus(tmp_path / "c")
        assert back.ids() == corpus.ids()
        assert back.speakers == corpus.speakers
        for a, b in zip(corpus, back):
            assert np.array_equal(a.frames.astype(np.float32), b.frames.astype(np.float32))
