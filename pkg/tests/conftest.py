"""Session fixtures: shared corpora and trained checkpoints.

Training fixtures are deliberately small. They exist so conditioning and
end-to-end behaviors can be asserted on genuinely trained models without
every test paying the training cost itself.
"""

import json

import numpy as np
import pytest

from kidtts import corpus, dsp, train


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Three-language corpus, 10 utterances per language. Cheap."""
    root = tmp_path_factory.mktemp("tiny-corpus")
    cfg = corpus.CorpusConfig(
        utterances_per_language=10, utterance_length_range=(6, 10), seed=1)
    items = corpus.generate_corpus(cfg, root)
    return {"dir": root, "cfg": cfg, "items": items,
            "manifest": root / "manifest.jsonl"}


@pytest.fixture(scope="session")
def small_ckpt(tiny_corpus):
    """Structurally complete Mandarin checkpoint; barely trained."""
    cfg = train.TrainConfig(epochs=5, seed=0, language_filter="zh")
    ckpt, history = train.train_pipeline(tiny_corpus["manifest"], cfg)
    return {"ckpt": ckpt, "history": history, **tiny_corpus}


def _steady_tone(hz, seconds, amplitude=0.5):
    t = np.arange(int(seconds * 16000)) / 16000
    seg = amplitude * np.sin(2 * np.pi * hz * t)
    ramp = np.linspace(0.0, 1.0, 80)
    seg[:80] *= ramp
    seg[-80:] *= ramp[::-1]
    return seg


@pytest.fixture(scope="session")
def adult_child(tmp_path_factory):
    """Mandarin corpus with one child and one adult speaker, plus a model
    trained long enough that speaker conditioning is audible.

    The generated corpus only contains utterances of four or more
    characters, so short texts are appended by hand: sustained-tone single
    characters and zero-padded two/three character rows. Without them the
    model never sees an early stop and cannot end a short synthesis.
    """
    root = tmp_path_factory.mktemp("adult-child")
    table = corpus.default_alphabet("zh")
    child = corpus.SpeakerProfile("zh-child-0", "child", 1.5, "zh")
    adult = corpus.SpeakerProfile("zh-adult-0", "adult", 1.0, "zh")
    cfg = corpus.CorpusConfig(
        alphabets={"zh": table}, speakers=(child, adult),
        utterances_per_language=64, utterance_length_range=(4, 10), seed=11)
    corpus.generate_corpus(cfg, root)

    texts = (["一"] * 6 + ["人"] * 6
             + ["一人", "人一"] * 3 + ["一人一", "人一人"] * 3)
    with open(root / "manifest.jsonl", "a", encoding="utf-8") as f:
        j = 0
        for spk in (adult, child):
            for txt in texts:
                if len(txt) == 1:
                    hz = dict(table.entries)[txt] * spk.pitch_scale
                    samples = _steady_tone(hz, 0.2)
                else:
                    rendered = corpus.render_text(txt, table, spk).samples
                    samples = np.concatenate([rendered, np.zeros(3200)])
                utt = f"pad-{j:02d}"
                dsp.write_wav(root / "wav" / f"{utt}.wav",
                              dsp.Waveform(samples, 16000))
                f.write(json.dumps({
                    "utterance_id": utt, "text": txt, "language": "zh",
                    "speaker_id": spk.speaker_id,
                    "age_group": spk.age_group,
                    "pitch_scale": spk.pitch_scale,
                    "audio_path": f"wav/{utt}.wav", "split": "train",
                }, ensure_ascii=False) + "\n")
                j += 1

    items = corpus.load_manifest(root / "manifest.jsonl",
                                 alphabets={"zh": table})
    ckpt, history = train.train_pipeline(
        root / "manifest.jsonl",
        train.TrainConfig(epochs=80, seed=0, language_filter="zh"))
    child_item = next(i for i in items if i.speaker.age_group == "child"
                      and not i.utterance_id.startswith("pad"))
    adult_item = next(i for i in items if i.speaker.age_group == "adult"
                      and not i.utterance_id.startswith("pad"))
    return {
        "dir": root, "cfg": cfg, "items": items, "ckpt": ckpt,
        "history": history, "manifest": root / "manifest.jsonl",
        "table": table,
        "child_ref": dsp.read_wav(root / child_item.audio_path),
        "adult_ref": dsp.read_wav(root / adult_item.audio_path),
    }


@pytest.fixture(scope="session")
def divergent(tmp_path_factory):
    """Two languages sharing the characters a/b but with disjoint tone
    tables, and a single model trained on both. The only way to emit the
    right tones for a text is to use the language identifier."""
    root = tmp_path_factory.mktemp("divergent")
    cfg = corpus.CorpusConfig(
        alphabets={"zh": corpus.AlphabetTable("zh", (("a", 300.0), ("b", 500.0))),
                   "ta": corpus.AlphabetTable("ta", (("a", 800.0), ("b", 1100.0)))},
        speakers=(corpus.SpeakerProfile("zh-child-0", "child", 1.5, "zh"),
                  corpus.SpeakerProfile("ta-child-0", "child", 1.5, "ta")),
        utterances_per_language=24, utterance_length_range=(8, 12), seed=12)
    items = corpus.generate_corpus(cfg, root)
    ckpt, _ = train.train_pipeline(
        root / "manifest.jsonl",
        train.TrainConfig(epochs=20, seed=0, language_filter=None))
    return {
        "dir": root, "cfg": cfg, "items": items, "ckpt": ckpt,
        "manifest": root / "manifest.jsonl",
        "ref": dsp.read_wav(root / items[0].audio_path),
    }
