"""End-to-end inference: (text, language, reference voice) -> waveform.

Composes the text frontend, the speech-token LM, the codebook decoder, the
flow-matching refiner, and Griffin-Lim. The reference waveform is embedded
at synthesis time, so the output voice is whatever the reference sounds
like; no speaker identities are stored in the checkpoint.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from . import dsp, flowdec, speaker, speechcodec, textfront, tokenlm
from .checkpoint import Checkpoint
from .errors import DataError, StageError


@dataclass(frozen=True)
class SynthRequest:
    """One batch synthesis job.

    speaker_id, age_group and pitch_scale describe the reference voice and
    are echoed into the result manifest so downstream scoring knows how to
    interpret the audio; they do not affect synthesis itself.
    """

    utterance_id: str
    text: str
    language: str
    ref_audio_path: str
    seed: int = 0
    speaker_id: str = ""
    age_group: str = ""
    pitch_scale: float = 1.0


def request_for_item(item, base_dir, seed: int = 0) -> SynthRequest:
    """Build a request that re-synthesizes a corpus utterance in its own voice."""
    return SynthRequest(
        utterance_id=item.utterance_id,
        text=item.text,
        language=item.language,
        ref_audio_path=str(Path(base_dir) / item.audio_path),
        seed=seed,
        speaker_id=item.speaker.speaker_id,
        age_group=item.speaker.age_group,
        pitch_scale=item.speaker.pitch_scale,
    )


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:
        raise StageError(name, exc) from exc


def synthesize(ckpt: Checkpoint, text: str, language: str,
               ref_audio: dsp.Waveform, seed: int = 0,
               temperature: float = 0.8, top_k: int = 16,
               max_tokens: int = 512) -> dsp.Waveform:
    """Synthesize text in the reference speaker's voice.

    Deterministic for fixed (checkpoint, inputs, seed). Stage failures are
    wrapped in StageError carrying the stage name. The output is
    peak-normalized; its length is frame_hop * (n_frames - 1) samples, or
    slightly longer for outputs shorter than one analysis window, which
    Griffin-Lim pads to a full window.
    """
    emb = _stage("speaker", speaker.extract_embedding, ref_audio)
    seq = _stage("textfront", textfront.encode_text, text, language)
    tokens = _stage(
        "tokenlm", tokenlm.sample, ckpt.lm_params, ckpt.lm_config, seq, emb,
        temperature=temperature, top_k=top_k, max_tokens=max_tokens, seed=seed,
    )
    if not tokens:
        raise DataError(
            f"empty synthesis for {text!r} ({language}): "
            "the model produced no speech tokens"
        )
    coarse = _stage("speechcodec", speechcodec.decode_speech, tokens, ckpt.codebook)
    mel = _stage(
        "flowdec", flowdec.sample_mel, ckpt.flow_params, ckpt.flow_config,
        coarse, emb.values, seed,
    )
    return _stage("vocoder", dsp.griffin_lim, mel, seed=seed)


def synthesize_batch(ckpt: Checkpoint, requests, output_dir, log=None,
                     temperature: float = 0.8, top_k: int = 16,
                     max_tokens: int = 512):
    """Synthesize every request into output_dir; one WAV per utterance id.

    A failing request is recorded in the returned manifest rows (error field
    set, audio_path null) without aborting the rest. Rows mirror the corpus
    manifest fields and are also written to output_dir/manifest.jsonl.
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for req in requests:
        row = {
            "utterance_id": req.utterance_id,
            "text": req.text,
            "language": req.language,
            "speaker_id": req.speaker_id,
            "age_group": req.age_group,
            "pitch_scale": req.pitch_scale,
            "audio_path": None,
            "error": None,
        }
        try:
            ref = dsp.read_wav(req.ref_audio_path)
            wave = synthesize(
                ckpt, req.text, req.language, ref, seed=req.seed,
                temperature=temperature, top_k=top_k, max_tokens=max_tokens,
            )
            name = f"{req.utterance_id}.wav"
            dsp.write_wav(out / name, wave)
            row["audio_path"] = name
        except Exception as exc:
            row["error"] = str(exc)
        rows.append(row)
        if log is not None:
            log(row)
    with open(out / "manifest.jsonl", "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
    return rows
