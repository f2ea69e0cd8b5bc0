"""Deterministic 16-dim voice embedding separating child from adult audio.

Features are closed-form statistics (pitch, spectral centroid, band
energies, level, zero crossings) z-scored against fixed constants and
L2-normalized. The constants were calibrated once on the default synthetic
corpus and are frozen here so embeddings are stable across runs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dsp
from .errors import DataError

EMBED_DIM = 16
MIN_SECONDS = 0.2

# Frozen z-score constants (mean, scale) per feature. Scales for the energy
# features are kept wide so loudness changes move the embedding only
# slightly; pitch features carry the age contrast.
FEATURE_MEANS = np.array([
    6.22, 0.43, 0.99,          # log-pitch mean / std / voiced fraction
    651.5, 213.6,              # spectral centroid mean / std
    -5.34, 0.08, -1.28, -6.63, -9.99, -11.47, -12.28, -12.65,  # band log-energies
    0.33, 0.079, 0.0,          # rms, zero-crossing rate, bias
])
FEATURE_SCALES = np.array([
    0.17, 0.04, 0.05,
    150.0, 60.0,
    8.0, 8.0, 8.0, 8.0, 8.0, 8.0, 8.0, 8.0,
    0.8, 0.03, 1.0,
])


@dataclass(frozen=True)
class SpeakerEmbedding:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if v.shape != (EMBED_DIM,):
            raise DataError(f"embedding must have {EMBED_DIM} components")
        if not np.all(np.isfinite(v)):
            raise DataError("embedding contains non-finite components")
        if abs(np.linalg.norm(v) - 1.0) > 1e-6:
            raise DataError("embedding must be unit length")


def raw_features(w: dsp.Waveform) -> np.ndarray:
    """The 16 unnormalized features, in documented order."""
    if w.duration_s < MIN_SECONDS:
        raise DataError(
            f"need at least {MIN_SECONDS} s of audio, got {w.duration_s:.3f} s"
        )
    x = w.samples

    pitches = dsp.estimate_pitch(w)
    voiced = pitches[pitches > 0]
    if voiced.size:
        logp = np.log(voiced)
        pitch_mean = float(np.mean(logp))
        pitch_std = float(np.std(logp))
    else:
        pitch_mean = 0.0
        pitch_std = 0.0
    voiced_frac = float(voiced.size / pitches.size) if pitches.size else 0.0

    spec = np.abs(dsp.stft(w))
    bin_hz = np.arange(spec.shape[1]) * w.sample_rate_hz / dsp_n_fft(spec)
    totals = spec.sum(axis=1)
    ok = totals > 1e-12
    centroids = np.zeros(spec.shape[0])
    centroids[ok] = (spec[ok] * bin_hz[None, :]).sum(axis=1) / totals[ok]
    cent_mean = float(np.mean(centroids))
    cent_std = float(np.std(centroids))

    mel = dsp.mel_spectrogram(w).frames  # (F, 40)
    bands = mel.reshape(mel.shape[0], 8, mel.shape[1] // 8).mean(axis=(0, 2))

    rms = float(np.sqrt(np.mean(x * x)))
    zcr = float(np.mean(x[1:] * x[:-1] < 0.0)) if len(x) > 1 else 0.0

    return np.concatenate([
        [pitch_mean, pitch_std, voiced_frac, cent_mean, cent_std],
        bands,
        [rms, zcr, 1.0],
    ])


def dsp_n_fft(spec: np.ndarray) -> int:
    """n_fft implied by an rfft bin count."""
    return 2 * (spec.shape[1] - 1)


def extract_embedding(w: dsp.Waveform) -> SpeakerEmbedding:
    """z-score the raw features against the frozen constants, L2-normalize."""
    feats = raw_features(w)
    z = (feats - FEATURE_MEANS) / FEATURE_SCALES
    norm = np.linalg.norm(z)
    if norm < 1e-12:
        # Degenerate all-mean input: fall back to the bias direction.
        z = np.zeros(EMBED_DIM)
        z[-1] = 1.0
        norm = 1.0
    return SpeakerEmbedding(values=z / norm)


def cosine_similarity(a: SpeakerEmbedding, b: SpeakerEmbedding) -> float:
    return float(np.dot(a.values, b.values))
