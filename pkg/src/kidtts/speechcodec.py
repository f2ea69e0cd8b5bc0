"""Discrete speech tokens: k-means codebook over mel frames.

Tokens are nearest-centroid assignments of individual mel frames; decoding
replaces each token with its centroid, giving the coarse mel that
conditions the flow decoder.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import MelSpectrogram
from .errors import DataError

CODEBOOK_VERSION = "kmeans-v1"


@dataclass(frozen=True)
class Codebook:
    centroids: np.ndarray  # (K, M)
    version: str = CODEBOOK_VERSION

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64)
        object.__setattr__(self, "centroids", c)
        if c.ndim != 2 or c.shape[0] < 2:
            raise DataError("codebook needs at least two centroid rows")
        if not np.all(np.isfinite(c)):
            raise DataError("codebook contains non-finite entries")
        # duplicate rows would make nearest-centroid ids ambiguous
        uniq = np.unique(c, axis=0)
        if uniq.shape[0] != c.shape[0]:
            raise DataError("codebook contains identical centroids")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def n_mels(self) -> int:
        return self.centroids.shape[1]

    @property
    def eos_id(self) -> int:
        return self.k


def _pairwise_sq(frames: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances (n, K) without forming explicit diffs."""
    f2 = np.sum(frames ** 2, axis=1)[:, None]
    c2 = np.sum(centroids ** 2, axis=1)[None, :]
    d = f2 + c2 - 2.0 * frames @ centroids.T
    return np.maximum(d, 0.0)


def _kmeans_pp(frames: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = frames.shape[0]
    centroids = np.empty((k, frames.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = frames[first]
    d2 = np.sum((frames - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with chosen centroids
            centroids[i] = frames[int(rng.integers(n))]
            continue
        probs = d2 / total
        idx = int(rng.choice(n, p=probs))
        centroids[i] = frames[idx]
        d2 = np.minimum(d2, np.sum((frames - centroids[i]) ** 2, axis=1))
    return centroids


def train_codebook(mels, k: int = 128, iters: int = 50, seed: int = 0) -> Codebook:
    """Lloyd's k-means with k-means++ seeding over all frames of all inputs.

    Runs until `iters` iterations or relative inertia change < 1e-6. Empty
    clusters are reseeded to the point farthest from its assigned centroid.
    Deterministic for fixed inputs and seed.
    """
    frames = np.concatenate([m.frames for m in mels], axis=0).astype(np.float64)
    n = frames.shape[0]
    if n < k:
        raise DataError(f"{n} frames cannot seed {k} clusters")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(frames, k, rng)
    prev_inertia = np.inf
    for _ in range(iters):
        d = _pairwise_sq(frames, centroids)
        assign = np.argmin(d, axis=1)
        inertia = float(d[np.arange(n), assign].sum())
        new_centroids = np.zeros_like(centroids)
        counts = np.bincount(assign, minlength=k)
        np.add.at(new_centroids, assign, frames)
        nonempty = counts > 0
        new_centroids[nonempty] /= counts[nonempty, None]
        if not np.all(nonempty):
            dists = d[np.arange(n), assign]
            for ci in np.flatnonzero(~nonempty):
                far = int(np.argmax(dists))
                new_centroids[ci] = frames[far]
                dists[far] = 0.0  # don't reuse the same point
        centroids = new_centroids
        if prev_inertia < np.inf:
            denom = max(prev_inertia, 1e-12)
            if abs(prev_inertia - inertia) / denom < 1e-6:
                break
        prev_inertia = inertia
    # nudge exact duplicates apart; required by the Codebook invariant
    _, first_idx = np.unique(centroids, axis=0, return_index=True)
    dup = np.setdiff1d(np.arange(k), first_idx)
    for j, ci in enumerate(dup):
        centroids[ci] = centroids[ci] + (j + 1) * 1e-9
    return Codebook(centroids=centroids)


def encode_speech(m: MelSpectrogram, cb: Codebook, append_eos: bool = True):
    """Nearest-centroid token per frame (ties broken toward the lowest id)."""
    if m.n_mels != cb.n_mels:
        raise DataError(f"mel dim {m.n_mels} does not match codebook {cb.n_mels}")
    if m.num_frames == 0:
        tokens = []
    else:
        d = _pairwise_sq(m.frames, cb.centroids)
        tokens = [int(t) for t in np.argmin(d, axis=1)]  # argmin takes lowest id on ties
    if append_eos:
        tokens.append(cb.eos_id)
    return tokens


def decode_speech(tokens, cb: Codebook, hop: int = 128, n_fft: int = 512,
                  sample_rate_hz: int = 16000) -> MelSpectrogram:
    """Replace tokens with centroid frames; a trailing EOS is dropped."""
    ids = list(tokens)
    if ids and ids[-1] == cb.eos_id:
        ids = ids[:-1]
    for t in ids:
        if not (0 <= t < cb.k):
            raise DataError(f"token id {t} outside codebook of size {cb.k}")
    frames = cb.centroids[np.asarray(ids, dtype=np.int64)] if ids else \
        np.zeros((0, cb.n_mels))
    return MelSpectrogram(
        frames=frames, frame_hop_samples=hop, n_fft=n_fft,
        sample_rate_hz=sample_rate_hz, n_mels=cb.n_mels,
    )
