"""Signal-processing core: STFT, mel features, Griffin-Lim, pitch, MCD.

All operations are pure functions over immutable inputs and may be called
concurrently. Defaults target the 16 kHz desk-scale pipeline (n_fft 512,
hop 128, 40 mel bands).
"""
from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct

from .errors import DataError

MEL_FLOOR = 1e-10
PEAK_TARGET = 0.9
# Below this peak the reconstruction is floor-level noise; normalizing it
# up to PEAK_TARGET would turn silence into full-scale garbage.
SILENCE_PEAK = 1e-3

# MCD constant: 10 * sqrt(2) / ln(10)
_MCD_K = 10.0 * np.sqrt(2.0) / np.log(10.0)


@dataclass(frozen=True)
class Waveform:
    """Mono audio in [-1, 1] at a fixed sample rate."""

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))
        if self.samples.ndim != 1:
            raise DataError("waveform must be one-dimensional")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz


@dataclass(frozen=True)
class MelSpectrogram:
    """Log-mel energies, frames x bands (natural log, floored at 1e-10)."""

    frames: np.ndarray
    frame_hop_samples: int
    n_fft: int
    sample_rate_hz: int
    n_mels: int

    def __post_init__(self):
        object.__setattr__(self, "frames", np.asarray(self.frames, dtype=np.float64))
        if self.frames.ndim != 2 or self.frames.shape[1] != self.n_mels:
            raise DataError(
                f"mel frames must be F x {self.n_mels}, got {self.frames.shape}"
            )
        if self.frames.size and not np.all(np.isfinite(self.frames)):
            raise DataError("mel spectrogram contains non-finite entries")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def hann_window(n_fft: int) -> np.ndarray:
    """Periodic Hann window (peak value exactly 1 at n_fft // 2)."""
    n = np.arange(n_fft)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / n_fft)


def _check_fft_args(length: int, n_fft: int, hop: int) -> None:
    if n_fft < 2 or (n_fft & (n_fft - 1)) != 0:
        raise DataError(f"n_fft must be a power of two, got {n_fft}")
    if hop <= 0 or hop > n_fft:
        raise DataError(f"hop must satisfy 0 < hop <= n_fft, got {hop}")
    if length < n_fft:
        raise DataError(
            f"waveform of {length} samples is shorter than one {n_fft}-sample window"
        )


def stft(w: Waveform, n_fft: int = 512, hop: int = 128) -> np.ndarray:
    """Short-time Fourier transform with centered, reflect-padded frames.

    Frame t is the Hann-windowed slice centered at sample t * hop; the
    result has 1 + len(w) // hop rows and n_fft // 2 + 1 columns.
    """
    x = w.samples
    _check_fft_args(len(x), n_fft, hop)
    pad = n_fft // 2
    padded = np.pad(x, pad, mode="reflect")
    n_frames = 1 + len(x) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = padded[idx] * hann_window(n_fft)[None, :]
    return np.fft.rfft(frames, axis=1)


def istft(spec: np.ndarray, hop: int, length: int) -> np.ndarray:
    """Inverse STFT by weighted overlap-add with a Hann synthesis window.

    `length` is the number of output samples (pre-padding removed), matching
    the stft() convention of n_fft // 2 centering pad.
    """
    n_frames, n_bins = spec.shape
    n_fft = 2 * (n_bins - 1)
    win = hann_window(n_fft)
    frames = np.fft.irfft(spec, n=n_fft, axis=1) * win[None, :]
    total = n_fft + hop * (n_frames - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    wsq = win * win
    for t in range(n_frames):
        start = t * hop
        out[start : start + n_fft] += frames[t]
        norm[start : start + n_fft] += wsq
    out = out / np.maximum(norm, 1e-12)
    pad = n_fft // 2
    return out[pad : pad + length]


def hz_to_mel(f):
    """HTK mel scale."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    n_fft: int, sample_rate_hz: int, n_mels: int, fmin: float, fmax: float
) -> np.ndarray:
    """Triangular HTK-mel filters (peak 1) over rfft bin frequencies.

    Returns an (n_mels, n_fft // 2 + 1) weight matrix applied to the power
    spectrum.
    """
    if n_mels < 2:
        raise DataError(f"n_mels must be >= 2, got {n_mels}")
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bin_hz = np.arange(n_fft // 2 + 1) * sample_rate_hz / n_fft
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(n_mels):
        lo, center, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (bin_hz - lo) / (center - lo)
        down = (hi - bin_hz) / (hi - center)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def mel_filter_centers(
    n_mels: int = 40, fmin: float = 0.0, fmax: float = 8000.0
) -> np.ndarray:
    """Center frequencies (Hz) of the triangular filters."""
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    return edges[1:-1]


def mel_spectrogram(
    w: Waveform,
    n_fft: int = 512,
    hop: int = 128,
    n_mels: int = 40,
    fmin: float = 0.0,
    fmax: float = 8000.0,
) -> MelSpectrogram:
    """Log-mel spectrogram: power spectrum -> mel filters -> floor -> ln."""
    spec = stft(w, n_fft, hop)
    power = np.abs(spec) ** 2
    fb = mel_filterbank(n_fft, w.sample_rate_hz, n_mels, fmin, fmax)
    mel = power @ fb.T
    return MelSpectrogram(
        frames=np.log(np.maximum(mel, MEL_FLOOR)),
        frame_hop_samples=hop,
        n_fft=n_fft,
        sample_rate_hz=w.sample_rate_hz,
        n_mels=n_mels,
    )


def mel_to_magnitude(m: MelSpectrogram, fmin: float = 0.0, fmax: float = 8000.0) -> np.ndarray:
    """Approximate linear magnitude spectrogram from log-mel energies.

    Uses the Moore-Penrose pseudo-inverse of the filterbank on the power
    domain, clipped at zero before the square root.
    """
    fb = mel_filterbank(m.n_fft, m.sample_rate_hz, m.n_mels, fmin, fmax)
    power = np.maximum(np.exp(m.frames) @ np.linalg.pinv(fb).T, 0.0)
    return np.sqrt(power)


def griffin_lim(m: MelSpectrogram, iterations: int = 60, seed: int = 0) -> Waveform:
    """Reconstruct a waveform from log-mel energies.

    Pseudo-inverts the mel filterbank, then runs Griffin-Lim phase recovery
    from a seeded random phase init and peak-normalizes to 0.9 (floor-level
    silence is passed through un-normalized). Deterministic for a fixed
    (mel, seed).
    """
    if iterations < 1:
        raise DataError(f"iterations must be >= 1, got {iterations}")
    if m.num_frames == 0:
        raise DataError("cannot invert an empty mel spectrogram")
    target = mel_to_magnitude(m)
    hop = m.frame_hop_samples
    length = (m.num_frames - 1) * hop
    if length < m.n_fft:
        # Very short inputs: pad frame count virtually by repeating the last
        # frame so one full window fits, then trim.
        reps = int(np.ceil((m.n_fft - length) / hop)) + 1
        target = np.vstack([target, np.tile(target[-1:], (reps, 1))])
        length = (target.shape[0] - 1) * hop

    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(target.shape))
    x = istft(target * phase, hop, length)
    for _ in range(iterations):
        spec = stft(Waveform(x, m.sample_rate_hz), m.n_fft, hop)
        spec = spec[: target.shape[0]]
        mag = np.abs(spec)
        phase = spec / np.maximum(mag, 1e-12)
        x = istft(target * phase, hop, length)

    out_len = (m.num_frames - 1) * hop
    x = x[:out_len] if out_len >= m.n_fft else x
    peak = np.max(np.abs(x))
    if peak >= SILENCE_PEAK:
        x = x * (PEAK_TARGET / peak)
    return Waveform(np.clip(x, -1.0, 1.0), m.sample_rate_hz)


def spectral_convergence(x: Waveform, target_mag: np.ndarray, n_fft: int, hop: int) -> float:
    """|| |STFT(x)| - target || / ||target||, the Griffin-Lim objective."""
    mag = np.abs(stft(x, n_fft, hop))[: target_mag.shape[0]]
    denom = np.linalg.norm(target_mag)
    return float(np.linalg.norm(mag - target_mag) / max(denom, 1e-12))


def estimate_pitch(
    w: Waveform, frame_ms: float = 32.0, hop_ms: float = 16.0
) -> np.ndarray:
    """Per-frame pitch in Hz via normalized autocorrelation (0 = unvoiced).

    Peak search covers 80-2000 Hz; frames whose best normalized correlation
    falls below 0.5 are reported as unvoiced. Frames are taken from sample 0
    without padding, so a frame lies fully inside the waveform.
    """
    sr = w.sample_rate_hz
    if sr < 8000:
        raise DataError(f"sample rate must be >= 8000 Hz, got {sr}")
    frame_len = int(round(sr * frame_ms / 1000.0))
    hop = int(round(sr * hop_ms / 1000.0))
    x = w.samples
    if len(x) < frame_len:
        return np.zeros(0)

    lag_min = max(2, int(np.floor(sr / 2000.0)))
    lag_max = min(int(np.ceil(sr / 80.0)), frame_len - 1)
    n_frames = 1 + (len(x) - frame_len) // hop
    pitches = np.zeros(n_frames)
    for t in range(n_frames):
        frame = x[t * hop : t * hop + frame_len]
        energy = frame * frame
        total = float(np.sum(energy))
        if total <= 1e-12:
            continue
        # full autocorrelation via FFT
        nfft = 1 << int(np.ceil(np.log2(2 * frame_len)))
        spec = np.fft.rfft(frame, nfft)
        ac = np.fft.irfft(spec * np.conj(spec), nfft)[: frame_len]
        cum = np.concatenate([[0.0], np.cumsum(energy)])
        # one extra lag each side: interpolation context for edge peaks
        lo = max(1, lag_min - 1)
        hi = min(frame_len - 1, lag_max + 1)
        lags = np.arange(lo, hi + 1)
        # energies of the two shifted segments for each lag
        e_head = cum[frame_len - lags] - cum[0]
        e_tail = cum[frame_len] - cum[lags]
        denom = np.sqrt(np.maximum(e_head * e_tail, 1e-24))
        r = ac[lags] / denom
        in_range = (lags >= lag_min) & (lags <= lag_max)
        r_max = float(np.max(r[in_range]))
        if r_max < 0.5:
            continue
        # A periodic frame correlates near 1 at every multiple of its period;
        # prefer the shortest-lag local peak within 10% of the global max so
        # subharmonics do not win on numerical noise.
        interior = (r[1:-1] >= r[:-2]) & (r[1:-1] >= r[2:])
        is_peak = np.concatenate([[r[0] >= r[1]], interior, [r[-1] >= r[-2]]])
        cand = np.flatnonzero(is_peak & in_range & (r >= 0.9 * r_max) & (r >= 0.5))
        if cand.size:
            best = int(cand[0])
        else:
            masked = np.where(in_range, r, -np.inf)
            best = int(np.argmax(masked))
        lag = float(lags[best])
        # parabolic interpolation around the peak when neighbors exist
        if 0 < best < len(lags) - 1:
            y0, y1, y2 = r[best - 1], r[best], r[best + 1]
            denom_p = y0 - 2.0 * y1 + y2
            if abs(denom_p) > 1e-12:
                delta = 0.5 * (y0 - y2) / denom_p
                if abs(delta) < 1.0:
                    lag += delta
        pitches[t] = sr / lag
    return pitches


def mel_cepstral_distortion(a: MelSpectrogram, b: MelSpectrogram) -> float:
    """Mean mel-cepstral distortion in dB over the aligned frame overlap.

    Cepstra are the orthonormal DCT-II of the log-mel rows; c0 is excluded.
    """
    if a.n_mels != b.n_mels:
        raise DataError(f"mel band mismatch: {a.n_mels} vs {b.n_mels}")
    n = min(a.num_frames, b.num_frames)
    if n == 0:
        raise DataError("no overlapping frames to compare")
    ca = dct(a.frames[:n], type=2, norm="ortho", axis=1)[:, 1:]
    cb = dct(b.frames[:n], type=2, norm="ortho", axis=1)[:, 1:]
    dist = np.linalg.norm(ca - cb, axis=1)
    return float(_MCD_K * np.mean(dist))


def write_wav(path, w: Waveform) -> None:
    """Write PCM 16-bit signed little-endian mono WAV."""
    data = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate_hz)
        f.writeframes(data.tobytes())


def read_wav(path) -> Waveform:
    """Read a PCM 16-bit mono WAV written by write_wav."""
    try:
        with wave.open(str(path), "rb") as f:
            if f.getnchannels() != 1:
                raise DataError(f"{path}: expected mono audio")
            if f.getsampwidth() != 2:
                raise DataError(f"{path}: expected 16-bit PCM")
            sr = f.getframerate()
            raw = f.readframes(f.getnframes())
    except wave.Error as exc:
        raise DataError(f"{path}: not a valid WAV file ({exc})") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    return Waveform(np.clip(samples, -1.0, 1.0), sr)
