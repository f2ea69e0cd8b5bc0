"""Training loop: token-budget batching, Adam, per-epoch validation.

Trains the speech-token LM and the flow decoder jointly on a corpus
manifest, evaluating validation loss (LM KL + flow regression) after every
epoch and returning the checkpoint of the best epoch (ties go to the
earliest). LM inputs are teacher-forced on lightly corrupted token
histories while the loss still scores the clean sequence, so generation
does not collapse the first time a sampled token differs from the ground
truth. Fully seeded; identical inputs produce identical checkpoints.
"""
from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import corpus, dsp, flowdec, speaker, speechcodec, textfront, tokenlm
from .checkpoint import Checkpoint
from .errors import ConfigurationError, DataError, NumericError

# One LM update per batch is matched by several cheap flow updates on fresh
# frame subsamples: the per-frame MLP sees far fewer effective examples per
# batch than the LM does tokens, and it needs the extra steps to converge
# within the epoch budget.
FLOW_FRAMES_PER_STEP = 512
FLOW_UPDATES_PER_BATCH = 32


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    token_budget: int = 2048
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    language_filter: str | None = None
    codebook_k: int = 8
    codebook_iters: int = 50
    # Probability that an input speech token is replaced by a uniform draw
    # while the loss keeps scoring the clean target sequence.
    exposure_noise: float = 0.25

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.language_filter is not None and \
                self.language_filter not in corpus.LANGUAGES:
            raise ConfigurationError(
                f"unknown language filter {self.language_filter!r}"
            )
        if not 0.0 <= self.exposure_noise < 1.0:
            raise ConfigurationError("exposure_noise must lie in [0, 1)")


def make_batches(lengths, token_budget: int, seed: int, epoch: int):
    """Greedy token-budget packing; returns batches of input indices.

    Indices are shuffled under a generator seeded with seed XOR epoch, then
    stably sorted by length, then packed left to right while the running
    length sum stays within the budget.
    """
    lengths = list(lengths)
    for i, n in enumerate(lengths):
        if n > token_budget:
            raise DataError(
                f"sequence {i} of length {n} exceeds token budget {token_budget}"
            )
    rng = np.random.default_rng(seed ^ epoch)
    order = [int(i) for i in rng.permutation(len(lengths))]
    order.sort(key=lambda i: lengths[i])  # stable: shuffle breaks length ties
    batches = []
    current = []
    total = 0
    for i in order:
        if current and total + lengths[i] > token_budget:
            batches.append(current)
            current = []
            total = 0
        current.append(i)
        total += lengths[i]
    if current:
        batches.append(current)
    return batches


class AdamState:
    """Per-tensor first/second moment accumulators."""

    def __init__(self, params: dict):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale gradients in place to a global L2 norm cap; returns the norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm > 0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig):
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bias1 = 1.0 - b1 ** state.t
    bias2 = 1.0 - b2 ** state.t
    for k, p in params.items():
        g = grads[k]
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        mhat = state.m[k] / bias1
        vhat = state.v[k] / bias2
        p -= cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)


@dataclass
class _Sequence:
    layout: tokenlm.InputLayout
    mel_z: np.ndarray     # (F, M) ground-truth mel in flow space
    coarse_z: np.ndarray  # (F, M) codebook reconstruction in flow space
    spk: np.ndarray       # (16,)

    @property
    def length(self) -> int:
        return self.layout.total_len


def _flow_seed(seed: int, epoch: int, step: int) -> int:
    return (seed * 1_000_003 + epoch * 10_007 + step * 101) % (2 ** 31)


def _prepare(items, base_dir, cb, lm_cfg):
    """Load audio and build per-utterance training sequences."""
    base = Path(base_dir)
    seqs = []
    for item in items:
        wave = dsp.read_wav(base / item.audio_path)
        mel = dsp.mel_spectrogram(wave)
        emb = speaker.extract_embedding(wave)
        text = textfront.encode_text(item.text, item.language)
        tokens = speechcodec.encode_speech(mel, cb, append_eos=False)
        layout = tokenlm.build_input(text, emb, tokens, lm_cfg)
        coarse = speechcodec.decode_speech(tokens, cb).frames
        seqs.append(_Sequence(
            layout=layout,
            mel_z=flowdec.to_flow_space(mel.frames),
            coarse_z=flowdec.to_flow_space(coarse),
            spk=emb.values,
        ))
    return seqs


def _flow_batch(seqs, indices, rng_seed, limit=FLOW_FRAMES_PER_STEP):
    """Gather (x1, cond) frame pairs from the batch, subsampled to a cap."""
    x1 = np.concatenate([seqs[i].mel_z for i in indices], axis=0)
    cond_mel = np.concatenate([seqs[i].coarse_z for i in indices], axis=0)
    spk = np.concatenate(
        [np.tile(seqs[i].spk, (seqs[i].mel_z.shape[0], 1)) for i in indices],
        axis=0,
    )
    cond = np.concatenate([cond_mel, spk], axis=1)
    if x1.shape[0] > limit:
        rng = np.random.default_rng(rng_seed)
        pick = rng.choice(x1.shape[0], size=limit, replace=False)
        pick.sort()
        x1, cond = x1[pick], cond[pick]
    return x1, cond


def train_pipeline(manifest_path, cfg: TrainConfig,
                   lm_cfg: tokenlm.LMConfig | None = None,
                   flow_cfg: flowdec.FlowConfig | None = None,
                   log=None):
    """Full training run; returns (Checkpoint, per-epoch history)."""
    manifest_path = Path(manifest_path)
    items = corpus.load_manifest(manifest_path)
    if cfg.language_filter is not None:
        items = [i for i in items if i.language == cfg.language_filter]
    train_items = [i for i in items if i.split == "train"]
    val_items = [i for i in items if i.split == "val"]
    if not train_items:
        raise DataError("no training items after language filtering")
    if not val_items:
        raise DataError("no validation items after language filtering")

    corpus_digest = hashlib.sha256(manifest_path.read_bytes()).hexdigest()
    base_dir = manifest_path.parent

    # codebook from training-split audio only
    train_mels = [
        dsp.mel_spectrogram(dsp.read_wav(base_dir / item.audio_path))
        for item in train_items
    ]
    cb = speechcodec.train_codebook(
        train_mels, k=cfg.codebook_k, iters=cfg.codebook_iters, seed=cfg.seed
    )

    if lm_cfg is None:
        lm_cfg = tokenlm.LMConfig(speech_vocab=cb.k + 1, seed=cfg.seed)
    if lm_cfg.speech_vocab != cb.k + 1:
        raise ConfigurationError("LM speech vocabulary must equal codebook size + 1")
    if flow_cfg is None:
        flow_cfg = flowdec.FlowConfig(n_mels=cb.n_mels, seed=cfg.seed)

    train_seqs = _prepare(train_items, base_dir, cb, lm_cfg)
    val_seqs = _prepare(val_items, base_dir, cb, lm_cfg)

    lengths = [s.length for s in train_seqs]
    if max(lengths) > cfg.token_budget:
        raise ConfigurationError(
            f"longest sequence ({max(lengths)}) exceeds token budget "
            f"({cfg.token_budget})"
        )

    lm_params = tokenlm.init_params(lm_cfg)
    flow_params = flowdec.init_params(flow_cfg)
    lm_opt = AdamState(lm_params)
    flow_opt = AdamState(flow_params)

    val_flow_seed = _flow_seed(cfg.seed, 999_983, 0)
    val_x1, val_cond = _flow_batch(
        val_seqs, range(len(val_seqs)), rng_seed=val_flow_seed
    )

    noise_rng = np.random.default_rng([cfg.seed, 0x0E])
    best = None
    history = []
    step = 0
    flow_step = 0
    for epoch in range(1, cfg.epochs + 1):
        batches = make_batches(lengths, cfg.token_budget, cfg.seed, epoch - 1)
        epoch_lm_loss = 0.0
        for batch in batches:
            layouts, targets = [], []
            for i in batch:
                clean = train_seqs[i].layout.speech_ids
                noisy = clean.copy()
                mask = noise_rng.random(len(clean)) < cfg.exposure_noise
                noisy[mask] = noise_rng.integers(0, cb.k, size=int(mask.sum()))
                layouts.append(replace(train_seqs[i].layout, speech_ids=noisy))
                targets.append(np.concatenate([clean, [lm_cfg.eos_id]]))
            try:
                lm_loss, lm_grads = tokenlm.backward(
                    lm_params, lm_cfg, layouts, target_overrides=targets
                )
                clip_gradients(lm_grads, cfg.grad_clip)
                adam_step(lm_params, lm_grads, lm_opt, cfg)

                for _ in range(FLOW_UPDATES_PER_BATCH):
                    fseed = _flow_seed(cfg.seed, epoch - 1, flow_step)
                    x1, cond = _flow_batch(train_seqs, batch, rng_seed=fseed)
                    _, flow_grads = flowdec.cfm_backward(
                        flow_params, flow_cfg, x1, cond, seed=fseed
                    )
                    clip_gradients(flow_grads, cfg.grad_clip)
                    adam_step(flow_params, flow_grads, flow_opt, cfg)
                    flow_step += 1
            except NumericError as exc:
                raise NumericError(
                    f"epoch {epoch} step {step}: {exc}"
                ) from exc

            epoch_lm_loss += lm_loss
            step += 1

        val_lm = tokenlm.batch_loss(lm_params, lm_cfg, [s.layout for s in val_seqs])
        val_flow = flowdec.cfm_loss(
            flow_params, flow_cfg, val_x1, val_cond, seed=val_flow_seed
        )
        val_loss = val_lm + val_flow
        history.append({
            "epoch": epoch,
            "train_lm_loss": epoch_lm_loss / max(len(batches), 1),
            "val_lm_loss": val_lm,
            "val_flow_loss": val_flow,
            "val_loss": val_loss,
        })
        if log is not None:
            log(history[-1])
        if best is None or val_loss < best["val_loss"]:
            best = {
                "val_loss": val_loss,
                "epoch": epoch,
                "lm_params": copy.deepcopy(lm_params),
                "flow_params": copy.deepcopy(flow_params),
            }

    ckpt = Checkpoint(
        lm_config=lm_cfg,
        lm_params=best["lm_params"],
        flow_config=flow_cfg,
        flow_params=best["flow_params"],
        codebook=cb,
        corpus_digest=corpus_digest,
        epoch=best["epoch"],
        val_loss=best["val_loss"],
        language_filter=cfg.language_filter,
    )
    return ckpt, history
