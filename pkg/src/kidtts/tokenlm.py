"""Autoregressive speech-token transformer with hand-written backprop.

A decoder-only transformer predicts discrete speech tokens from a prefix of
[speaker embedding][language id][text bytes][speech start marker]. All math
is float64 numpy; gradients are exact (verified against central finite
differences in the test suite). Checkpoints downcast to float32 on disk.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from . import corpus
from .errors import DataError, NumericError
from .textfront import BOS_SPEECH, INPUT_VOCAB, TextTokenSeq

SPK_DIM = 16
LN_EPS = 1e-5


@dataclass(frozen=True)
class LMConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    input_vocab: int = INPUT_VOCAB
    speech_vocab: int = 129  # K tokens + terminal EOS id K
    max_seq: int = 768
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise DataError("d_model must be divisible by n_heads")
        if self.dropout != 0.0:
            raise DataError("dropout is fixed at 0 in this implementation")

    @property
    def eos_id(self) -> int:
        return self.speech_vocab - 1

    def to_json(self) -> dict:
        return {
            "d_model": self.d_model, "n_layers": self.n_layers,
            "n_heads": self.n_heads, "d_ff": self.d_ff,
            "input_vocab": self.input_vocab, "speech_vocab": self.speech_vocab,
            "max_seq": self.max_seq, "dropout": self.dropout, "seed": self.seed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "LMConfig":
        return cls(**d)


@dataclass(frozen=True)
class InputLayout:
    """Assembled LM input: ids plus the raw speaker vector.

    Positions: 0 speaker projection, 1..T text tokens (language id first),
    T+1 speech start marker, then speech tokens. Loss is evaluated at
    positions prefix_len-1 .. end, predicting speech tokens then EOS.
    """

    text_ids: np.ndarray     # (T,) including leading language id
    spk: np.ndarray          # (16,)
    speech_ids: np.ndarray   # (m,) ids < K; EOS appears only as a target

    @property
    def prefix_len(self) -> int:
        return len(self.text_ids) + 2

    @property
    def total_len(self) -> int:
        return self.prefix_len + len(self.speech_ids)


def build_input(seq_text: TextTokenSeq, spk, speech_ids, cfg: LMConfig) -> InputLayout:
    """Validate and assemble one training/inference layout."""
    spk = np.asarray(getattr(spk, "values", spk), dtype=np.float64)
    if spk.shape != (SPK_DIM,):
        raise DataError(f"speaker vector must have {SPK_DIM} components")
    speech_ids = np.asarray(list(speech_ids), dtype=np.int64)
    if speech_ids.size and (speech_ids.min() < 0 or speech_ids.max() >= cfg.eos_id):
        raise DataError("speech ids must lie in [0, K); EOS is target-only")
    text_ids = np.asarray(seq_text.tokens, dtype=np.int64)
    total = len(text_ids) + 2 + len(speech_ids)
    if total > cfg.max_seq:
        raise DataError(f"sequence of {total} positions exceeds max_seq {cfg.max_seq}")
    return InputLayout(text_ids=text_ids, spk=spk, speech_ids=speech_ids)


# Scale of the near-identity query/key init. Wq = Wk = MATCH_SCALE * I makes
# q.k' proportional to the autocorrelation of the positional encoding, which
# peaks where two positions are a small index offset apart. With the warped
# text indices above, that is exactly frame-to-own-character alignment, so
# the alignment circuit exists at step 0 and training only has to sharpen it.
# From a fully random init the same circuit does not form within the step
# budget this model trains under.
MATCH_SCALE = 3.0


def init_params(cfg: LMConfig) -> dict:
    """Seeded init: Gaussian weights, zero biases, unit layer norms.

    Input embeddings use a larger scale (0.7) than weight matrices (0.1) so
    byte identity is not drowned out by the unit-amplitude positional
    encoding added on top. Speech embeddings start near zero (0.02): the
    speech-side rows then begin as almost pure positional signal, which the
    near-identity query/key matrices (MATCH_SCALE above, plus slight noise
    to break head symmetry) turn into position-matching attention.
    """
    rng = np.random.default_rng(cfg.seed)
    d, ff, v_in, v_sp = cfg.d_model, cfg.d_ff, cfg.input_vocab, cfg.speech_vocab

    def w(*shape):
        return rng.normal(0.0, 0.1, size=shape)

    p = {
        "input_embed": rng.normal(0.0, 0.7, size=(v_in, d)),
        "speech_embed": rng.normal(0.0, 0.02, size=(v_sp, d)),
        "spk_w": w(SPK_DIM, d),
        "spk_b": np.zeros(d),
        "ln_f.g": np.ones(d),
        "ln_f.b": np.zeros(d),
        "out_w": w(d, v_sp),
        "out_b": np.zeros(v_sp),
    }
    eye = np.eye(d)
    for i in range(cfg.n_layers):
        p[f"l{i}.ln1.g"] = np.ones(d)
        p[f"l{i}.ln1.b"] = np.zeros(d)
        for name in ("wq", "wk"):
            p[f"l{i}.attn.{name}"] = MATCH_SCALE * eye + rng.normal(0.0, 0.02, size=(d, d))
        for name in ("wv", "wo"):
            p[f"l{i}.attn.{name}"] = w(d, d)
        for name in ("bq", "bk", "bv", "bo"):
            p[f"l{i}.attn.{name}"] = np.zeros(d)
        p[f"l{i}.ln2.g"] = np.ones(d)
        p[f"l{i}.ln2.b"] = np.zeros(d)
        p[f"l{i}.ff.w1"] = w(d, ff)
        p[f"l{i}.ff.b1"] = np.zeros(ff)
        p[f"l{i}.ff.w2"] = w(ff, d)
        p[f"l{i}.ff.b2"] = np.zeros(d)
    return p


def sinusoidal_pe(n_pos: int, d: int) -> np.ndarray:
    return pe_at(np.arange(n_pos, dtype=np.float64), d)


def pe_at(idx, d: int) -> np.ndarray:
    """Sinusoidal encoding rows evaluated at (possibly fractional) indices."""
    pos = np.asarray(idx, dtype=np.float64)[:, None]
    i = np.arange(d // 2)[None, :].astype(np.float64)
    angles = pos / np.power(10000.0, 2.0 * i / d)
    pe = np.zeros((pos.shape[0], d))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe


# Positional index stride between consecutive text characters, in speech-frame
# units: one 50 ms rendered character spans 0.050 * 16000 / 128 = 6.25 mel
# frames. Character c of the text is encoded near index 2 + c*stride while
# speech frame j sits at index 2 + j, so every frame and the character it
# realizes are a small bounded index offset apart regardless of text length.
# Alignment then needs only relative-offset attention, which sinusoidal
# encodings support directly; on a plain 0..L-1 grid the frame-to-character
# offset grows with position and the mapping is not learnable at this scale.
PE_CHAR_STRIDE = corpus.TONE_SECONDS * corpus.SAMPLE_RATE / 128.0


def _text_pe_idx(text_ids, stride: float) -> np.ndarray:
    """Warped indices for the [lang] + UTF-8 byte tokens of one text.

    The w bytes of a character occupy w evenly spaced slots centered inside
    the character's index cell, rotated one slot left: slot s holds byte
    (s + 1) % w. For the multi-byte scripts used here the script-specific
    prefix bytes land at the cell edges and the byte that actually
    distinguishes characters sits mid-cell, where the steady interior frames
    of the rendered tone attend.
    """
    idx = np.empty(len(text_ids), dtype=np.float64)
    idx[0] = 1.0

    def place(run, cell):
        w = len(run)
        for s in range(w):
            idx[run[(s + 1) % w]] = 2.0 + cell * stride + (s + 0.5) * stride / w

    cell = 0  # ordinal of the char held in run
    run = []  # byte positions of that char
    nchar = 0
    for p, b in enumerate(text_ids[1:], start=1):
        if b < 0x80 or b >= 0xC0:  # UTF-8 lead byte starts a char
            if run:
                place(run, cell)
            cell, run = nchar, [p]
            nchar += 1
        else:
            run.append(p)
    if run:
        place(run, cell)
    return idx


def _layout_pe_idx(layout: InputLayout) -> np.ndarray:
    """Per-position PE indices: speaker 0, text warped, marker 1, frames 2+j."""
    n_speech = len(layout.speech_ids)
    parts = [np.array([0.0]), _text_pe_idx(layout.text_ids, PE_CHAR_STRIDE),
             np.array([1.0]), 2.0 + np.arange(n_speech, dtype=np.float64)]
    return np.concatenate(parts)


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def _gelu_grad(x):
    phi = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return 0.5 * (1.0 + erf(x / np.sqrt(2.0))) + x * phi


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv)


def _layernorm_grad(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _assemble(params, cfg, layout: InputLayout, add_pe: bool = True) -> np.ndarray:
    rows = [
        (layout.spk @ params["spk_w"] + params["spk_b"])[None, :],
        params["input_embed"][layout.text_ids],
        params["input_embed"][BOS_SPEECH][None, :],
    ]
    if len(layout.speech_ids):
        rows.append(params["speech_embed"][layout.speech_ids])
    x = np.concatenate(rows, axis=0)
    if add_pe:
        x = x + pe_at(_layout_pe_idx(layout), cfg.d_model)
    return x


def _forward_trunk(params, cfg, x, cache=None):
    """Transformer body over a full (L, d) input; returns final hidden."""
    L = x.shape[0]
    n_heads = cfg.n_heads
    dh = cfg.d_model // n_heads
    mask = np.triu(np.full((L, L), -np.inf), k=1)
    record = cache is not None
    for i in range(cfg.n_layers):
        a, ln1c = _layernorm(x, params[f"l{i}.ln1.g"], params[f"l{i}.ln1.b"])
        q = a @ params[f"l{i}.attn.wq"] + params[f"l{i}.attn.bq"]
        k = a @ params[f"l{i}.attn.wk"] + params[f"l{i}.attn.bk"]
        v = a @ params[f"l{i}.attn.wv"] + params[f"l{i}.attn.bv"]
        qh = q.reshape(L, n_heads, dh).transpose(1, 0, 2)
        kh = k.reshape(L, n_heads, dh).transpose(1, 0, 2)
        vh = v.reshape(L, n_heads, dh).transpose(1, 0, 2)
        scores = qh @ kh.transpose(0, 2, 1) / np.sqrt(dh) + mask
        attn = _softmax(scores)
        ctx = (attn @ vh).transpose(1, 0, 2).reshape(L, cfg.d_model)
        o = ctx @ params[f"l{i}.attn.wo"] + params[f"l{i}.attn.bo"]
        x_attn = x + o
        a2, ln2c = _layernorm(x_attn, params[f"l{i}.ln2.g"], params[f"l{i}.ln2.b"])
        h1 = a2 @ params[f"l{i}.ff.w1"] + params[f"l{i}.ff.b1"]
        g = _gelu(h1)
        f = g @ params[f"l{i}.ff.w2"] + params[f"l{i}.ff.b2"]
        x_out = x_attn + f
        if record:
            cache.append({
                "x_in": x, "a": a, "ln1c": ln1c, "qh": qh, "kh": kh, "vh": vh,
                "attn": attn, "ctx": ctx, "x_attn": x_attn, "a2": a2,
                "ln2c": ln2c, "h1": h1, "g": g,
            })
        x = x_out
    return x


def forward(params, cfg: LMConfig, layout: InputLayout):
    """Per-position speech-token distributions (L, speech_vocab)."""
    x = _assemble(params, cfg, layout)
    x = _forward_trunk(params, cfg, x)
    xf, _ = _layernorm(x, params["ln_f.g"], params["ln_f.b"])
    logits = xf @ params["out_w"] + params["out_b"]
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite activations in LM forward pass")
    return _softmax(logits)


def loss_targets(layout: InputLayout, cfg: LMConfig):
    """(positions, target ids): speech tokens then EOS, teacher-forced."""
    m = len(layout.speech_ids)
    positions = np.arange(layout.prefix_len - 1, layout.total_len)
    targets = np.concatenate([layout.speech_ids, [cfg.eos_id]]).astype(np.int64)
    assert len(positions) == m + 1
    return positions, targets


def kl_loss(pred_probs: np.ndarray, targets) -> float:
    """Mean -log p(target): the KL divergence from one-hot truth.

    pred_probs rows correspond 1:1 to targets.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if pred_probs.shape[0] != targets.shape[0]:
        raise DataError("prediction/target length mismatch")
    p = pred_probs[np.arange(len(targets)), targets]
    return float(np.mean(-np.log(np.maximum(p, 1e-300))))


def batch_loss(params, cfg: LMConfig, layouts) -> float:
    """Teacher-forced mean loss over all evaluated positions in the batch."""
    total = 0.0
    count = 0
    for layout in layouts:
        probs = forward(params, cfg, layout)
        positions, targets = loss_targets(layout, cfg)
        rows = probs[positions]
        total += kl_loss(rows, targets) * len(targets)
        count += len(targets)
    return total / count


def token_accuracy(params, cfg: LMConfig, layouts) -> float:
    """Teacher-forced argmax accuracy over all evaluated positions."""
    hit = 0
    count = 0
    for layout in layouts:
        probs = forward(params, cfg, layout)
        positions, targets = loss_targets(layout, cfg)
        hit += int(np.sum(np.argmax(probs[positions], axis=1) == targets))
        count += len(targets)
    return hit / count


def backward(params, cfg: LMConfig, layouts, target_overrides=None):
    """(mean loss, gradient dict) over a batch of layouts.

    The loss is the mean of -log p(target) over every evaluated position in
    the batch, matching batch_loss exactly.

    target_overrides, when given, supplies the target id array for each
    layout in place of the layout's own speech ids. The training loop uses
    this to teacher-force on corrupted inputs while scoring against the
    clean sequence.
    """
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    n_heads = cfg.n_heads
    dh = cfg.d_model // n_heads
    total_positions = sum(len(l.speech_ids) + 1 for l in layouts)
    total_loss = 0.0

    for li, layout in enumerate(layouts):
        x0 = _assemble(params, cfg, layout)
        cache = []
        x = _forward_trunk(params, cfg, x0, cache=cache)
        xf, lnfc = _layernorm(x, params["ln_f.g"], params["ln_f.b"])
        logits = xf @ params["out_w"] + params["out_b"]
        if not np.all(np.isfinite(logits)):
            raise NumericError("non-finite activations in LM forward pass")
        L = logits.shape[0]
        positions, targets = loss_targets(layout, cfg)
        if target_overrides is not None:
            targets = np.asarray(target_overrides[li], dtype=np.int64)
            if len(targets) != len(positions):
                raise DataError("target override length mismatch")

        # log-softmax loss on evaluated rows
        z = logits[positions]
        zmax = z.max(axis=1, keepdims=True)
        lse = zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
        logp = z - lse
        total_loss += float(-logp[np.arange(len(targets)), targets].sum())

        dlogits = np.zeros_like(logits)
        soft = np.exp(logp)
        soft[np.arange(len(targets)), targets] -= 1.0
        dlogits[positions] = soft / total_positions

        dxf = dlogits @ params["out_w"].T
        grads["out_w"] += xf.T @ dlogits
        grads["out_b"] += dlogits.sum(axis=0)
        dx, dg, db = _layernorm_grad(dxf, params["ln_f.g"], lnfc)
        grads["ln_f.g"] += dg
        grads["ln_f.b"] += db

        for i in reversed(range(cfg.n_layers)):
            c = cache[i]
            # feed-forward block
            df = dx
            grads[f"l{i}.ff.w2"] += c["g"].T @ df
            grads[f"l{i}.ff.b2"] += df.sum(axis=0)
            dgelu = df @ params[f"l{i}.ff.w2"].T
            dh1 = dgelu * _gelu_grad(c["h1"])
            grads[f"l{i}.ff.w1"] += c["a2"].T @ dh1
            grads[f"l{i}.ff.b1"] += dh1.sum(axis=0)
            da2 = dh1 @ params[f"l{i}.ff.w1"].T
            dx_attn, dg2, db2 = _layernorm_grad(da2, params[f"l{i}.ln2.g"], c["ln2c"])
            grads[f"l{i}.ln2.g"] += dg2
            grads[f"l{i}.ln2.b"] += db2
            dx_attn = dx_attn + dx  # residual

            # attention block
            do = dx_attn
            grads[f"l{i}.attn.wo"] += c["ctx"].T @ do
            grads[f"l{i}.attn.bo"] += do.sum(axis=0)
            dctx = (do @ params[f"l{i}.attn.wo"].T).reshape(L, n_heads, dh)
            dctx = dctx.transpose(1, 0, 2)
            dattn = dctx @ c["vh"].transpose(0, 2, 1)
            dvh = c["attn"].transpose(0, 2, 1) @ dctx
            attn = c["attn"]
            dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
            dscores /= np.sqrt(dh)
            dqh = dscores @ c["kh"]
            dkh = dscores.transpose(0, 2, 1) @ c["qh"]
            dq = dqh.transpose(1, 0, 2).reshape(L, cfg.d_model)
            dk = dkh.transpose(1, 0, 2).reshape(L, cfg.d_model)
            dv = dvh.transpose(1, 0, 2).reshape(L, cfg.d_model)
            a = c["a"]
            grads[f"l{i}.attn.wq"] += a.T @ dq
            grads[f"l{i}.attn.bq"] += dq.sum(axis=0)
            grads[f"l{i}.attn.wk"] += a.T @ dk
            grads[f"l{i}.attn.bk"] += dk.sum(axis=0)
            grads[f"l{i}.attn.wv"] += a.T @ dv
            grads[f"l{i}.attn.bv"] += dv.sum(axis=0)
            da = (dq @ params[f"l{i}.attn.wq"].T
                  + dk @ params[f"l{i}.attn.wk"].T
                  + dv @ params[f"l{i}.attn.wv"].T)
            dx_in, dg1, db1 = _layernorm_grad(da, params[f"l{i}.ln1.g"], c["ln1c"])
            grads[f"l{i}.ln1.g"] += dg1
            grads[f"l{i}.ln1.b"] += db1
            dx = dx_in + dx_attn  # residual into the layer input

        # input assembly gradients
        dspk_row = dx[0]
        grads["spk_w"] += np.outer(layout.spk, dspk_row)
        grads["spk_b"] += dspk_row
        T = len(layout.text_ids)
        np.add.at(grads["input_embed"], layout.text_ids, dx[1 : 1 + T])
        grads["input_embed"][BOS_SPEECH] += dx[1 + T]
        if len(layout.speech_ids):
            np.add.at(grads["speech_embed"], layout.speech_ids, dx[2 + T :])

    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {k}")
    return total_loss / total_positions, grads


class _KVCache:
    """Per-layer key/value history for incremental decoding."""

    def __init__(self, n_layers):
        self.k = [None] * n_layers
        self.v = [None] * n_layers

    def extend(self, i, kh, vh):
        if self.k[i] is None:
            self.k[i], self.v[i] = kh, vh
        else:
            self.k[i] = np.concatenate([self.k[i], kh], axis=1)
            self.v[i] = np.concatenate([self.v[i], vh], axis=1)


def _step_rows(params, cfg, rows, kv: _KVCache, pos0: int, pe_idx):
    """Run new rows (n, d) through the trunk, attending over cached history."""
    n = rows.shape[0]
    n_heads, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
    x = rows + pe_at(pe_idx, cfg.d_model)
    for i in range(cfg.n_layers):
        a, _ = _layernorm(x, params[f"l{i}.ln1.g"], params[f"l{i}.ln1.b"])
        q = a @ params[f"l{i}.attn.wq"] + params[f"l{i}.attn.bq"]
        k = a @ params[f"l{i}.attn.wk"] + params[f"l{i}.attn.bk"]
        v = a @ params[f"l{i}.attn.wv"] + params[f"l{i}.attn.bv"]
        qh = q.reshape(n, n_heads, dh).transpose(1, 0, 2)
        kh = k.reshape(n, n_heads, dh).transpose(1, 0, 2)
        vh = v.reshape(n, n_heads, dh).transpose(1, 0, 2)
        kv.extend(i, kh, vh)
        total = kv.k[i].shape[1]
        scores = qh @ kv.k[i].transpose(0, 2, 1) / np.sqrt(dh)
        cols = np.arange(total)[None, :]
        rows_idx = (pos0 + np.arange(n))[:, None]
        scores = scores + np.where(cols <= rows_idx, 0.0, -np.inf)[None, :, :]
        attn = _softmax(scores)
        ctx = (attn @ kv.v[i]).transpose(1, 0, 2).reshape(n, cfg.d_model)
        x = x + ctx @ params[f"l{i}.attn.wo"] + params[f"l{i}.attn.bo"]
        a2, _ = _layernorm(x, params[f"l{i}.ln2.g"], params[f"l{i}.ln2.b"])
        h1 = a2 @ params[f"l{i}.ff.w1"] + params[f"l{i}.ff.b1"]
        x = x + _gelu(h1) @ params[f"l{i}.ff.w2"] + params[f"l{i}.ff.b2"]
    return x


def sample(params, cfg: LMConfig, seq_text: TextTokenSeq, spk,
           temperature: float = 0.8, top_k: int = 16,
           max_tokens: int = 512, seed: int = 0):
    """Autoregressive decode; returns speech token ids without the EOS.

    temperature < 1e-6 decodes greedily; otherwise logits are divided by
    temperature, restricted to the top_k ids, renormalized, and sampled
    under a seeded generator. Deterministic per seed.
    """
    layout = build_input(seq_text, spk, [], cfg)
    rng = np.random.default_rng(seed)
    greedy = temperature < 1e-6
    kv = _KVCache(cfg.n_layers)
    rows = _assemble(params, cfg, layout, add_pe=False)  # _step_rows adds PE
    x = _step_rows(params, cfg, rows, kv, 0, pe_idx=_layout_pe_idx(layout))
    pos = rows.shape[0]
    out = []
    last_hidden = x[-1:]
    for _ in range(max_tokens):
        xf, _ = _layernorm(last_hidden, params["ln_f.g"], params["ln_f.b"])
        logits = (xf @ params["out_w"] + params["out_b"])[0]
        if not np.all(np.isfinite(logits)):
            raise NumericError("non-finite activations in LM sampling")
        if greedy:
            token = int(np.argmax(logits))
        else:
            k = min(top_k, len(logits))
            top = np.argpartition(logits, -k)[-k:]
            top = top[np.argsort(-logits[top], kind="stable")]
            probs = _softmax(logits[top] / temperature)
            token = int(top[rng.choice(k, p=probs)])
        if token == cfg.eos_id:
            break
        out.append(token)
        row = params["speech_embed"][token][None, :]
        idx = np.array([2.0 + len(out) - 1])  # frame j encodes at index 2 + j
        last_hidden = _step_rows(params, cfg, row, kv, pos, pe_idx=idx)
        pos += 1
    return out
