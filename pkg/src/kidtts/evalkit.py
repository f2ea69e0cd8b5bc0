"""Evaluation toolkit: CER, oracle transcription, rating aggregation, reports.

The transcription oracle exploits the synthetic corpus construction: every
character is a constant-pitch tone, so frame-wise pitch tracking plus
nearest-frequency lookup recovers the text exactly on clean audio. CER is
computed over unicode scalars after NFC normalization (noted in the report
header, since grapheme-cluster tokenization would differ for Tamil).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import t as student_t

from . import corpus, dsp, synth
from .errors import DataError

RATING_KINDS = ("ab_choice", "mos_quality", "mos_naturalness", "intelligibility")
AB_VALUES = ("A", "B", "NP")

# Oracle transcription settings. The pitch tracker runs on 16 ms frames with
# 8 ms hops so a 50 ms character yields ~6 pitch frames; a character is
# accepted once its tone holds for two consecutive frames within 12 Hz of a
# table frequency.
ORACLE_FRAME_MS = 16.0
ORACLE_HOP_MS = 8.0
ORACLE_TOLERANCE_HZ = 12.0
ORACLE_MIN_RUN = 2


def cer(reference: str, hypothesis: str) -> float:
    """Character error rate: 100 * edit_distance / len(reference).

    Both strings are NFC-normalized and compared at unicode-scalar
    granularity. The reference must be non-empty.
    """
    import unicodedata

    ref = list(unicodedata.normalize("NFC", reference))
    hyp = list(unicodedata.normalize("NFC", hypothesis))
    if not ref:
        raise DataError("CER reference must be non-empty")
    return 100.0 * edit_distance(ref, hyp) / len(ref)


def edit_distance(a, b) -> int:
    """Levenshtein distance between two sequences (unit costs)."""
    prev = list(range(len(b) + 1))
    for i in range(1, len(a) + 1):
        cur = [i] + [0] * len(b)
        ai = a[i - 1]
        for j in range(1, len(b) + 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ai != b[j - 1]))
        prev = cur
    return prev[-1]


def oracle_asr(w: dsp.Waveform, table: corpus.AlphabetTable,
               speaker_pitch_scale: float = 1.0) -> str:
    """Transcribe tone audio against an alphabet table.

    Frame pitches are divided by the speaker's pitch scale, snapped to the
    nearest table frequency when within tolerance and ignored otherwise;
    runs of at least ORACLE_MIN_RUN consecutive frames on one frequency
    emit that character. Unvoiced frames end the current run. Unrecognizable
    audio yields the empty string.
    """
    freqs = np.array([f for _, f in table.entries])
    chars = table.characters
    pitches = dsp.estimate_pitch(w, frame_ms=ORACLE_FRAME_MS, hop_ms=ORACLE_HOP_MS)

    out = []
    cur = None
    run = 0

    def flush():
        nonlocal cur, run
        if cur is not None and run >= ORACLE_MIN_RUN:
            out.append(chars[cur])
        cur, run = None, 0

    for f in pitches:
        if f == 0.0:
            flush()
            continue
        d = np.abs(freqs - f / speaker_pitch_scale)
        j = int(np.argmin(d))
        if d[j] > ORACLE_TOLERANCE_HZ:
            continue  # off-grid blip (e.g. a boundary frame); run survives
        if j == cur:
            run += 1
        else:
            flush()
            cur, run = j, 1
    flush()
    return "".join(out)


@dataclass(frozen=True)
class ConfidenceInterval:
    mean: float
    lower: float
    upper: float
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise DataError("confidence interval needs n >= 1")
        if not self.lower <= self.mean <= self.upper:
            raise DataError("confidence interval must bracket its mean")

    def to_json(self) -> dict:
        return {"mean": self.mean, "lower": self.lower, "upper": self.upper,
                "n": self.n}


@dataclass(frozen=True)
class RatingRecord:
    rater_id: str
    utterance_id: str
    system_id: str
    kind: str
    value: object  # "A"/"B"/"NP" for ab_choice, int otherwise
    timestamp: float

    def __post_init__(self):
        if self.kind not in RATING_KINDS:
            raise DataError(f"unknown rating kind {self.kind!r}")
        if self.kind == "ab_choice":
            if self.value not in AB_VALUES:
                raise DataError(f"ab_choice value must be one of {AB_VALUES}")
        else:
            v = self.value
            if not isinstance(v, int) or isinstance(v, bool):
                raise DataError(f"{self.kind} value must be an integer")
            if self.kind in ("mos_quality", "mos_naturalness"):
                if not 1 <= v <= 5:
                    raise DataError("MOS values range from 1 to 5")
            elif not 0 <= v <= 100:
                raise DataError("intelligibility values range from 0 to 100")
        if not (isinstance(self.timestamp, (int, float))
                and np.isfinite(self.timestamp)):
            raise DataError("timestamp must be a finite number")
        for field in ("rater_id", "utterance_id", "system_id"):
            if not getattr(self, field):
                raise DataError(f"{field} must be non-empty")

    def to_json(self) -> dict:
        return {
            "rater_id": self.rater_id,
            "utterance_id": self.utterance_id,
            "system_id": self.system_id,
            "kind": self.kind,
            "value": self.value,
            "timestamp": self.timestamp,
        }

    def to_json_line(self) -> str:
        return json.dumps(self.to_json(), ensure_ascii=False, sort_keys=True)


def rating_from_json(rec: dict) -> RatingRecord:
    try:
        value = rec["value"]
        if rec["kind"] != "ab_choice":
            value = int(value)
        return RatingRecord(
            rater_id=rec["rater_id"],
            utterance_id=rec["utterance_id"],
            system_id=rec["system_id"],
            kind=rec["kind"],
            value=value,
            timestamp=float(rec["timestamp"]),
        )
    except KeyError as exc:
        raise DataError(f"rating record missing field {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise DataError(f"malformed rating record: {exc}") from exc


def read_ratings(path) -> list:
    """Parse a line-delimited ratings file, validating every record."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"ratings file not found: {path}")
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(rating_from_json(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed line ({exc})") from exc
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return records


def aggregate_mos(records) -> ConfidenceInterval:
    """Mean and 95% Student-t interval of one numeric rating kind.

    n = 1 yields the degenerate interval [mean, mean]; identical values a
    width-0 interval.
    """
    records = list(records)
    if not records:
        raise DataError("no rating records to aggregate")
    kinds = {r.kind for r in records}
    if len(kinds) > 1 or "ab_choice" in kinds:
        raise DataError(f"expected one numeric rating kind, got {sorted(kinds)}")
    values = np.array([float(r.value) for r in records])
    n = len(values)
    mean = float(np.mean(values))
    if n == 1:
        return ConfidenceInterval(mean=mean, lower=mean, upper=mean, n=1)
    s = float(np.std(values, ddof=1))
    half = float(student_t.ppf(0.975, n - 1)) * s / np.sqrt(n)
    return ConfidenceInterval(mean=mean, lower=mean - half, upper=mean + half, n=n)


def aggregate_ab(records, bootstrap_n: int = 1000, seed: int = 0):
    """Preference shares (A%, B%, NP%) with percentile-bootstrap 95% CIs.

    Point estimates are exact category shares and sum to 100. Intervals
    come from `bootstrap_n` seeded resamples of the records.
    """
    records = list(records)
    if not records:
        raise DataError("no rating records to aggregate")
    for r in records:
        if r.kind != "ab_choice":
            raise DataError(f"aggregate_ab got a {r.kind} record")
    values = np.array([AB_VALUES.index(r.value) for r in records])
    n = len(values)
    counts = np.bincount(values, minlength=3)
    shares = 100.0 * counts / n

    rng = np.random.default_rng(seed)
    resamples = values[rng.integers(0, n, size=(bootstrap_n, n))]
    boot = np.stack([
        100.0 * np.sum(resamples == c, axis=1) / n for c in range(3)
    ], axis=1)  # (bootstrap_n, 3)
    lo = np.percentile(boot, 2.5, axis=0)
    hi = np.percentile(boot, 97.5, axis=0)
    return tuple(
        ConfidenceInterval(
            mean=float(shares[c]),
            lower=float(min(lo[c], shares[c])),
            upper=float(max(hi[c], shares[c])),
            n=n,
        )
        for c in range(3)
    )


@dataclass(frozen=True)
class EvalReport:
    summary: dict  # machine-readable; JSON-serializable
    table: str     # rendered UTF-8 table

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(self.table, encoding="utf-8")
        with open(out / "report.json", "w", encoding="utf-8") as f:
            json.dump(self.summary, f, ensure_ascii=False, sort_keys=True,
                      indent=2)
            f.write("\n")


def _render_table(summary: dict) -> str:
    lines = [
        "Evaluation report (CER over unicode scalars, NFC-normalized)",
        f"split: {summary['split']}  seed: {summary['seed']}",
        "",
        "Objective",
        f"{'Language':<10}{'Utterances':>12}{'Errors':>8}{'CER (%)':>10}{'MCD (dB)':>10}",
    ]
    for lang in sorted(summary["languages"]):
        row = summary["languages"][lang]
        mcd = f"{row['mcd_db']:.2f}" if row["mcd_db"] is not None else "-"
        lines.append(
            f"{lang:<10}{row['utterances']:>12}{row['synthesis_errors']:>8}"
            f"{row['cer_percent']:>10.2f}{mcd:>10}"
        )
    ratings = summary.get("ratings")
    if ratings:
        lines.append("")
        lines.append("Subjective")
        for system_id in sorted(ratings):
            block = ratings[system_id]
            for kind in ("mos_quality", "mos_naturalness", "intelligibility"):
                ci = block.get(kind)
                if ci:
                    lines.append(
                        f"{system_id}  {kind}: {ci['mean']:.2f} "
                        f"[{ci['lower']:.2f}, {ci['upper']:.2f}] (n={ci['n']})"
                    )
            ab = block.get("ab_choice")
            if ab:
                a, b, np_ = ab
                lines.append(
                    f"{system_id}  AB: A {a['mean']:.2f}%  B {b['mean']:.2f}%  "
                    f"NP {np_['mean']:.2f}% (n={a['n']})"
                )
    return "\n".join(lines) + "\n"


def evaluate_system(ckpt, manifest_path, seed: int = 0, split: str = "test",
                    alphabets=None, ratings=None, temperature: float = 0.0,
                    log=None) -> EvalReport:
    """Synthesize every utterance of one split and score it with the oracle.

    Each utterance is re-synthesized in its own reference voice, transcribed
    by oracle_asr, and pooled into corpus-level CER per language (total
    edits over total reference characters). Synthesis failures are counted,
    reported, and excluded from the CER pool. MCD is measured against the
    corpus recording over the aligned frame overlap. Decoding is greedy by
    default so repeated evaluations are comparable; pass a temperature to
    score the sampling configuration instead. A checkpoint trained on one
    language is scored on that language only.
    """
    manifest_path = Path(manifest_path)
    items = corpus.load_manifest(manifest_path, alphabets=alphabets)
    if alphabets is None:
        alphabets = {
            lang: corpus.default_alphabet(lang) for lang in corpus.LANGUAGES
        }
    if getattr(ckpt, "language_filter", None) is not None:
        items = [i for i in items if i.language == ckpt.language_filter]
    chosen = [i for i in items if i.split == split]
    if not chosen:
        raise DataError(f"manifest has no items in split {split!r}")
    base = manifest_path.parent

    by_lang = {}
    for item in chosen:
        st = by_lang.setdefault(item.language, {
            "utterances": 0, "synthesis_errors": 0, "edits": 0,
            "reference_chars": 0, "mcd_sum": 0.0, "mcd_n": 0,
        })
        st["utterances"] += 1
        ref_wave = dsp.read_wav(base / item.audio_path)
        try:
            wave = synth.synthesize(
                ckpt, item.text, item.language, ref_wave, seed=seed,
                temperature=temperature,
            )
        except Exception as exc:
            st["synthesis_errors"] += 1
            if log is not None:
                log({"utterance_id": item.utterance_id, "error": str(exc)})
            continue
        hyp = oracle_asr(wave, alphabets[item.language], item.speaker.pitch_scale)
        st["edits"] += edit_distance(list(item.text), list(hyp))
        st["reference_chars"] += len(item.text)
        st["mcd_sum"] += dsp.mel_cepstral_distortion(
            dsp.mel_spectrogram(wave), dsp.mel_spectrogram(ref_wave)
        )
        st["mcd_n"] += 1
        if log is not None:
            log({"utterance_id": item.utterance_id, "reference": item.text,
                 "hypothesis": hyp})

    languages = {}
    for lang, st in sorted(by_lang.items()):
        chars = st["reference_chars"]
        languages[lang] = {
            "utterances": st["utterances"],
            "synthesis_errors": st["synthesis_errors"],
            "edits": st["edits"],
            "reference_chars": chars,
            "cer_percent": 100.0 * st["edits"] / chars if chars else 100.0,
            "mcd_db": st["mcd_sum"] / st["mcd_n"] if st["mcd_n"] else None,
        }

    summary = {
        "tokenization": "unicode scalars, NFC-normalized",
        "split": split,
        "seed": seed,
        "languages": languages,
    }
    if ratings is not None:
        summary["ratings"] = _aggregate_rating_blocks(ratings, seed)
    return EvalReport(summary=summary, table=_render_table(summary))


def _aggregate_rating_blocks(records, seed: int) -> dict:
    """Per-system aggregation of every rating kind present."""
    by_system = {}
    for r in records:
        by_system.setdefault(r.system_id, []).append(r)
    blocks = {}
    for system_id, recs in sorted(by_system.items()):
        block = {}
        for kind in ("mos_quality", "mos_naturalness", "intelligibility"):
            sub = [r for r in recs if r.kind == kind]
            if sub:
                block[kind] = aggregate_mos(sub).to_json()
        ab = [r for r in recs if r.kind == "ab_choice"]
        if ab:
            block["ab_choice"] = [ci.to_json() for ci in aggregate_ab(ab, seed=seed)]
        blocks[system_id] = block
    return blocks
