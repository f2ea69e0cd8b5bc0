"""HTTP service that administers blinded listening tests.

Raters work through a per-rater seeded permutation of the study's trials.
AB trials shuffle which system plays as "A" per (rater, trial); the mapping
lives only on the server, so clients stay blind. Submissions are appended to
a line-delimited ratings file and fsynced before the ack goes out, which
makes the store crash-safe: restart the service on the same file and every
acked record is still there.

Study manifest (JSON):

    {
      "schema_version": 1,
      "trials": [
        {"trial_id": "ab-zh-0001", "kind": "ab_choice", "utterance_id": "zh-0001",
         "stimuli": [{"system_id": "ours", "audio": "ours/zh-0001.wav"},
                     {"system_id": "baseline", "audio": "base/zh-0001.wav"}]},
        {"trial_id": "mq-s0-zh-0001", "kind": "mos_quality",
         "utterance_id": "zh-0001",
         "stimuli": [{"system_id": "ours", "audio": "ours/zh-0001.wav"}]}
      ]
    }

Audio paths are relative to the manifest's directory (absolute paths work
too). AB trials carry exactly two stimuli; the first listed is the canonical
"A" that stored records and aggregates refer to. Every JSON response carries
a schema_version field; the audio endpoint sends it as an X-Schema-Version
header instead.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from pydantic import BaseModel

from . import evalkit
from .errors import ConfigurationError, DataError

SCHEMA_VERSION = 1

MOS_LABELS = {1: "bad", 2: "poor", 3: "fair", 4: "good", 5: "excellent"}
INTELLIGIBILITY_LABELS = {0: "completely inaccurate", 100: "fully accurate"}


class DuplicateRating(DataError):
    """A (rater, trial) pair was already recorded."""


@dataclass(frozen=True)
class Stimulus:
    system_id: str
    audio_path: Path


@dataclass(frozen=True)
class Trial:
    trial_id: str
    kind: str
    utterance_id: str
    stimuli: tuple[Stimulus, ...]
    text: str | None = None

    def __post_init__(self):
        if self.kind not in evalkit.RATING_KINDS:
            raise DataError(f"trial {self.trial_id!r}: unknown kind {self.kind!r}")
        want = 2 if self.kind == "ab_choice" else 1
        if len(self.stimuli) != want:
            raise DataError(
                f"trial {self.trial_id!r}: {self.kind} needs {want} stimuli, "
                f"got {len(self.stimuli)}")
        if self.kind == "ab_choice":
            a, b = (s.system_id for s in self.stimuli)
            if a == b:
                raise DataError(
                    f"trial {self.trial_id!r}: AB pair repeats system {a!r}")

    @property
    def system_key(self) -> str:
        """system_id stored on records: the system, or "x-vs-y" for AB."""
        if self.kind == "ab_choice":
            return f"{self.stimuli[0].system_id}-vs-{self.stimuli[1].system_id}"
        return self.stimuli[0].system_id


class Study:
    """Validated trial list plus an opaque-token map for audio URLs."""

    def __init__(self, trials, seed: int = 0):
        self.trials = tuple(trials)
        if not self.trials:
            raise DataError("study has no trials")
        self.by_id: dict[str, Trial] = {}
        # (utterance, system_key, kind) identifies a trial so stored records
        # can be matched back after a restart
        self.by_record_key: dict[tuple[str, str, str], Trial] = {}
        for t in self.trials:
            if t.trial_id in self.by_id:
                raise DataError(f"duplicate trial id {t.trial_id!r}")
            self.by_id[t.trial_id] = t
            key = (t.utterance_id, t.system_key, t.kind)
            if key in self.by_record_key:
                raise DataError(
                    f"trials {self.by_record_key[key].trial_id!r} and "
                    f"{t.trial_id!r} would store indistinguishable records")
            self.by_record_key[key] = t
        self._tokens: dict[str, Path] = {}
        self._token_of: dict[Path, str] = {}
        for t in self.trials:
            for s in t.stimuli:
                if not s.audio_path.is_file():
                    raise DataError(
                        f"trial {t.trial_id!r}: missing audio {s.audio_path}")
                if s.audio_path not in self._token_of:
                    digest = hashlib.sha256(
                        f"audio:{seed}:{s.audio_path}".encode()).hexdigest()
                    name = digest[:24] + ".wav"
                    self._tokens[name] = s.audio_path
                    self._token_of[s.audio_path] = name

    def token(self, path: Path) -> str:
        return self._token_of[path]

    def audio_for_token(self, name: str) -> Path | None:
        return self._tokens.get(name)


def load_study(path, seed: int = 0) -> Study:
    """Parse and validate a study manifest; relative audio resolves to it."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"study manifest not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed JSON ({exc})") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("trials"), list):
        raise DataError(f"{path}: expected an object with a trials list")
    root = path.parent
    trials = []
    for i, rec in enumerate(doc["trials"]):
        try:
            stimuli = tuple(
                Stimulus(str(s["system_id"]), _resolve(root, str(s["audio"])))
                for s in rec["stimuli"])
            text = rec.get("text")
            trials.append(Trial(
                trial_id=str(rec["trial_id"]),
                kind=str(rec["kind"]),
                utterance_id=str(rec["utterance_id"]),
                stimuli=stimuli,
                text=None if text is None else str(text)))
        except (KeyError, TypeError) as exc:
            raise DataError(f"{path}: trial #{i}: {exc!r}") from exc
    return Study(trials, seed=seed)


def _resolve(root: Path, rel: str) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else root / p


def build_study(system_manifests: dict, out_path,
                kinds=("ab_choice", "mos_quality", "mos_naturalness",
                       "intelligibility")) -> Path:
    """Write a default study pairing every utterance across two systems.

    system_manifests maps system_id to a synthesis manifest.jsonl; the first
    two entries (in dict order) form the AB pair, canonical "A" first. Rows
    with a recorded synthesis error are skipped, and only utterances present
    in every system enter the study. Single-stimulus kinds get one trial per
    system per utterance.
    """
    if len(system_manifests) < 2 and "ab_choice" in kinds:
        raise DataError("AB trials need two systems")
    rows: dict[str, dict[str, dict]] = {}
    roots: dict[str, Path] = {}
    for sys_id, man_path in system_manifests.items():
        man_path = Path(man_path)
        roots[sys_id] = man_path.parent
        rows[sys_id] = {}
        with open(man_path, encoding="utf-8") as f:
            for line in f:
                rec = json.loads(line)
                if rec.get("error") or not rec.get("audio_path"):
                    continue
                rows[sys_id][rec["utterance_id"]] = rec
    shared = sorted(set.intersection(*(set(r) for r in rows.values())))
    if not shared:
        raise DataError("no utterance is present in every system manifest")
    out_path = Path(out_path)
    systems = list(system_manifests)

    def stim(sys_id, utt):
        wav = roots[sys_id] / rows[sys_id][utt]["audio_path"]
        return {"system_id": sys_id,
                "audio": os.path.relpath(wav, out_path.parent)}

    trials = []
    for utt in shared:
        if "ab_choice" in kinds:
            trials.append({
                "trial_id": f"ab-{utt}", "kind": "ab_choice",
                "utterance_id": utt,
                "stimuli": [stim(systems[0], utt), stim(systems[1], utt)]})
        for kind, tag in (("mos_quality", "mq"), ("mos_naturalness", "mn"),
                          ("intelligibility", "in")):
            if kind not in kinds:
                continue
            # trial ids reach the rater, so they carry a positional system
            # tag rather than the system's name
            for idx, sys_id in enumerate(systems):
                trial = {
                    "trial_id": f"{tag}-s{idx}-{utt}", "kind": kind,
                    "utterance_id": utt,
                    "stimuli": [stim(sys_id, utt)]}
                if kind == "intelligibility":
                    trial["text"] = rows[sys_id][utt].get("text")
                trials.append(trial)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"schema_version": SCHEMA_VERSION, "trials": trials}
    out_path.write_text(
        json.dumps(doc, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
    return out_path


def _digest(*parts) -> int:
    h = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "big")


class Service:
    """Study state, rater queues, and the durable ratings store.

    Appends are serialized through one lock and fsynced before the caller
    sees an ack. Reads (aggregate, progress) work on plain-list snapshots.
    """

    def __init__(self, study: Study, ratings_path, seed: int = 0):
        self.study = study
        self.seed = int(seed)
        self.ratings_path = Path(ratings_path)
        self._lock = threading.Lock()
        self._records: list[evalkit.RatingRecord] = []
        self._done: dict[str, set[str]] = {}
        self._served: dict[str, set[str]] = {}
        if self.ratings_path.exists():
            for rec in evalkit.read_ratings(self.ratings_path):
                self._records.append(rec)
                self._note_completion(rec)
        self.ratings_path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.ratings_path, "a", encoding="utf-8")

    def _note_completion(self, rec: evalkit.RatingRecord):
        trial = self.study.by_record_key.get(
            (rec.utterance_id, rec.system_id, rec.kind))
        if trial is not None:
            self._done.setdefault(rec.rater_id, set()).add(trial.trial_id)

    # deterministic per (seed, rater): identical across restarts
    def queue(self, rater_id: str) -> list[Trial]:
        order = list(range(len(self.study.trials)))
        random.Random(_digest("queue", self.seed, rater_id)).shuffle(order)
        return [self.study.trials[i] for i in order]

    def flipped(self, rater_id: str, trial_id: str) -> bool:
        """Whether this rater hears the AB pair in reversed slots."""
        return bool(_digest("slot", self.seed, rater_id, trial_id) & 1)

    def progress(self, rater_id: str) -> tuple[int, int]:
        return len(self._done.get(rater_id, ())), len(self.study.trials)

    def next_trial(self, rater_id: str) -> Trial | None:
        done = self._done.get(rater_id, set())
        for trial in self.queue(rater_id):
            if trial.trial_id not in done:
                self._served.setdefault(rater_id, set()).add(trial.trial_id)
                return trial
        return None

    def trial_payload(self, rater_id: str, trial: Trial) -> dict:
        """Client-facing view of a trial. Never names systems."""
        stimuli = list(trial.stimuli)
        if trial.kind == "ab_choice" and self.flipped(rater_id, trial.trial_id):
            stimuli.reverse()
        completed, total = self.progress(rater_id)
        payload = {
            "schema_version": SCHEMA_VERSION,
            "done": False,
            "trial_id": trial.trial_id,
            "kind": trial.kind,
            "utterance_id": trial.utterance_id,
            "audio_urls": [f"/api/audio/{self.study.token(s.audio_path)}"
                           for s in stimuli],
            "scale": scale_for(trial.kind),
            "completed": completed,
            "total": total,
        }
        if trial.kind == "intelligibility" and trial.text is not None:
            payload["text"] = trial.text
        return payload

    def record(self, rater_id: str, trial: Trial, kind: str, value,
               timestamp: float | None = None) -> int:
        """Validate, canonicalize, persist; returns the record index."""
        if not rater_id:
            raise DataError("rater_id must be non-empty")
        if kind != trial.kind:
            raise DataError(
                f"trial {trial.trial_id!r} collects {trial.kind}, not {kind}")
        if trial.trial_id not in self._served.get(rater_id, set()):
            raise DataError(
                f"trial {trial.trial_id!r} was not served to rater {rater_id!r}")
        if (trial.kind == "ab_choice" and value in ("A", "B")
                and self.flipped(rater_id, trial.trial_id)):
            value = "B" if value == "A" else "A"
        rec = evalkit.RatingRecord(
            rater_id=rater_id,
            utterance_id=trial.utterance_id,
            system_id=trial.system_key,
            kind=trial.kind,
            value=value,
            timestamp=time.time() if timestamp is None else timestamp)
        with self._lock:
            if trial.trial_id in self._done.get(rater_id, set()):
                raise DuplicateRating(
                    f"rater {rater_id!r} already rated trial {trial.trial_id!r}")
            self._fh.write(rec.to_json_line() + "\n")
            self._fh.flush()
            os.fsync(self._fh.fileno())
            self._records.append(rec)
            self._done.setdefault(rater_id, set()).add(trial.trial_id)
            return len(self._records) - 1

    def aggregate(self) -> dict:
        """Same aggregations evalkit computes over the ratings file."""
        records = list(self._records)
        groups: dict[tuple[str, str], list] = {}
        for rec in records:
            groups.setdefault((rec.kind, rec.system_id), []).append(rec)
        out = {"schema_version": SCHEMA_VERSION, "count": len(records),
               "ab": {}, "mos_quality": {}, "mos_naturalness": {},
               "intelligibility": {}}
        for (kind, system), group in sorted(groups.items()):
            if kind == "ab_choice":
                a, b, np_ = evalkit.aggregate_ab(group)
                out["ab"][system] = {"A": a.to_json(), "B": b.to_json(),
                                     "NP": np_.to_json(), "n": len(group)}
            else:
                out[kind][system] = evalkit.aggregate_mos(group).to_json()
        return out


class RatingSubmission(BaseModel):
    """POST /api/ratings body. AB values name displayed slots."""

    rater_id: str
    trial_id: str
    kind: str
    value: str | int
    timestamp: float | None = None


def scale_for(kind: str) -> dict:
    if kind == "ab_choice":
        return {"values": list(evalkit.AB_VALUES)}
    if kind in ("mos_quality", "mos_naturalness"):
        return {"min": 1, "max": 5,
                "labels": {str(k): v for k, v in MOS_LABELS.items()}}
    return {"min": 0, "max": 100,
            "labels": {str(k): v for k, v in INTELLIGIBILITY_LABELS.items()}}


def build_app(service: Service, ui_dir=None):
    """Assemble the FastAPI app around a Service."""
    from fastapi import FastAPI, HTTPException
    from fastapi.exceptions import RequestValidationError
    from fastapi.responses import FileResponse, JSONResponse

    app = FastAPI(title="listening-test service", version=str(SCHEMA_VERSION))

    @app.exception_handler(HTTPException)
    async def _http_error(request, exc):
        return JSONResponse({"schema_version": SCHEMA_VERSION,
                             "error": exc.detail},
                            status_code=exc.status_code)

    @app.exception_handler(RequestValidationError)
    async def _body_error(request, exc):
        return JSONResponse({"schema_version": SCHEMA_VERSION,
                             "error": str(exc.errors())}, status_code=400)

    @app.get("/api/rater/{rater_id}/next-trial")
    def next_trial(rater_id: str):
        trial = service.next_trial(rater_id)
        if trial is None:
            completed, total = service.progress(rater_id)
            return {"schema_version": SCHEMA_VERSION, "done": True,
                    "trial_id": None, "completed": completed, "total": total}
        return service.trial_payload(rater_id, trial)

    @app.get("/api/audio/{file}")
    def audio(file: str):
        path = service.study.audio_for_token(file)
        if path is None:
            raise HTTPException(404, f"unknown audio {file!r}")
        return FileResponse(path, media_type="audio/wav",
                            headers={"X-Schema-Version": str(SCHEMA_VERSION)})

    @app.post("/api/ratings")
    def post_rating(sub: RatingSubmission):
        trial = service.study.by_id.get(sub.trial_id)
        if trial is None:
            raise HTTPException(404, f"unknown trial {sub.trial_id!r}")
        try:
            index = service.record(sub.rater_id, trial, sub.kind, sub.value,
                                   sub.timestamp)
        except DuplicateRating as exc:
            raise HTTPException(409, str(exc)) from exc
        except DataError as exc:
            raise HTTPException(400, str(exc)) from exc
        return {"schema_version": SCHEMA_VERSION, "record_index": index,
                "trial_id": sub.trial_id, "kind": sub.kind}

    @app.get("/api/aggregate")
    def aggregate(comparison: str | None = None):
        agg = service.aggregate()
        if comparison is None:
            return agg
        if comparison not in agg["ab"]:
            raise HTTPException(404, f"no AB ratings for {comparison!r}")
        return {"schema_version": SCHEMA_VERSION, "comparison": comparison,
                **agg["ab"][comparison]}

    @app.get("/api/progress/{rater_id}")
    def progress(rater_id: str):
        completed, total = service.progress(rater_id)
        return {"schema_version": SCHEMA_VERSION, "rater_id": rater_id,
                "completed": completed, "total": total,
                "done": completed >= total}

    if ui_dir is not None:
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")
    return app


def serve(study_path, ratings_path, port: int = 8000, seed: int = 0,
          host: str = "127.0.0.1", ui_dir=None):
    """Load the study and run the service until interrupted."""
    import socket

    import uvicorn

    study = load_study(study_path, seed=seed)
    service = Service(study, ratings_path, seed=seed)
    app = build_app(service, ui_dir=ui_dir)
    probe = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        probe.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        probe.bind((host, port))
    except OSError as exc:
        raise ConfigurationError(f"cannot bind {host}:{port}: {exc}") from exc
    finally:
        probe.close()
    uvicorn.run(app, host=host, port=port, log_level="warning")
