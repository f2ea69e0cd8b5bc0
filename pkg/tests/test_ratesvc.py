"""Listening-test service: blinding, durability, golden aggregates."""

import json
import os

import numpy as np
import pytest
from fastapi.testclient import TestClient

from kidtts import dsp, evalkit, ratesvc
from kidtts.errors import DataError

VALUE_FOR = {"ab_choice": "NP", "mos_quality": 4,
             "mos_naturalness": 3, "intelligibility": 90}


def write_system(root, sys_id, utts, errored=()):
    """Synthesis manifest with one short wav per non-errored utterance."""
    d = root / sys_id
    d.mkdir(exist_ok=True)
    with open(d / "manifest.jsonl", "w", encoding="utf-8") as f:
        for utt in utts:
            row = {"utterance_id": utt, "text": "一人", "language": "zh"}
            if utt in errored:
                row.update(audio_path=None, error="synthesis failed")
            else:
                w = dsp.Waveform(
                    0.5 * np.sin(np.linspace(0, 100, 8000)), 16000)
                dsp.write_wav(d / f"{utt}.wav", w)
                row.update(audio_path=f"{utt}.wav", error=None)
            f.write(json.dumps(row) + "\n")
    return d / "manifest.jsonl"


@pytest.fixture()
def svc(tmp_path):
    manifests = {"ours": write_system(tmp_path, "ours", ("zh-0001", "zh-0002")),
                 "base": write_system(tmp_path, "base", ("zh-0001", "zh-0002"))}
    study_path = ratesvc.build_study(manifests, tmp_path / "study.json")
    study = ratesvc.load_study(study_path, seed=7)
    service = ratesvc.Service(study, tmp_path / "ratings.jsonl", seed=7)
    return {"dir": tmp_path, "study_path": study_path, "study": study,
            "service": service,
            "client": TestClient(ratesvc.build_app(service)),
            "ratings_path": tmp_path / "ratings.jsonl"}


def rate_through(client, rater_id, until_kind=None, until_trial=None):
    """Rate trials in served order; stops before the requested one."""
    while True:
        t = client.get(f"/api/rater/{rater_id}/next-trial").json()
        if t.get("done"):
            return None
        if until_kind is not None and t["kind"] == until_kind:
            return t
        if until_trial is not None and t["trial_id"] == until_trial:
            return t
        r = client.post("/api/ratings", json={
            "rater_id": rater_id, "trial_id": t["trial_id"],
            "kind": t["kind"], "value": VALUE_FOR[t["kind"]]})
        assert r.status_code == 200, r.text


class TestBuildStudy:
    def test_pairs_every_shared_utterance(self, svc):
        # per utterance: one AB trial plus three single-stimulus kinds for
        # each of the two systems
        doc = json.loads(svc["study_path"].read_text(encoding="utf-8"))
        assert doc["schema_version"] == ratesvc.SCHEMA_VERSION
        assert len(doc["trials"]) == 2 * 7
        kinds = {t["kind"] for t in doc["trials"]}
        assert kinds == set(evalkit.RATING_KINDS)

    def test_only_utterances_present_everywhere_enter(self, tmp_path):
        manifests = {
            "ours": write_system(tmp_path, "ours",
                                 ("zh-0001", "zh-0002", "zh-0003")),
            "base": write_system(tmp_path, "base", ("zh-0001", "zh-0002"),
                                 errored=("zh-0002",))}
        path = ratesvc.build_study(manifests, tmp_path / "study.json")
        doc = json.loads(path.read_text(encoding="utf-8"))
        assert {t["utterance_id"] for t in doc["trials"]} == {"zh-0001"}

    def test_no_shared_utterances_rejected(self, tmp_path):
        manifests = {"ours": write_system(tmp_path, "ours", ("zh-0001",)),
                     "base": write_system(tmp_path, "base", ("zh-0002",))}
        with pytest.raises(DataError, match="present in every system"):
            ratesvc.build_study(manifests, tmp_path / "study.json")

    def test_intelligibility_trials_carry_the_text(self, svc):
        trials = [t for t in svc["study"].trials
                  if t.kind == "intelligibility"]
        assert trials and all(t.text == "一人" for t in trials)


class TestStudyValidation:
    def wav(self, tmp_path):
        p = tmp_path / "a.wav"
        dsp.write_wav(p, dsp.Waveform(np.zeros(1600), 16000))
        return p

    def test_duplicate_trial_id(self, tmp_path):
        w = self.wav(tmp_path)
        t = ratesvc.Trial("t1", "mos_quality", "u1",
                          (ratesvc.Stimulus("ours", w),))
        with pytest.raises(DataError, match="duplicate trial id"):
            ratesvc.Study([t, t])

    def test_ab_pair_must_name_two_systems(self, tmp_path):
        w = self.wav(tmp_path)
        with pytest.raises(DataError, match="repeats system"):
            ratesvc.Trial("t1", "ab_choice", "u1",
                          (ratesvc.Stimulus("ours", w),
                           ratesvc.Stimulus("ours", w)))

    def test_stimulus_count_per_kind(self, tmp_path):
        w = self.wav(tmp_path)
        with pytest.raises(DataError, match="needs 2 stimuli"):
            ratesvc.Trial("t1", "ab_choice", "u1",
                          (ratesvc.Stimulus("ours", w),))
        with pytest.raises(DataError, match="needs 1 stimuli"):
            ratesvc.Trial("t1", "mos_quality", "u1",
                          (ratesvc.Stimulus("ours", w),
                           ratesvc.Stimulus("base", w)))

    def test_unknown_kind(self, tmp_path):
        with pytest.raises(DataError, match="unknown kind"):
            ratesvc.Trial("t1", "thumbs_up", "u1",
                          (ratesvc.Stimulus("ours", self.wav(tmp_path)),))

    def test_missing_audio_file(self, tmp_path):
        t = ratesvc.Trial("t1", "mos_quality", "u1",
                          (ratesvc.Stimulus("ours", tmp_path / "gone.wav"),))
        with pytest.raises(DataError, match="missing audio"):
            ratesvc.Study([t])

    def test_empty_study(self):
        with pytest.raises(DataError, match="no trials"):
            ratesvc.Study([])

    def test_indistinguishable_records_rejected(self, tmp_path):
        # two trials that would store records under the same
        # (utterance, system, kind) triple cannot be told apart on reload
        w = self.wav(tmp_path)
        a = ratesvc.Trial("t1", "mos_quality", "u1",
                          (ratesvc.Stimulus("ours", w),))
        b = ratesvc.Trial("t2", "mos_quality", "u1",
                          (ratesvc.Stimulus("ours", w),))
        with pytest.raises(DataError, match="indistinguishable"):
            ratesvc.Study([a, b])


class TestTrialFlow:
    def test_first_trial_heads_the_seeded_permutation(self, svc):
        want = svc["service"].queue("r1")[0]
        got = svc["client"].get("/api/rater/r1/next-trial").json()
        assert got["trial_id"] == want.trial_id
        assert got["schema_version"] == ratesvc.SCHEMA_VERSION

    def test_payloads_never_name_systems(self, svc):
        # walk a full session: no payload may reveal which system made
        # which stimulus, and audio urls must be opaque tokens
        c = svc["client"]
        while True:
            t = c.get("/api/rater/r1/next-trial").json()
            if t.get("done"):
                break
            flat = json.dumps(t)
            assert "system" not in flat and "ours" not in flat
            assert "base" not in flat
            for url in t["audio_urls"]:
                name = url.rsplit("/", 1)[1]
                assert len(name) == 28 and name.endswith(".wav")
            c.post("/api/ratings", json={
                "rater_id": "r1", "trial_id": t["trial_id"],
                "kind": t["kind"], "value": VALUE_FOR[t["kind"]]})

    def test_audio_endpoint_serves_wav_with_version_header(self, svc):
        t = svc["client"].get("/api/rater/r1/next-trial").json()
        r = svc["client"].get(t["audio_urls"][0])
        assert r.status_code == 200
        assert r.headers["content-type"] == "audio/wav"
        assert r.headers["x-schema-version"] == str(ratesvc.SCHEMA_VERSION)
        assert r.content[:4] == b"RIFF"

    def test_unknown_audio_token_is_404(self, svc):
        r = svc["client"].get("/api/audio/" + "0" * 24 + ".wav")
        assert r.status_code == 404
        assert r.json()["schema_version"] == ratesvc.SCHEMA_VERSION

    def test_session_runs_to_done_and_progress_agrees(self, svc):
        c = svc["client"]
        total = len(svc["study"].trials)
        rate_through(c, "r1")
        t = c.get("/api/rater/r1/next-trial").json()
        assert t["done"] is True and t["trial_id"] is None
        assert t["completed"] == total and t["total"] == total
        p = c.get("/api/progress/r1").json()
        assert p == {"schema_version": ratesvc.SCHEMA_VERSION,
                     "rater_id": "r1", "completed": total, "total": total,
                     "done": True}

    def test_raters_get_distinct_permutations(self, svc):
        orders = {r: [t.trial_id for t in svc["service"].queue(r)]
                  for r in ("r1", "r2")}
        assert sorted(orders["r1"]) == sorted(orders["r2"])
        assert orders["r1"] != orders["r2"]


class TestRecording:
    def test_rating_lands_in_aggregate_immediately(self, svc):
        c = svc["client"]
        t = rate_through(c, "r1", until_kind="mos_quality")
        r = c.post("/api/ratings", json={
            "rater_id": "r1", "trial_id": t["trial_id"],
            "kind": "mos_quality", "value": 5})
        assert r.status_code == 200
        agg = c.get("/api/aggregate").json()
        assert sum(len(v) for k, v in agg.items()
                   if k in evalkit.RATING_KINDS or k == "ab") >= 1
        stats = list(agg["mos_quality"].values())
        assert any(s["n"] >= 1 for s in stats)

    def test_duplicate_submission_conflicts_and_changes_nothing(self, svc):
        c = svc["client"]
        t = c.get("/api/rater/r1/next-trial").json()
        body = {"rater_id": "r1", "trial_id": t["trial_id"],
                "kind": t["kind"], "value": VALUE_FOR[t["kind"]]}
        assert c.post("/api/ratings", json=body).status_code == 200
        size = os.path.getsize(svc["ratings_path"])
        r = c.post("/api/ratings", json=body)
        assert r.status_code == 409
        assert "already rated" in r.json()["error"]
        assert os.path.getsize(svc["ratings_path"]) == size

    def test_out_of_range_mos_is_rejected(self, svc):
        c = svc["client"]
        t = rate_through(c, "r1", until_kind="mos_quality")
        r = c.post("/api/ratings", json={
            "rater_id": "r1", "trial_id": t["trial_id"],
            "kind": "mos_quality", "value": 6})
        assert r.status_code == 400
        assert r.json()["schema_version"] == ratesvc.SCHEMA_VERSION

    def test_intelligibility_boundary_values_accepted(self, svc):
        c = svc["client"]
        t = rate_through(c, "r1", until_kind="intelligibility")
        r = c.post("/api/ratings", json={
            "rater_id": "r1", "trial_id": t["trial_id"],
            "kind": "intelligibility", "value": 100})
        assert r.status_code == 200

    def test_unknown_trial_is_404(self, svc):
        r = svc["client"].post("/api/ratings", json={
            "rater_id": "r1", "trial_id": "nope", "kind": "mos_quality",
            "value": 3})
        assert r.status_code == 404

    def test_unserved_trial_is_rejected(self, svc):
        c = svc["client"]
        served = c.get("/api/rater/r1/next-trial").json()["trial_id"]
        other = next(t for t in svc["study"].by_id if t != served)
        r = c.post("/api/ratings", json={
            "rater_id": "r1", "trial_id": other,
            "kind": svc["study"].by_id[other].kind,
            "value": VALUE_FOR[svc["study"].by_id[other].kind]})
        assert r.status_code == 400
        assert "not served" in r.json()["error"]

    def test_kind_must_match_the_trial(self, svc):
        c = svc["client"]
        t = rate_through(c, "r1", until_kind="mos_quality")
        r = c.post("/api/ratings", json={
            "rater_id": "r1", "trial_id": t["trial_id"],
            "kind": "mos_naturalness", "value": 3})
        assert r.status_code == 400
        assert "collects" in r.json()["error"]

    def test_malformed_body_is_400_with_schema_version(self, svc):
        r = svc["client"].post("/api/ratings",
                               json={"rater_id": "r1", "trial_id": "t"})
        assert r.status_code == 400
        assert r.json()["schema_version"] == ratesvc.SCHEMA_VERSION


class TestBlinding:
    def ab_trial(self, svc):
        return next(t for t in svc["study"].trials if t.kind == "ab_choice")

    def raters_by_flip(self, svc, trial_id):
        service = svc["service"]
        flipped = next(f"f{i}" for i in range(100)
                       if service.flipped(f"f{i}", trial_id))
        straight = next(f"f{i}" for i in range(100)
                        if not service.flipped(f"f{i}", trial_id))
        return flipped, straight

    def test_flipped_rater_hears_reversed_slots(self, svc):
        trial = self.ab_trial(svc)
        flipped, straight = self.raters_by_flip(svc, trial.trial_id)
        pf = svc["service"].trial_payload(flipped, trial)
        ps = svc["service"].trial_payload(straight, trial)
        assert pf["audio_urls"] == ps["audio_urls"][::-1]

    def test_displayed_choice_is_canonicalized_before_storage(self, svc):
        # both raters press "A"; the flipped rater heard the canonical B
        # in slot A, so their stored value must be "B"
        c = svc["client"]
        trial = self.ab_trial(svc)
        flipped, straight = self.raters_by_flip(svc, trial.trial_id)
        for rater in (flipped, straight):
            rate_through(c, rater, until_trial=trial.trial_id)
            r = c.post("/api/ratings", json={
                "rater_id": rater, "trial_id": trial.trial_id,
                "kind": "ab_choice", "value": "A"})
            assert r.status_code == 200
        stored = {r.rater_id: r.value
                  for r in evalkit.read_ratings(svc["ratings_path"])
                  if r.kind == "ab_choice"}
        assert stored[straight] == "A" and stored[flipped] == "B"

    def test_no_preference_survives_the_flip(self, svc):
        c = svc["client"]
        trial = self.ab_trial(svc)
        flipped, _ = self.raters_by_flip(svc, trial.trial_id)
        rate_through(c, flipped, until_trial=trial.trial_id)
        r = c.post("/api/ratings", json={
            "rater_id": flipped, "trial_id": trial.trial_id,
            "kind": "ab_choice", "value": "NP"})
        assert r.status_code == 200
        stored = [r.value for r in evalkit.read_ratings(svc["ratings_path"])
                  if r.kind == "ab_choice" and r.rater_id == flipped
                  and r.utterance_id == trial.utterance_id]
        assert stored == ["NP"]


class TestDurabilityAndGoldenAggregates:
    def test_restart_preserves_everything_acked(self, svc):
        c = svc["client"]
        rate_through(c, "r1")
        rate_through(c, "r2", until_kind="mos_quality")
        agg = c.get("/api/aggregate").json()
        total = len(svc["study"].trials)

        reloaded = ratesvc.Service(
            ratesvc.load_study(svc["study_path"], seed=7),
            svc["ratings_path"], seed=7)
        c2 = TestClient(ratesvc.build_app(reloaded))
        assert reloaded.progress("r1") == (total, total)
        assert c2.get("/api/rater/r1/next-trial").json()["done"] is True
        assert ([t.trial_id for t in reloaded.queue("r1")]
                == [t.trial_id for t in svc["service"].queue("r1")])
        assert c2.get("/api/aggregate").json() == agg
        # the partially done rater resumes exactly where they left off
        assert (c2.get("/api/rater/r2/next-trial").json()["trial_id"]
                == c.get("/api/rater/r2/next-trial").json()["trial_id"])

    def test_aggregate_matches_direct_computation(self, svc):
        c = svc["client"]
        for rater in ("r1", "r2", "r3"):
            rate_through(c, rater)
        agg = c.get("/api/aggregate").json()
        recs = evalkit.read_ratings(svc["ratings_path"])
        assert agg["count"] == len(recs)

        ab = [r for r in recs if r.kind == "ab_choice"]
        a, b, np_ = evalkit.aggregate_ab(ab)
        got = agg["ab"]["ours-vs-base"]
        assert got == {"A": a.to_json(), "B": b.to_json(),
                       "NP": np_.to_json(), "n": len(ab)}

        for kind in ("mos_quality", "mos_naturalness", "intelligibility"):
            for system in ("ours", "base"):
                group = [r for r in recs
                         if r.kind == kind and r.system_id == system]
                assert agg[kind][system] == evalkit.aggregate_mos(
                    group).to_json()

    def test_comparison_filter_returns_one_block(self, svc):
        c = svc["client"]
        rate_through(c, "r1")
        one = c.get("/api/aggregate",
                    params={"comparison": "ours-vs-base"}).json()
        assert one["comparison"] == "ours-vs-base"
        assert set(one) >= {"A", "B", "NP", "n"}
        missing = c.get("/api/aggregate", params={"comparison": "x-vs-y"})
        assert missing.status_code == 404
