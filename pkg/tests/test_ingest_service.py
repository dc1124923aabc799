"""REST service: authentication, authorization, validation, flagging,
idempotency, sharing.  Everything runs against an in-memory store through
the ASGI test client; webhook deliveries go to an injected recorder.
"""

import pytest
from fastapi.testclient import TestClient

from bsnkit.datastore import Datastore, User
from bsnkit.ingest_service import (create_app, load_tokens,
                                   recompute_from_samples, SampleIn)

TOKENS = {"tok-ada": "ada", "tok-bo": "bo", "tok-eve": "eve"}


@pytest.fixture
def rig():
    store = Datastore()
    for uid, name in (("ada", "Ada"), ("bo", "Bo"), ("eve", "Eve")):
        store.upsert_user(User(uid, name))
    store.create_team("crew", team_id="t1")
    store.join_team("ada", "t1")
    store.join_team("bo", "t1")
    deliveries = []

    def poster(url, text):
        deliveries.append((url, text))
        return True, "status 200"

    app = create_app(store, TOKENS, webhook_poster=poster)
    client = TestClient(app)
    yield client, store, deliveries
    store.close()


def auth(token):
    return {"Authorization": f"Bearer {token}"}


def upload_body(uid="ada", wid="w1", avg=80.0, dist=120.0, n=60):
    # 750 ms intervals average to exactly 80 bpm
    samples = [{"sensor": "ibi", "offset_ms": 750 * (k + 1), "value": 750.0}
               for k in range(n)]
    samples += [{"sensor": "distance", "offset_ms": 1000 * k,
                 "value": dist * k / 59} for k in range(60)]
    return {"user_id": uid, "workout_id": wid,
            "started_at": "2026-05-04T09:30:00+00:00", "duration_s": 60.0,
            "summary": {"duration_s": 60.0, "avg_hr_bpm": avg,
                        "distance_m": dist},
            "samples": samples}


# --- authentication ---------------------------------------------------------

def test_missing_or_bad_token(rig):
    client, _, _ = rig
    assert client.post("/v1/workouts", json=upload_body()).status_code == 401
    r = client.post("/v1/workouts", json=upload_body(),
                    headers={"Authorization": "Basic abc"})
    assert r.status_code == 401
    r = client.post("/v1/workouts", json=upload_body(),
                    headers=auth("tok-nobody"))
    assert r.status_code == 401


# --- uploads ----------------------------------------------------------------

def test_upload_created_then_duplicate(rig):
    client, store, _ = rig
    r = client.post("/v1/workouts", json=upload_body(), headers=auth("tok-ada"))
    assert r.status_code == 201
    assert r.json()["workout_id"] == "w1"
    assert r.json()["flags"] == []
    digest = store.state_digest()
    # a resend, even a tampered one, changes nothing
    tampered = upload_body(avg=150.0)
    r2 = client.post("/v1/workouts", json=tampered, headers=auth("tok-ada"))
    assert r2.status_code == 200
    assert store.state_digest() == digest


def test_upload_token_must_own_user(rig):
    client, _, _ = rig
    r = client.post("/v1/workouts", json=upload_body(uid="bo"),
                    headers=auth("tok-ada"))
    assert r.status_code == 403


def test_upload_unknown_user(rig):
    client, store, _ = rig
    tokens = dict(TOKENS, **{"tok-ghost": "ghost"})
    client2 = TestClient(create_app(store, tokens))
    r = client2.post("/v1/workouts", json=upload_body(uid="ghost"),
                     headers=auth("tok-ghost"))
    assert r.status_code == 404


def test_upload_validation_errors(rig):
    client, store, _ = rig
    bad_time = upload_body()
    bad_time["started_at"] = "next tuesday"
    assert client.post("/v1/workouts", json=bad_time,
                       headers=auth("tok-ada")).status_code == 422
    negative = upload_body()
    negative["duration_s"] = -5.0
    assert client.post("/v1/workouts", json=negative,
                       headers=auth("tok-ada")).status_code == 422
    shuffled = upload_body()
    shuffled["samples"] = [{"sensor": "hr", "offset_ms": 1000, "value": 60.0},
                           {"sensor": "hr", "offset_ms": 0, "value": 61.0}]
    assert client.post("/v1/workouts", json=shuffled,
                       headers=auth("tok-ada")).status_code == 422
    missing = upload_body()
    del missing["workout_id"]
    assert client.post("/v1/workouts", json=missing,
                       headers=auth("tok-ada")).status_code == 422
    # nothing got stored along the way
    assert store.query_history("ada") == []


def test_summary_mismatch_is_flagged_not_rejected(rig):
    client, store, _ = rig
    r = client.post("/v1/workouts", json=upload_body(avg=95.0),
                    headers=auth("tok-ada"))
    assert r.status_code == 201
    assert r.json()["flags"] == ["summary-mismatch"]
    assert store.get_workout("w1").summary["flags"] == ["summary-mismatch"]

    body = upload_body(wid="w2")
    body["summary"]["distance_m"] = 500.0  # rows still sum to 120 m
    r = client.post("/v1/workouts", json=body, headers=auth("tok-ada"))
    assert r.json()["flags"] == ["summary-mismatch"]

    # within tolerance: 80.9 vs recomputed 80.0, 120.05 vs 120.0
    body = upload_body(wid="w3", avg=80.9)
    body["summary"]["distance_m"] = 120.05
    r = client.post("/v1/workouts", json=body, headers=auth("tok-ada"))
    assert r.json()["flags"] == []


def test_claimed_average_without_samples_is_flagged(rig):
    client, _, _ = rig
    body = upload_body(wid="w4")
    body["samples"] = []
    body["summary"]["distance_m"] = 0.0
    r = client.post("/v1/workouts", json=body, headers=auth("tok-ada"))
    assert r.status_code == 201
    assert r.json()["flags"] == ["summary-mismatch"]


def test_recompute_prefers_interval_rows():
    samples = [SampleIn(sensor="ibi", offset_ms=500, value=500.0),
               SampleIn(sensor="ibi", offset_ms=1000, value=500.0),
               SampleIn(sensor="hr", offset_ms=0, value=200.0),
               SampleIn(sensor="distance", offset_ms=0, value=3.0),
               SampleIn(sensor="distance", offset_ms=1000, value=9.5)]
    avg, dist = recompute_from_samples(samples)
    assert avg == pytest.approx(120.0)
    assert dist == 9.5
    avg2, dist2 = recompute_from_samples(samples[2:])
    assert avg2 == 200.0
    assert recompute_from_samples([]) == (None, 0.0)


# --- history ----------------------------------------------------------------

def seed_history(client):
    for wid, day in (("w1", 1), ("w2", 10), ("w3", 20)):
        body = upload_body(wid=wid)
        body["started_at"] = f"2026-05-{day:02d}T08:00:00+00:00"
        assert client.post("/v1/workouts", json=body,
                           headers=auth("tok-ada")).status_code == 201


def test_history_owner_and_teammate(rig):
    client, _, _ = rig
    seed_history(client)
    for token in ("tok-ada", "tok-bo"):  # bo shares team t1 with ada
        r = client.get("/v1/users/ada/workouts", headers=auth(token))
        assert r.status_code == 200
        ids = [w["workout_id"] for w in r.json()["workouts"]]
        assert ids == ["w1", "w2", "w3"]
    # raw rows never travel in history responses
    for w in r.json()["workouts"]:
        assert "samples" not in w


def test_history_stranger_forbidden(rig):
    client, _, _ = rig
    seed_history(client)
    assert client.get("/v1/users/ada/workouts",
                      headers=auth("tok-eve")).status_code == 403
    assert client.get("/v1/users/ghost/workouts",
                      headers=auth("tok-eve")).status_code == 404


def test_history_window(rig):
    client, _, _ = rig
    seed_history(client)
    r = client.get("/v1/users/ada/workouts",
                   params={"from": "2026-05-05T00:00:00+00:00",
                           "to": "2026-05-15T00:00:00+00:00"},
                   headers=auth("tok-ada"))
    assert [w["workout_id"] for w in r.json()["workouts"]] == ["w2"]
    r = client.get("/v1/users/ada/workouts",
                   params={"from": "2026-05-10T08:00:00Z"},
                   headers=auth("tok-ada"))
    assert [w["workout_id"] for w in r.json()["workouts"]] == ["w2", "w3"]


def test_history_window_validation(rig):
    client, _, _ = rig
    r = client.get("/v1/users/ada/workouts", params={"from": "whenever"},
                   headers=auth("tok-ada"))
    assert r.status_code == 422
    r = client.get("/v1/users/ada/workouts",
                   params={"from": "2026-05-20T00:00:00+00:00",
                           "to": "2026-05-01T00:00:00+00:00"},
                   headers=auth("tok-ada"))
    assert r.status_code == 422


# --- leaderboard ------------------------------------------------------------

def test_leaderboard_route(rig):
    client, store, _ = rig
    seed_history(client)
    r = client.get("/v1/teams/t1/leaderboard",
                   params={"metric": "workout_count"}, headers=auth("tok-ada"))
    assert r.status_code == 200
    rows = r.json()["leaderboard"]
    assert rows[0] == {"user_id": "ada", "display_name": "Ada", "value": 3.0}
    assert rows[1]["user_id"] == "bo"
    expect = store.leaderboard("t1", "workout_count")
    assert [(x["user_id"], x["value"]) for x in rows] == \
        [(u.user_id, v) for u, v in expect]


def test_leaderboard_guards(rig):
    client, _, _ = rig
    assert client.get("/v1/teams/zzz/leaderboard",
                      params={"metric": "workout_count"},
                      headers=auth("tok-ada")).status_code == 404
    assert client.get("/v1/teams/t1/leaderboard",
                      params={"metric": "coolness"},
                      headers=auth("tok-ada")).status_code == 422
    # eve is not on t1
    assert client.get("/v1/teams/t1/leaderboard",
                      params={"metric": "workout_count"},
                      headers=auth("tok-eve")).status_code == 403


# --- user / team management -------------------------------------------------

def test_user_and_team_routes(rig):
    client, _, _ = rig
    r = client.post("/v1/users", json={"display_name": "Newbie"},
                    headers=auth("tok-ada"))
    assert r.status_code == 201
    new_id = r.json()["user_id"]
    assert new_id

    r = client.post("/v1/teams", json={"name": "night owls"},
                    headers=auth("tok-ada"))
    assert r.status_code == 201
    team_id = r.json()["team_id"]
    assert client.post("/v1/teams", json={"name": "night owls"},
                       headers=auth("tok-ada")).status_code == 409

    r = client.post(f"/v1/teams/{team_id}/members", json={"user_id": new_id},
                    headers=auth("tok-ada"))
    assert r.status_code == 201
    r = client.post(f"/v1/teams/{team_id}/members", json={"user_id": new_id},
                    headers=auth("tok-ada"))
    assert r.status_code == 200
    assert client.post("/v1/teams/zzz/members", json={"user_id": new_id},
                       headers=auth("tok-ada")).status_code == 404
    assert client.post(f"/v1/teams/{team_id}/members",
                       json={"user_id": "ghost"},
                       headers=auth("tok-ada")).status_code == 404


# --- sharing ----------------------------------------------------------------

def test_share_posts_status_text(rig):
    client, store, deliveries = rig
    client.post("/v1/workouts", json=upload_body(), headers=auth("tok-ada"))
    r = client.post("/v1/share",
                    json={"user_id": "ada", "workout_id": "w1",
                          "target": "https://hooks.example/x"},
                    headers=auth("tok-ada"))
    assert r.status_code == 200
    assert r.json()["delivered"] is True
    assert deliveries == [("https://hooks.example/x", r.json()["text"])]
    assert r.json()["text"].startswith("Workout: 1.0 min")
    assert store.list_shares("w1") == [
        ("https://hooks.example/x", True, "status 200")]


def test_share_failure_reports_502_and_logs(rig):
    client, store, _ = rig
    attempts = []

    def broken(url, text):
        attempts.append(url)
        return False, "connection refused"

    app = create_app(store, TOKENS, webhook_poster=broken)
    c2 = TestClient(app)
    c2.post("/v1/workouts", json=upload_body(), headers=auth("tok-ada"))
    r = c2.post("/v1/share",
                json={"user_id": "ada", "workout_id": "w1",
                      "target": "https://hooks.example/x"},
                headers=auth("tok-ada"))
    assert r.status_code == 502
    assert r.json()["delivered"] is False
    assert attempts == ["https://hooks.example/x"]
    assert store.list_shares("w1") == [
        ("https://hooks.example/x", False, "connection refused")]


def test_share_authorization(rig):
    client, _, deliveries = rig
    client.post("/v1/workouts", json=upload_body(), headers=auth("tok-ada"))
    # bo cannot share ada's workout, even naming himself
    r = client.post("/v1/share",
                    json={"user_id": "bo", "workout_id": "w1",
                          "target": "https://hooks.example/x"},
                    headers=auth("tok-bo"))
    assert r.status_code == 403
    r = client.post("/v1/share",
                    json={"user_id": "ada", "workout_id": "w1",
                          "target": "https://hooks.example/x"},
                    headers=auth("tok-bo"))
    assert r.status_code == 403
    r = client.post("/v1/share",
                    json={"user_id": "ada", "workout_id": "nope",
                          "target": "https://hooks.example/x"},
                    headers=auth("tok-ada"))
    assert r.status_code == 404
    assert deliveries == []


# --- config loading ---------------------------------------------------------

def test_load_tokens(tmp_path):
    path = tmp_path / "tokens.json"
    path.write_text('{"tok-a": "ada", "tok-b": "bo"}')
    assert load_tokens(path) == {"tok-a": "ada", "tok-b": "bo"}
    bad = tmp_path / "bad.json"
    bad.write_text('["not", "a", "table"]')
    with pytest.raises(ValueError):
        load_tokens(bad)


def test_build_from_config(tmp_path):
    from bsnkit.ingest_service import build_from_config
    tokens = tmp_path / "tokens.json"
    tokens.write_text('{"tok-a": "ada"}')
    config = tmp_path / "service.conf"
    config.write_text(f"listen = 0.0.0.0:9100\n"
                      f"db = {tmp_path / 'wk.db'}\n"
                      f"tokens = {tokens}\n")
    app, host, port = build_from_config(config)
    assert (host, port) == ("0.0.0.0", 9100)
    c = TestClient(app)
    r = c.post("/v1/users", json={"display_name": "Ada", "user_id": "ada"},
               headers=auth("tok-a"))
    assert r.status_code == 201
