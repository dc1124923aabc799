"""REST ingestion service for gateway uploads, history, and leaderboards.

All routes live under /v1 and require a bearer token from a static table
mapping token to user id.  Authorization is ownership based: you upload and
share your own workouts, and you read another user's history, or a team
leaderboard, only when you share a team with them or sit on that team.
History responses never include raw sample rows, so samples cannot leak
across users at all.

The server trusts no client arithmetic: each upload's summary is recomputed
from the submitted sample rows, and a deviation beyond tolerance (average
heart rate 1 bpm, distance 0.1 m) is accepted but flagged
"summary-mismatch" for later review.  Uploads are idempotent by workout id.
"""

import json
import uuid
from datetime import datetime

import httpx
from fastapi import Depends, FastAPI, Header, Query
from fastapi.exceptions import HTTPException
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .datastore import (Datastore, DuplicateTeamName, User, UnknownWorkout,
                        LEADERBOARD_METRICS, Workout)
from .gateway import format_status
from .session_metrics import SessionSummary

AVG_HR_TOLERANCE_BPM = 1.0
DISTANCE_TOLERANCE_M = 0.1


class SampleIn(BaseModel):
    sensor: str
    offset_ms: int
    value: float


class WorkoutIn(BaseModel):
    user_id: str
    workout_id: str
    started_at: str
    duration_s: float
    summary: dict
    samples: list[SampleIn] = Field(default_factory=list)


class UserIn(BaseModel):
    display_name: str
    user_id: str | None = None
    external_ids: dict = Field(default_factory=dict)


class TeamIn(BaseModel):
    name: str


class MemberIn(BaseModel):
    user_id: str


class ShareIn(BaseModel):
    user_id: str
    workout_id: str
    target: str


def _parse_iso(text: str) -> datetime | None:
    try:
        return datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError:
        return None


def recompute_from_samples(samples) -> tuple[float | None, float]:
    """Server-side summary check: average heart rate and total distance
    derived from nothing but the sample rows.

    Inter-beat rows are authoritative for the average when present, the
    per-message heart-rate rows are the fallback; distance rows carry the
    cumulative rollover-corrected meters, so the last one is the total.
    """
    ibis = [s.value for s in samples if s.sensor == "ibi" and s.value > 0]
    hrs = [s.value for s in samples if s.sensor == "hr" and s.value > 0]
    dists = [s.value for s in samples if s.sensor == "distance"]
    if ibis:
        avg = 60000.0 / (sum(ibis) / len(ibis))
    elif hrs:
        avg = sum(hrs) / len(hrs)
    else:
        avg = None
    return avg, (max(dists) if dists else 0.0)


def _default_poster(url: str, text: str) -> tuple[bool, str]:
    try:
        resp = httpx.post(url, json={"text": text}, timeout=10.0)
    except Exception as exc:
        return False, str(exc)
    return 200 <= resp.status_code < 300, f"status {resp.status_code}"


def create_app(store: Datastore, tokens: dict[str, str],
               webhook_poster=None) -> FastAPI:
    """Build the service around a store and a token table.

    `webhook_poster(url, text) -> (ok, detail)` performs share deliveries;
    tests inject a recorder here.  The store serializes its own writes, and
    no store lock is ever held across a webhook call.
    """
    poster = webhook_poster or _default_poster
    app = FastAPI(title="workout ingestion")
    app.state.store = store

    def requester(authorization: str | None = Header(default=None)) -> str:
        if not authorization or not authorization.startswith("Bearer "):
            raise HTTPException(401, "bearer token required")
        user = tokens.get(authorization[len("Bearer "):])
        if user is None:
            raise HTTPException(401, "unknown token")
        return user

    def can_view(viewer: str, owner: str) -> bool:
        return viewer == owner or store.share_team(viewer, owner)

    @app.post("/v1/workouts")
    def post_workout(body: WorkoutIn, auth: str = Depends(requester)):
        if auth != body.user_id:
            raise HTTPException(403, "token does not own this user id")
        if not store.user_exists(body.user_id):
            raise HTTPException(404, "unknown user")
        started = _parse_iso(body.started_at)
        if started is None:
            raise HTTPException(422, "started_at is not an ISO timestamp")
        if body.duration_s < 0:
            raise HTTPException(422, "duration_s must be nonnegative")
        last: dict[str, int] = {}
        for s in body.samples:
            if last.get(s.sensor, s.offset_ms) > s.offset_ms:
                raise HTTPException(
                    422, f"offset_ms decreases within sensor {s.sensor!r}")
            last[s.sensor] = s.offset_ms

        flags = []
        avg, dist = recompute_from_samples(body.samples)
        claimed_avg = body.summary.get("avg_hr_bpm")
        claimed_dist = body.summary.get("distance_m") or 0.0
        if (claimed_avg is None) != (avg is None):
            flags.append("summary-mismatch")
        elif claimed_avg is not None and abs(claimed_avg - avg) > AVG_HR_TOLERANCE_BPM:
            flags.append("summary-mismatch")
        elif abs(claimed_dist - dist) > DISTANCE_TOLERANCE_M:
            flags.append("summary-mismatch")

        summary = dict(body.summary)
        summary["flags"] = flags
        wid, created = store.insert_workout(
            Workout(workout_id=body.workout_id, user_id=body.user_id,
                    started_at=started.isoformat(),
                    duration_s=body.duration_s, summary=summary),
            ((s.sensor, s.offset_ms, s.value) for s in body.samples))
        return JSONResponse(
            status_code=201 if created else 200,
            content={"workout_id": wid, "request_id": uuid.uuid4().hex,
                     "flags": flags})

    def _window(t_from: str | None, t_to: str | None) -> tuple[str | None, str | None]:
        lo = hi = None
        if t_from is not None:
            parsed = _parse_iso(t_from)
            if parsed is None:
                raise HTTPException(422, "bad 'from' timestamp")
            lo = parsed.isoformat()
        if t_to is not None:
            parsed = _parse_iso(t_to)
            if parsed is None:
                raise HTTPException(422, "bad 'to' timestamp")
            hi = parsed.isoformat()
        if lo is not None and hi is not None:
            try:
                backwards = _parse_iso(t_from) > _parse_iso(t_to)
            except TypeError:
                raise HTTPException(422, "mixed naive and zoned timestamps")
            if backwards:
                raise HTTPException(422, "'from' is after 'to'")
        return lo, hi

    @app.get("/v1/users/{user_id}/workouts")
    def get_history(user_id: str, auth: str = Depends(requester),
                    t_from: str | None = Query(default=None, alias="from"),
                    t_to: str | None = Query(default=None, alias="to")):
        if not store.user_exists(user_id):
            raise HTTPException(404, "unknown user")
        if not can_view(auth, user_id):
            raise HTTPException(403, "no shared team with this user")
        lo, hi = _window(t_from, t_to)
        workouts = store.query_history(user_id, lo, hi)
        return {"workouts": [
            {"workout_id": w.workout_id, "started_at": w.started_at,
             "duration_s": w.duration_s, "summary": w.summary}
            for w in workouts]}

    @app.get("/v1/teams/{team_id}/leaderboard")
    def get_leaderboard(team_id: str, metric: str,
                        auth: str = Depends(requester),
                        t_from: str | None = Query(default=None, alias="from"),
                        t_to: str | None = Query(default=None, alias="to")):
        if not store.team_exists(team_id):
            raise HTTPException(404, "unknown team")
        if metric not in LEADERBOARD_METRICS:
            raise HTTPException(422, f"metric must be one of {LEADERBOARD_METRICS}")
        members = {u.user_id for u in store.team_members(team_id)}
        if auth not in members:
            raise HTTPException(403, "not a member of this team")
        lo, hi = _window(t_from, t_to)
        rows = store.leaderboard(team_id, metric, lo, hi)
        return {"metric": metric, "leaderboard": [
            {"user_id": u.user_id, "display_name": u.display_name,
             "value": value} for u, value in rows]}

    @app.post("/v1/users", status_code=201)
    def post_user(body: UserIn, auth: str = Depends(requester)):
        user_id = body.user_id or str(uuid.uuid4())
        store.upsert_user(User(user_id, body.display_name, body.external_ids))
        return {"user_id": user_id}

    @app.post("/v1/teams")
    def post_team(body: TeamIn, auth: str = Depends(requester)):
        try:
            team = store.create_team(body.name)
        except DuplicateTeamName:
            raise HTTPException(409, f"team name {body.name!r} already exists")
        return JSONResponse(status_code=201,
                            content={"team_id": team.team_id, "name": team.name})

    @app.post("/v1/teams/{team_id}/members")
    def post_member(team_id: str, body: MemberIn,
                    auth: str = Depends(requester)):
        if not store.team_exists(team_id):
            raise HTTPException(404, "unknown team")
        if not store.user_exists(body.user_id):
            raise HTTPException(404, "unknown user")
        created = store.join_team(body.user_id, team_id)
        return JSONResponse(status_code=201 if created else 200,
                            content={"team_id": team_id,
                                     "user_id": body.user_id})

    @app.post("/v1/share")
    def post_share(body: ShareIn, auth: str = Depends(requester)):
        if auth != body.user_id:
            raise HTTPException(403, "token does not own this user id")
        try:
            workout = store.get_workout(body.workout_id)
        except UnknownWorkout:
            raise HTTPException(404, "unknown workout")
        if workout.user_id != body.user_id:
            raise HTTPException(403, "cannot share another user's workout")
        text = format_status(SessionSummary.from_dict(workout.summary))
        ok, detail = poster(body.target, text)  # no store lock held here
        store.record_share(body.workout_id, body.target, ok, detail)
        if not ok:
            return JSONResponse(status_code=502,
                                content={"delivered": False, "detail": detail,
                                         "text": text})
        return {"delivered": True, "text": text}

    return app


def load_tokens(path) -> dict[str, str]:
    """Token table file: a JSON object of token -> user id."""
    with open(path) as fh:
        table = json.load(fh)
    if not isinstance(table, dict):
        raise ValueError("token table must be a JSON object")
    return {str(k): str(v) for k, v in table.items()}


def build_from_config(path) -> tuple[FastAPI, str, int]:
    """Assemble (app, host, port) from a key=value service config with
    keys: listen (host:port), tokens (path), db (path)."""
    kv = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
    listen = kv.get("listen", "127.0.0.1:8400")
    host, _, port = listen.rpartition(":")
    store = Datastore(kv.get("db", "workouts.db"))
    tokens = load_tokens(kv["tokens"]) if "tokens" in kv else {}
    return create_app(store, tokens), host or "127.0.0.1", int(port)
