"""Embedded relational store for users, teams, workouts, and raw samples.

Single-file SQLite underneath; all mutations take one process-wide lock and
run inside a transaction, so a failed insert never leaves a partial workout
behind.  Workout rows are keyed by a client-generated UUID, which is what
makes uploads idempotent end to end: inserting an id that already exists is
a no-op that reports the stored row.

The dump format is one JSON object per line with a `table` tag, emitted in
deterministic order, so two stores holding the same data produce identical
dumps (and identical digests).
"""

import hashlib
import json
import sqlite3
import threading
import uuid
from dataclasses import dataclass, field
from numbers import Real

LEADERBOARD_METRICS = ("total_duration_s", "workout_count",
                       "total_distance_m", "avg_hr_bpm")

_SCHEMA = """
CREATE TABLE IF NOT EXISTS users (
    user_id      TEXT PRIMARY KEY,
    display_name TEXT NOT NULL,
    external_ids TEXT NOT NULL DEFAULT '{}'
);
CREATE TABLE IF NOT EXISTS teams (
    team_id TEXT PRIMARY KEY,
    name    TEXT NOT NULL UNIQUE
);
CREATE TABLE IF NOT EXISTS memberships (
    user_id   TEXT NOT NULL REFERENCES users(user_id),
    team_id   TEXT NOT NULL REFERENCES teams(team_id),
    joined_at TEXT NOT NULL,
    PRIMARY KEY (user_id, team_id)
);
CREATE TABLE IF NOT EXISTS workouts (
    workout_id TEXT PRIMARY KEY,
    user_id    TEXT NOT NULL REFERENCES users(user_id),
    started_at TEXT NOT NULL,
    duration_s REAL NOT NULL,
    summary    TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS samples (
    workout_id TEXT NOT NULL REFERENCES workouts(workout_id),
    sensor     TEXT NOT NULL,
    offset_ms  INTEGER NOT NULL,
    value      REAL NOT NULL
);
CREATE INDEX IF NOT EXISTS idx_samples_workout ON samples(workout_id);
CREATE INDEX IF NOT EXISTS idx_workouts_user ON workouts(user_id, started_at);
CREATE TABLE IF NOT EXISTS share_log (
    share_id   TEXT PRIMARY KEY,
    workout_id TEXT NOT NULL,
    target     TEXT NOT NULL,
    ok         INTEGER NOT NULL,
    detail     TEXT NOT NULL,
    created_at TEXT NOT NULL
);
"""


class DatastoreError(Exception):
    """Base for store failures."""


class UnknownUser(DatastoreError):
    pass


class UnknownTeam(DatastoreError):
    pass


class UnknownWorkout(DatastoreError):
    pass


class DuplicateTeamName(DatastoreError):
    pass


class MalformedSamples(DatastoreError):
    pass


@dataclass
class User:
    user_id: str
    display_name: str
    external_ids: dict = field(default_factory=dict)


@dataclass
class Team:
    team_id: str
    name: str


@dataclass
class Workout:
    workout_id: str
    user_id: str
    started_at: str     # ISO 8601
    duration_s: float
    summary: dict = field(default_factory=dict)


class Datastore:
    """All operations are safe to call from several threads of one process."""

    def __init__(self, path: str = ":memory:"):
        self._lock = threading.RLock()
        self._conn = sqlite3.connect(path, check_same_thread=False)
        self._conn.execute("PRAGMA foreign_keys = ON")
        with self._lock, self._conn:
            self._conn.executescript(_SCHEMA)

    def close(self) -> None:
        self._conn.close()

    # -- users and teams -------------------------------------------------

    def upsert_user(self, user: User) -> str:
        if not user.display_name:
            raise DatastoreError("display_name must not be empty")
        with self._lock, self._conn:
            self._conn.execute(
                "INSERT INTO users (user_id, display_name, external_ids) "
                "VALUES (?, ?, ?) ON CONFLICT(user_id) DO UPDATE SET "
                "display_name = excluded.display_name, "
                "external_ids = excluded.external_ids",
                (user.user_id, user.display_name,
                 json.dumps(user.external_ids, sort_keys=True)))
        return user.user_id

    def get_user(self, user_id: str) -> User:
        row = self._conn.execute(
            "SELECT user_id, display_name, external_ids FROM users "
            "WHERE user_id = ?", (user_id,)).fetchone()
        if row is None:
            raise UnknownUser(user_id)
        return User(row[0], row[1], json.loads(row[2]))

    def user_exists(self, user_id: str) -> bool:
        return self._conn.execute("SELECT 1 FROM users WHERE user_id = ?",
                                  (user_id,)).fetchone() is not None

    def create_team(self, name: str, team_id: str | None = None) -> Team:
        if not name:
            raise DatastoreError("team name must not be empty")
        team_id = team_id or str(uuid.uuid4())
        try:
            with self._lock, self._conn:
                self._conn.execute(
                    "INSERT INTO teams (team_id, name) VALUES (?, ?)",
                    (team_id, name))
        except sqlite3.IntegrityError as exc:
            raise DuplicateTeamName(name) from exc
        return Team(team_id, name)

    def team_exists(self, team_id: str) -> bool:
        return self._conn.execute("SELECT 1 FROM teams WHERE team_id = ?",
                                  (team_id,)).fetchone() is not None

    def join_team(self, user_id: str, team_id: str,
                  joined_at: str = "") -> bool:
        """Put a user on a team; joining again is a no-op.  Returns True
        when the membership is new."""
        if not self.user_exists(user_id):
            raise UnknownUser(user_id)
        if not self.team_exists(team_id):
            raise UnknownTeam(team_id)
        with self._lock, self._conn:
            cur = self._conn.execute(
                "INSERT OR IGNORE INTO memberships (user_id, team_id, joined_at) "
                "VALUES (?, ?, ?)", (user_id, team_id, joined_at))
        return cur.rowcount > 0

    def team_members(self, team_id: str) -> list[User]:
        if not self.team_exists(team_id):
            raise UnknownTeam(team_id)
        rows = self._conn.execute(
            "SELECT u.user_id, u.display_name, u.external_ids FROM users u "
            "JOIN memberships m ON m.user_id = u.user_id "
            "WHERE m.team_id = ? ORDER BY u.user_id", (team_id,)).fetchall()
        return [User(r[0], r[1], json.loads(r[2])) for r in rows]

    def share_team(self, user_a: str, user_b: str) -> bool:
        """True when the two users sit on at least one common team."""
        row = self._conn.execute(
            "SELECT 1 FROM memberships a JOIN memberships b "
            "ON a.team_id = b.team_id WHERE a.user_id = ? AND b.user_id = ? "
            "LIMIT 1", (user_a, user_b)).fetchone()
        return row is not None

    # -- workouts --------------------------------------------------------

    def insert_workout(self, workout: Workout, samples=()) -> tuple[str, bool]:
        """Insert a workout and its sample rows in one transaction.

        `samples` is an iterable of (sensor, offset_ms, value).  Returns
        (workout_id, created); re-inserting an existing id changes nothing
        and reports created=False.
        """
        if not self.user_exists(workout.user_id):
            raise UnknownUser(workout.user_id)
        with self._lock:
            existing = self._conn.execute(
                "SELECT 1 FROM workouts WHERE workout_id = ?",
                (workout.workout_id,)).fetchone()
            if existing is not None:
                return workout.workout_id, False

            def checked(rows):
                last = {}
                for sensor, offset_ms, value in rows:
                    if not isinstance(sensor, str) or not sensor:
                        raise MalformedSamples("sensor kind must be a string")
                    if not isinstance(offset_ms, int):
                        raise MalformedSamples("offset_ms must be an integer")
                    if not isinstance(value, Real):
                        raise MalformedSamples("value must be numeric")
                    if last.get(sensor, -1) > offset_ms:
                        raise MalformedSamples(
                            f"offset_ms decreases within sensor {sensor!r}")
                    last[sensor] = offset_ms
                    yield (workout.workout_id, sensor, offset_ms, float(value))

            # the transaction rolls back if the sample check trips midway
            with self._conn:
                self._conn.execute(
                    "INSERT INTO workouts (workout_id, user_id, started_at, "
                    "duration_s, summary) VALUES (?, ?, ?, ?, ?)",
                    (workout.workout_id, workout.user_id, workout.started_at,
                     workout.duration_s,
                     json.dumps(workout.summary, sort_keys=True)))
                self._conn.executemany(
                    "INSERT INTO samples (workout_id, sensor, offset_ms, value) "
                    "VALUES (?, ?, ?, ?)", checked(samples))
        return workout.workout_id, True

    def get_workout(self, workout_id: str) -> Workout:
        row = self._conn.execute(
            "SELECT workout_id, user_id, started_at, duration_s, summary "
            "FROM workouts WHERE workout_id = ?", (workout_id,)).fetchone()
        if row is None:
            raise UnknownWorkout(workout_id)
        return Workout(row[0], row[1], row[2], row[3], json.loads(row[4]))

    def get_samples(self, workout_id: str) -> list[tuple[str, int, float]]:
        rows = self._conn.execute(
            "SELECT sensor, offset_ms, value FROM samples "
            "WHERE workout_id = ? ORDER BY rowid", (workout_id,)).fetchall()
        return [(r[0], r[1], r[2]) for r in rows]

    def query_history(self, user_id: str, t_from: str | None = None,
                      t_to: str | None = None) -> list[Workout]:
        """Workouts for a user ordered by start time, optionally windowed
        by inclusive ISO timestamps."""
        if not self.user_exists(user_id):
            raise UnknownUser(user_id)
        sql = ("SELECT workout_id, user_id, started_at, duration_s, summary "
               "FROM workouts WHERE user_id = ?")
        args: list = [user_id]
        if t_from is not None:
            sql += " AND started_at >= ?"
            args.append(t_from)
        if t_to is not None:
            sql += " AND started_at <= ?"
            args.append(t_to)
        sql += " ORDER BY started_at, workout_id"
        rows = self._conn.execute(sql, args).fetchall()
        return [Workout(r[0], r[1], r[2], r[3], json.loads(r[4])) for r in rows]

    # -- leaderboard -----------------------------------------------------

    def leaderboard(self, team_id: str, metric: str,
                    t_from: str | None = None,
                    t_to: str | None = None) -> list[tuple[User, float]]:
        """Rank every team member by the metric over the window.

        Members without workouts in range rank with value 0; ties break by
        display name ascending, then user id for full determinism.
        """
        if metric not in LEADERBOARD_METRICS:
            raise ValueError(f"unknown metric {metric!r}")
        members = self.team_members(team_id)
        scored = []
        for user in members:
            workouts = self.query_history(user.user_id, t_from, t_to)
            if metric == "workout_count":
                value = float(len(workouts))
            elif metric == "total_duration_s":
                value = float(sum(w.duration_s for w in workouts))
            elif metric == "total_distance_m":
                value = float(sum(w.summary.get("distance_m") or 0.0
                                  for w in workouts))
            else:  # avg_hr_bpm: mean of per-workout averages that exist
                rates = [w.summary.get("avg_hr_bpm") for w in workouts]
                rates = [r for r in rates if r is not None]
                value = sum(rates) / len(rates) if rates else 0.0
            scored.append((user, value))
        scored.sort(key=lambda pair: (-pair[1], pair[0].display_name,
                                      pair[0].user_id))
        return scored

    # -- share log -------------------------------------------------------

    def record_share(self, workout_id: str, target: str, ok: bool,
                     detail: str, created_at: str = "") -> str:
        share_id = str(uuid.uuid4())
        with self._lock, self._conn:
            self._conn.execute(
                "INSERT INTO share_log (share_id, workout_id, target, ok, "
                "detail, created_at) VALUES (?, ?, ?, ?, ?, ?)",
                (share_id, workout_id, target, int(ok), detail, created_at))
        return share_id

    def list_shares(self, workout_id: str) -> list[tuple[str, bool, str]]:
        rows = self._conn.execute(
            "SELECT target, ok, detail FROM share_log WHERE workout_id = ? "
            "ORDER BY rowid", (workout_id,)).fetchall()
        return [(r[0], bool(r[1]), r[2]) for r in rows]

    # -- dump, load, digest ----------------------------------------------

    def _dump_lines(self):
        """Deterministic line-delimited dump of the health-data tables.

        The share log records outbound deliveries, not health data, and two
        stores that agree on every workout should digest equal; it is
        therefore excluded here.
        """
        for row in self._conn.execute(
                "SELECT user_id, display_name, external_ids FROM users "
                "ORDER BY user_id"):
            yield json.dumps({"table": "users", "user_id": row[0],
                              "display_name": row[1],
                              "external_ids": json.loads(row[2])},
                             sort_keys=True)
        for row in self._conn.execute(
                "SELECT team_id, name FROM teams ORDER BY team_id"):
            yield json.dumps({"table": "teams", "team_id": row[0],
                              "name": row[1]}, sort_keys=True)
        for row in self._conn.execute(
                "SELECT user_id, team_id, joined_at FROM memberships "
                "ORDER BY user_id, team_id"):
            yield json.dumps({"table": "memberships", "user_id": row[0],
                              "team_id": row[1], "joined_at": row[2]},
                             sort_keys=True)
        for row in self._conn.execute(
                "SELECT workout_id, user_id, started_at, duration_s, summary "
                "FROM workouts ORDER BY workout_id"):
            yield json.dumps({"table": "workouts", "workout_id": row[0],
                              "user_id": row[1], "started_at": row[2],
                              "duration_s": row[3],
                              "summary": json.loads(row[4])}, sort_keys=True)
        for row in self._conn.execute(
                "SELECT workout_id, sensor, offset_ms, value FROM samples "
                "ORDER BY workout_id, sensor, offset_ms, rowid"):
            yield json.dumps({"table": "samples", "workout_id": row[0],
                              "sensor": row[1], "offset_ms": row[2],
                              "value": row[3]}, sort_keys=True)

    def export_dump(self, path) -> None:
        with self._lock, open(path, "w") as fh:
            for line in self._dump_lines():
                fh.write(line + "\n")

    def import_dump(self, path) -> None:
        """Load a dump produced by `export_dump` into this store."""
        with self._lock, open(path) as fh, self._conn:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                table = rec.pop("table")
                if table == "users":
                    self._conn.execute(
                        "INSERT OR REPLACE INTO users VALUES (?, ?, ?)",
                        (rec["user_id"], rec["display_name"],
                         json.dumps(rec["external_ids"], sort_keys=True)))
                elif table == "teams":
                    self._conn.execute(
                        "INSERT OR REPLACE INTO teams VALUES (?, ?)",
                        (rec["team_id"], rec["name"]))
                elif table == "memberships":
                    self._conn.execute(
                        "INSERT OR REPLACE INTO memberships VALUES (?, ?, ?)",
                        (rec["user_id"], rec["team_id"], rec["joined_at"]))
                elif table == "workouts":
                    self._conn.execute(
                        "INSERT OR REPLACE INTO workouts VALUES (?, ?, ?, ?, ?)",
                        (rec["workout_id"], rec["user_id"], rec["started_at"],
                         rec["duration_s"],
                         json.dumps(rec["summary"], sort_keys=True)))
                elif table == "samples":
                    self._conn.execute(
                        "INSERT INTO samples VALUES (?, ?, ?, ?)",
                        (rec["workout_id"], rec["sensor"], rec["offset_ms"],
                         rec["value"]))
                else:
                    raise DatastoreError(f"unknown dump table {table!r}")

    def state_digest(self) -> str:
        """SHA-256 over the canonical dump; equal digests mean equal data."""
        h = hashlib.sha256()
        with self._lock:
            for line in self._dump_lines():
                h.update(line.encode())
                h.update(b"\n")
        return h.hexdigest()
