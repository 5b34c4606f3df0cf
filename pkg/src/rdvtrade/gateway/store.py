"""Append-only disk store for scenarios, trajectories, jobs, and results.

One JSON file per object, grouped in four subdirectories of the data
directory. Nothing is ever deleted or rewritten except the job record,
whose status advances monotonically; results are written exactly once
right before the owning job turns DONE. Restarting a process on the same
directory therefore keeps every finished job readable, and anything that
was still queued or running is marked FAILED during recovery rather than
silently resurrected.

Writes go through an atomic replace so a crash never leaves a torn file,
and trajectory writes take a per-scenario lock so concurrent explore and
refine jobs on the same scenario serialize their output.
"""

from __future__ import annotations

import json
import os
import re
import threading
import time
import uuid
from dataclasses import dataclass, replace
from pathlib import Path

from rdvtrade import ocp

JOB_KINDS = ("EXPLORE", "REFINE", "BENCH", "TRAIN", "DATASET")
JOB_STATUSES = ("QUEUED", "RUNNING", "DONE", "FAILED")

#: Terminal statuses share the top rank so neither can follow the other.
_STATUS_RANK = {"QUEUED": 0, "RUNNING": 1, "DONE": 2, "FAILED": 2}


class ConflictError(RuntimeError):
    """A write collided with an existing object of different content."""


class TransitionError(RuntimeError):
    """A job status update would move backward or leave a terminal state."""


@dataclass(frozen=True)
class Job:
    """One unit of queued work and its lifecycle bookkeeping.

    ``result`` is a reference (the result file's name), not the payload;
    ``timings`` records wall-clock epochs for queueing, start, and finish.
    """

    id: str
    kind: str
    status: str
    inputs: dict
    result: str | None = None
    error: str | None = None
    timings: dict | None = None

    def validate(self) -> None:
        if self.kind not in JOB_KINDS:
            raise ValueError(f"unknown job kind {self.kind!r}")
        if self.status not in JOB_STATUSES:
            raise ValueError(f"unknown job status {self.status!r}")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind,
            "status": self.status,
            "inputs": self.inputs,
            "result": self.result,
            "error": self.error,
            "timings": self.timings or {},
        }


def job_from_dict(data: dict) -> Job:
    job = Job(
        id=data["id"],
        kind=data["kind"],
        status=data["status"],
        inputs=data["inputs"],
        result=data.get("result"),
        error=data.get("error"),
        timings=data.get("timings") or {},
    )
    job.validate()
    return job


def _new_id(prefix: str) -> str:
    return f"{prefix}-{uuid.uuid4().hex[:12]}"


class JobStore:
    """Filesystem-backed object store with forward-only job transitions."""

    def __init__(self, data_dir: str | Path):
        self.root = Path(data_dir)
        for sub in ("scenarios", "trajectories", "jobs", "results"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._scenario_locks: dict[str, threading.RLock] = {}

    # -- low-level helpers ------------------------------------------------

    def _path(self, sub: str, ident: str) -> Path:
        # Idents become file names and may arrive from URLs, so anything
        # that could escape the subdirectory is rejected outright.
        if not re.fullmatch(r"[A-Za-z0-9][A-Za-z0-9._-]{0,127}", ident):
            raise ValueError(f"unsafe object id {ident!r}")
        return self.root / sub / f"{ident}.json"

    def _write(self, path: Path, payload: dict) -> None:
        tmp = path.parent / (path.name + ".tmp")
        tmp.write_text(json.dumps(payload, indent=1, sort_keys=True))
        os.replace(tmp, path)

    def _read(self, path: Path) -> dict | None:
        if not path.exists():
            return None
        return json.loads(path.read_text())

    def scenario_lock(self, scenario_id: str) -> threading.RLock:
        # Reentrant because callers that batch several writes hold the lock
        # around put_trajectory, which acquires it again for its own write.
        with self._lock:
            return self._scenario_locks.setdefault(scenario_id, threading.RLock())

    # -- scenarios ---------------------------------------------------------

    def put_scenario(self, scenario: ocp.Scenario) -> tuple[str, bool]:
        """Store under the scenario's own id; returns (id, created).

        Re-posting identical content is idempotent; different content
        under a taken id is refused, because stored objects never change.
        """
        ident = scenario.scenario_id
        payload = scenario.to_dict()
        with self._lock:
            existing = self._read(self._path("scenarios", ident))
            if existing is not None:
                if existing == payload:
                    return ident, False
                raise ConflictError(f"scenario {ident!r} already exists with different content")
            self._write(self._path("scenarios", ident), payload)
        return ident, True

    def get_scenario(self, ident: str) -> ocp.Scenario | None:
        data = self._read_safe("scenarios", ident)
        return ocp.scenario_from_dict(data) if data is not None else None

    def _read_safe(self, sub: str, ident: str) -> dict | None:
        """Read for lookups: malformed ids are misses, not errors."""
        try:
            path = self._path(sub, ident)
        except ValueError:
            return None
        return self._read(path)

    # -- trajectories --------------------------------------------------------

    def put_trajectory(self, scenario: ocp.Scenario, traj: ocp.Trajectory) -> str:
        """Store a trajectory with its exact scenario embedded.

        The embedded scenario matters: sweep points re-solve the base
        geometry at different horizons, so the stored copy, not the base
        scenario record, is what a later refinement must load.
        """
        ident = _new_id("trj")
        payload = {
            "id": ident,
            "scenario_id": scenario.scenario_id,
            "scenario": scenario.to_dict(),
            "source": traj.source,
            "states": traj.to_dict()["states"],
            "controls": traj.to_dict()["controls"],
            "cost": traj.cost,
        }
        with self.scenario_lock(scenario.scenario_id):
            self._write(self._path("trajectories", ident), payload)
        return ident

    def get_trajectory(self, ident: str) -> dict | None:
        return self._read_safe("trajectories", ident)

    # -- jobs ---------------------------------------------------------------

    def create_job(self, kind: str, inputs: dict) -> Job:
        job = Job(
            id=_new_id("job"),
            kind=kind,
            status="QUEUED",
            inputs=inputs,
            timings={"queued_at": time.time()},
        )
        job.validate()
        with self._lock:
            self._write(self._path("jobs", job.id), job.to_dict())
        return job

    def get_job(self, ident: str) -> Job | None:
        data = self._read_safe("jobs", ident)
        return job_from_dict(data) if data is not None else None

    def _transition(self, job: Job, status: str, **updates) -> Job:
        if _STATUS_RANK[status] <= _STATUS_RANK[job.status]:
            raise TransitionError(f"job {job.id} cannot move {job.status} -> {status}")
        timings = dict(job.timings or {})
        if status == "RUNNING":
            timings["started_at"] = time.time()
        else:
            timings["finished_at"] = time.time()
        job = replace(job, status=status, timings=timings, **updates)
        self._write(self._path("jobs", job.id), job.to_dict())
        return job

    def mark_running(self, ident: str) -> Job:
        with self._lock:
            job = self.get_job(ident)
            if job is None:
                raise KeyError(ident)
            return self._transition(job, "RUNNING")

    def finish(self, ident: str, result_payload: dict) -> Job:
        """Write the result file, then flip the job to DONE.

        The result file is created exclusively: a second finish on the
        same job is a conflict, which keeps DONE results immutable.
        """
        result_name = f"{ident}.json"
        path = self.root / "results" / result_name
        with self._lock:
            job = self.get_job(ident)
            if job is None:
                raise KeyError(ident)
            if path.exists():
                raise ConflictError(f"result for job {ident} already written")
            self._write(path, result_payload)
            return self._transition(job, "DONE", result=result_name)

    def fail(self, ident: str, error: str) -> Job:
        with self._lock:
            job = self.get_job(ident)
            if job is None:
                raise KeyError(ident)
            return self._transition(job, "FAILED", error=error)

    def get_result(self, job: Job) -> dict | None:
        if job.result is None:
            return None
        return self._read(self.root / "results" / job.result)

    # -- recovery -------------------------------------------------------------

    def recover(self) -> int:
        """Fail every non-terminal job left over from a previous process.

        Returns the number of jobs failed. DONE and FAILED jobs are left
        untouched, so finished work survives restarts.
        """
        failed = 0
        for path in sorted((self.root / "jobs").glob("*.json")):
            job = job_from_dict(json.loads(path.read_text()))
            if job.status in ("QUEUED", "RUNNING"):
                self.fail(job.id, "interrupted by service restart")
                failed += 1
        return failed
