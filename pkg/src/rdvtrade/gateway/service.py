"""HTTP job service over the tradespace pipeline.

Request handling stays concurrent because nothing long runs inline: a
POST that implies real work queues a job on a bounded worker pool and
returns the job id, and clients poll GET /jobs/{id} until it is DONE or
FAILED. Reads are idempotent, results are immutable once written, and
every endpoint speaks plain JSON with the field names documented on the
handler. Restart recovery marks whatever was mid-flight as FAILED while
keeping all finished jobs readable.

Error vocabulary: 404 for unknown ids, 422 for anything that fails
validation, 409 for writes that would mutate existing content or move a
job backward.
"""

from __future__ import annotations

import contextlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from typing import Callable

import numpy as np
from fastapi import FastAPI, HTTPException, Response
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from rdvtrade import dataset, scp
from rdvtrade import uncertainty as unc
from rdvtrade.gateway import work
from rdvtrade.gateway.store import ConflictError, JobStore, TransitionError
from rdvtrade.ocp import scenario_from_dict
from rdvtrade.surrogate.training import ModelState


class JobRunner:
    """Bounded pool that owns every job transition after QUEUED."""

    def __init__(self, store: JobStore, workers: int = 2):
        self._store = store
        self._pool = ThreadPoolExecutor(max_workers=max(1, workers))

    def submit(self, kind: str, inputs: dict, fn: Callable[[], dict]):
        job = self._store.create_job(kind, inputs)
        self._pool.submit(self._execute, job.id, fn)
        return job

    def _execute(self, job_id: str, fn: Callable[[], dict]) -> None:
        self._store.mark_running(job_id)
        try:
            result = fn()
        except Exception as exc:  # noqa: BLE001 -- job isolation boundary
            self._store.fail(job_id, f"{type(exc).__name__}: {exc}")
        else:
            self._store.finish(job_id, result)

    def shutdown(self) -> None:
        self._pool.shutdown(wait=True)


class ExploreRequest(BaseModel):
    """Horizon window for a sweep: ``count`` horizons over [n_min, n_max]."""

    n_min: int
    n_max: int
    count: int = 5
    methods: list[str] | None = None


def create_app(
    data_dir: str,
    model_state: ModelState | None = None,
    catalog: list[dataset.CatalogEntry] | None = None,
    workers: int = 2,
    params: unc.UncertaintyParams | None = None,
    scp_config: "scp.ScpConfig | None" = None,
) -> FastAPI:
    """Build the service around one data directory and optional model."""
    store = JobStore(data_dir)
    store.recover()
    runner = JobRunner(store, workers=workers)
    params = params or unc.UncertaintyParams()

    @contextlib.asynccontextmanager
    async def lifespan(app: FastAPI):
        yield
        runner.shutdown()

    app = FastAPI(title="rdvtrade gateway", lifespan=lifespan)
    app.state.store = store
    app.state.runner = runner

    def _get_scenario_or_404(scenario_id: str):
        scenario = store.get_scenario(scenario_id)
        if scenario is None:
            raise HTTPException(404, f"unknown scenario {scenario_id!r}")
        return scenario

    @app.post("/scenarios")
    def post_scenario(body: dict, response: Response) -> dict:
        """Validate and store a scenario; body is the scenario document.

        Fields: scenario_id, family, target{a,e,i,raan,argp,mean_anomaly},
        convention, n_steps, dt, u_max, x_init[6], x_final[6],
        drift_horizon_s, n_substeps, safety{radius_before,radius_after,
        t_switch}, relax_terminal_safety, gravity{mu,j2,radius}.
        Returns {id, created}; re-posting identical content is a no-op.
        """
        try:
            scenario = scenario_from_dict(body)
            ident, created = store.put_scenario(scenario)
        except (ValueError, KeyError, TypeError) as exc:
            raise HTTPException(422, f"invalid scenario: {exc}") from exc
        except ConflictError as exc:
            raise HTTPException(409, str(exc)) from exc
        response.status_code = 201 if created else 200
        return {"id": ident, "created": created}

    @app.post("/scenarios/{scenario_id}/explore", status_code=202)
    def post_explore(scenario_id: str, body: ExploreRequest) -> dict:
        """Queue a sweep over the horizon window; returns {id, kind, status}."""
        scenario = _get_scenario_or_404(scenario_id)
        try:
            n_list = work.horizon_grid(body.n_min, body.n_max, body.count)
            default = ("CVX", "ART", "CVX_SCP", "ART_SCP") if model_state else ("CVX", "CVX_SCP")
            methods = work.normalize_methods(body.methods or default, model_state is not None)
        except ValueError as exc:
            raise HTTPException(422, str(exc)) from exc
        job = runner.submit(
            "EXPLORE",
            {"scenario_id": scenario_id, "n_list": n_list, "methods": list(methods)},
            lambda: work.explore_result(
                store, scenario, n_list, methods, model_state, params, scp_config
            ),
        )
        return {"id": job.id, "kind": job.kind, "status": job.status}

    @app.post("/trajectories/{traj_id}/refine", status_code=202)
    def post_refine(traj_id: str) -> dict:
        """Queue a refinement of a stored trajectory; returns {id, kind, status}."""
        if store.get_trajectory(traj_id) is None:
            raise HTTPException(404, f"unknown trajectory {traj_id!r}")
        job = runner.submit(
            "REFINE",
            {"trajectory_id": traj_id},
            lambda: work.refine_result(store, traj_id, params, scp_config),
        )
        return {"id": job.id, "kind": job.kind, "status": job.status}

    @app.get("/jobs/{job_id}")
    def get_job(job_id: str) -> dict:
        """Job record: {id, kind, status, inputs, timings, error, result}.

        ``result`` is inlined once the job is DONE and null before that.
        """
        job = store.get_job(job_id)
        if job is None:
            raise HTTPException(404, f"unknown job {job_id!r}")
        payload = job.to_dict()
        payload["result"] = store.get_result(job)
        return payload

    @app.get("/trajectories/{traj_id}")
    def get_trajectory(traj_id: str) -> dict:
        """Full trajectory with per-epoch keep-out margins and flags.

        Fields: id, scenario_id, source, states, controls, cost,
        margins{epoch: worst margin}, violations[step], c1, feasible,
        scenario (the exact document the plan was solved under).
        """
        stored = store.get_trajectory(traj_id)
        if stored is None:
            raise HTTPException(404, f"unknown trajectory {traj_id!r}")
        return work.trajectory_view(stored, params)

    @app.get("/catalog/sample")
    def get_catalog_sample(n: int = 1, seed: int = 0) -> list[dict]:
        """Weighted target draw from the loaded catalog; seeded, so reads
        with the same query are idempotent."""
        if catalog is None:
            raise HTTPException(404, "no catalog loaded")
        if n < 1:
            raise HTTPException(422, "need n >= 1")
        try:
            entries = dataset.sample_targets(catalog, n, np.random.default_rng(seed))
        except ValueError as exc:
            raise HTTPException(422, str(exc)) from exc
        return [asdict(e) for e in entries]

    @app.exception_handler(TransitionError)
    async def transition_conflict(request, exc):
        return JSONResponse(status_code=409, content={"detail": str(exc)})

    return app
