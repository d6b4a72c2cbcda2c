"""HTTP service: submit training/pruning/benchmark jobs, poll their
progress, evaluate checkpoints synchronously.

Jobs run on background threads against their own network instances, so the
service stays responsive while a run is in flight. State lives in process;
durability comes from the checkpoints and CSVs the jobs write.
"""

from dataclasses import asdict

from fastapi import FastAPI, HTTPException

from ..checkpoint import CheckpointError
from ..data import find_mnist_dir
from ..runner import benchmark_run, evaluate_run, prune_retrain_run, train_run
from .jobs import JobRegistry
from .schemas import (
    BenchmarkRequest,
    EvaluateRequest,
    JobInfo,
    PruneRetrainRequest,
    TrainRequest,
)


def _check_data(config):
    # fail the submit, not the job, when the data cannot possibly be found
    if config.dataset == "mnist" and find_mnist_dir(config.data_dir) is None:
        raise HTTPException(
            status_code=400,
            detail="image data not found; give data_dir or set LOWRANK_DATA_DIR",
        )


def create_app(registry: JobRegistry = None) -> FastAPI:
    app = FastAPI(title="lowrank", version="0.1.0")
    jobs = registry if registry is not None else JobRegistry()
    app.state.jobs = jobs

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.post("/runs/train", response_model=JobInfo)
    def submit_train(req: TrainRequest):
        try:
            config = req.to_config()
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        _check_data(config)

        def target(progress, should_stop):
            result = train_run(
                config,
                progress=lambda row: progress(asdict(row)),
                should_stop=should_stop,
            )
            return {
                "state": result.state,
                "out_dir": result.out_dir,
                "final_ranks": result.final_ranks,
                "test_loss": result.test_loss,
                "test_accuracy": result.test_accuracy,
                "best_epoch": result.best_epoch,
                "epochs_run": len(result.rows),
            }

        return jobs.submit("train", target).info()

    @app.post("/runs/prune-retrain", response_model=JobInfo)
    def submit_prune(req: PruneRetrainRequest):
        if (req.rank is None) == (req.tau is None):
            raise HTTPException(
                status_code=400, detail="give exactly one of rank or tau"
            )
        try:
            config = req.to_config()
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        _check_data(config)

        def target(progress, should_stop):
            return prune_retrain_run(
                config,
                req.checkpoint,
                rank=req.rank,
                tau=req.tau,
                progress=lambda row: progress(asdict(row)),
                should_stop=should_stop,
            )

        return jobs.submit("prune-retrain", target).info()

    @app.post("/runs/benchmark", response_model=JobInfo)
    def submit_benchmark(req: BenchmarkRequest):
        def target(progress, should_stop):
            rows = benchmark_run(
                width=req.width,
                ranks=tuple(req.ranks),
                batch_size=req.batch_size,
                train_steps=req.train_steps,
                predict_repeats=req.predict_repeats,
                n_predict=req.n_predict,
                seed=req.seed,
                out_dir=req.out_dir,
                include_dense=req.include_dense,
                parallel=req.parallel,
                progress=lambda row: progress(asdict(row)),
                should_stop=should_stop,
            )
            return {"rows": [asdict(r) for r in rows], "out_dir": req.out_dir}

        return jobs.submit("benchmark", target).info()

    @app.get("/runs")
    def list_runs():
        return [job.info() for job in jobs.all()]

    @app.get("/runs/{job_id}", response_model=JobInfo)
    def get_run(job_id: str):
        job = jobs.get(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail=f"no job {job_id}")
        return job.info()

    @app.get("/runs/{job_id}/metrics")
    def get_metrics(job_id: str):
        job = jobs.get(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail=f"no job {job_id}")
        return {"rows": job.metrics()}

    @app.delete("/runs/{job_id}", response_model=JobInfo)
    def cancel_run(job_id: str):
        job = jobs.cancel(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail=f"no job {job_id}")
        return job.info()

    @app.post("/evaluate")
    def evaluate(req: EvaluateRequest):
        try:
            return evaluate_run(
                req.checkpoint,
                data_dir=req.data_dir,
                which=req.split,
                dataset=req.dataset,
            )
        except (CheckpointError, FileNotFoundError, KeyError, ValueError) as exc:
            raise HTTPException(status_code=400, detail=str(exc))

    return app
