"""Command-line tool.

Every subcommand runs in-process by default. With --server URL (or the
LOWRANK_SERVER environment variable) the same commands become thin HTTP
clients: they submit the job to a running service, poll its progress, and
print the identical per-epoch lines.
"""

import time
from dataclasses import asdict

import click

from .config import RunConfig, load_config, override
from .data import DATA_DIR_ENV

SERVER_ENV = "LOWRANK_SERVER"


def _parse_ranks(text):
    if text is None:
        return None
    try:
        return tuple(int(part) for part in text.replace(" ", "").split(",") if part)
    except ValueError:
        raise click.BadParameter(f"expected a comma list of integers, got {text!r}")


def _build_config(config_path, mode, **flags):
    present = {k: v for k, v in flags.items() if v is not None}
    if mode is None:
        # infer: explicit ranks pin the ranks, a tau adapts them
        if present.get("fixed_ranks") is not None:
            mode = "fixed"
        elif "tau" in present:
            mode = "adaptive"
    try:
        if config_path:
            return override(load_config(config_path), mode=mode, **present)
        if mode is not None:
            present["mode"] = mode
        return RunConfig(**present)
    except ValueError as exc:
        raise click.UsageError(str(exc))


def _row_line(row):
    ranks = ",".join(str(r) for r in row["ranks"]) if row["ranks"] else "-"
    return (
        f"epoch {row['epoch']:>3}  "
        f"train {row['train_loss']:.4f}/{row['train_accuracy']:.2%}  "
        f"val {row['val_loss']:.4f}/{row['val_accuracy']:.2%}  "
        f"ranks [{ranks}]  "
        f"params {row['eval_params']} ({row['compression']:.1%} saved)  "
        f"{row['wall_seconds']:.1f}s"
    )


def _bench_line(row):
    return (
        f"rank {row['rank']:>5}  "
        f"step {row['train_step_mean'] * 1e3:8.2f} ms ± {row['train_step_std'] * 1e3:.2f}  "
        f"predict {row['predict_mean']:7.3f} s ± {row['predict_std']:.3f}  "
        f"ops {row['train_ops']}/{row['predict_ops']}"
    )


@click.group()
@click.option(
    "--server",
    envvar=SERVER_ENV,
    default=None,
    help="Base URL of a running service; commands submit there instead of "
    "running in-process.",
)
@click.pass_context
def main(ctx, server):
    """Train and evaluate networks whose weights live in factorized form."""
    ctx.ensure_object(dict)
    ctx.obj["server"] = server.rstrip("/") if server else None


def _client(server):
    import httpx

    return httpx.Client(base_url=server, timeout=30.0)


def _raise_for_detail(resp):
    if resp.status_code >= 400:
        try:
            detail = resp.json().get("detail")
        except Exception:
            detail = resp.text
        raise click.ClickException(f"server said {resp.status_code}: {detail}")


def _follow_job(client, job, line_of):
    """Poll a submitted job, printing rows as they land; returns the final
    info dict. Ctrl-C sends a cancel before re-raising."""
    job_id = job["id"]
    printed = 0
    try:
        while True:
            info = client.get(f"/runs/{job_id}").json()
            rows = client.get(f"/runs/{job_id}/metrics").json()["rows"]
            for row in rows[printed:]:
                click.echo(line_of(row))
            printed = len(rows)
            if info["state"] in ("done", "cancelled", "error"):
                return info
            time.sleep(0.5)
    except KeyboardInterrupt:
        client.delete(f"/runs/{job_id}")
        click.echo("cancel requested", err=True)
        raise


def _finish_or_die(info):
    if info["state"] == "error":
        raise click.ClickException(info["error"] or "job failed")
    return info.get("result") or {}


def _echo_train_result(result):
    line = f"{result.get('state', 'done')}"
    if result.get("final_ranks"):
        line += f": final ranks {result['final_ranks']}"
    if result.get("test_accuracy") is not None:
        line += f"  test accuracy {result['test_accuracy']:.2%}"
    click.echo(line)
    if result.get("out_dir"):
        click.echo(f"outputs in {result['out_dir']}")


_train_flags = [
    click.option("--config", "config_path", type=click.Path(exists=True)),
    click.option("--data-dir", envvar=DATA_DIR_ENV, default=None),
    click.option("--out", "out_dir", default=None, help="Output directory."),
    click.option("--seed", type=int, default=None),
    click.option("--epochs", type=int, default=None),
    click.option("--batch-size", type=int, default=None),
    click.option(
        "--optimizer", type=click.Choice(["euler", "adam"]), default=None
    ),
    click.option("--lr", type=float, default=None),
    click.option("--lr-decay", type=float, default=None),
    click.option("--dataset", type=click.Choice(["mnist", "synthetic"]), default=None),
    click.option("--max-batches", type=int, default=None, hidden=True),
]


def _apply(decorators):
    def wrap(fn):
        for dec in reversed(decorators):
            fn = dec(fn)
        return fn

    return wrap


@main.command()
@_apply(_train_flags)
@click.option("--arch", type=click.Choice(["mlp500", "mlp784", "lenet5"]), default=None)
@click.option("--tau", type=float, default=None, help="Adaptive truncation tolerance.")
@click.option(
    "--fixed-ranks", default=None, help="Comma list pinning each layer's rank."
)
@click.option("--dense", is_flag=True, help="Train the unfactorized baseline.")
@click.option("--freeze-epoch", type=int, default=None)
@click.pass_context
def train(ctx, config_path, dense, fixed_ranks, **flags):
    """Train a network and write metrics, rank log, and checkpoints."""
    flags["fixed_ranks"] = _parse_ranks(fixed_ranks)
    config = _build_config(config_path, "dense" if dense else None, **flags)
    server = ctx.obj.get("server")
    if server:
        with _client(server) as client:
            resp = client.post("/runs/train", json=_jsonable(asdict(config)))
            _raise_for_detail(resp)
            info = _follow_job(client, resp.json(), _row_line)
        _echo_train_result(_finish_or_die(info))
        return
    from .runner import train_run

    try:
        result = train_run(
            config, progress=lambda row: click.echo(_row_line(asdict(row)))
        )
    except (FileNotFoundError, ValueError) as exc:
        raise click.ClickException(str(exc))
    _echo_train_result(
        {
            "state": result.state,
            "out_dir": result.out_dir,
            "final_ranks": result.final_ranks,
            "test_accuracy": result.test_accuracy,
        }
    )


def _jsonable(data):
    out = {}
    for key, value in data.items():
        out[key] = list(value) if isinstance(value, tuple) else value
    return out


@main.command()
@click.argument("checkpoint", type=click.Path())
@click.option("--data-dir", envvar=DATA_DIR_ENV, default=None)
@click.option("--split", type=click.Choice(["train", "val", "test"]), default="test")
@click.option(
    "--dataset", type=click.Choice(["mnist", "synthetic"]), default=None
)
@click.pass_context
def evaluate(ctx, checkpoint, data_dir, split, dataset):
    """Score a saved checkpoint on a data split."""
    server = ctx.obj.get("server")
    if server:
        with _client(server) as client:
            resp = client.post(
                "/evaluate",
                json={
                    "checkpoint": checkpoint,
                    "data_dir": data_dir,
                    "split": split,
                    "dataset": dataset,
                },
            )
            _raise_for_detail(resp)
            report = resp.json()
    else:
        from .checkpoint import CheckpointError
        from .runner import evaluate_run

        try:
            report = evaluate_run(
                checkpoint, data_dir=data_dir, which=split, dataset=dataset
            )
        except (CheckpointError, FileNotFoundError, KeyError, ValueError) as exc:
            raise click.ClickException(str(exc))
    click.echo(
        f"{report['split']} loss {report['loss']:.4f}  "
        f"accuracy {report['accuracy']:.2%}"
    )
    click.echo(
        f"ranks {report['ranks']}  eval params {report['eval_params']}  "
        f"compression {report['compression']:.2%}"
    )


@main.command("prune-retrain")
@click.argument("checkpoint", type=click.Path())
@_apply(_train_flags)
@click.option("--rank", type=int, default=None, help="Target rank per hidden layer.")
@click.option("--tau", type=float, default=None, help="Adaptive truncation instead.")
@click.option("--arch", type=click.Choice(["mlp500", "mlp784"]), default=None)
@click.pass_context
def prune_retrain(ctx, checkpoint, config_path, rank, tau, **flags):
    """SVD-truncate a trained dense checkpoint, then retrain at fixed rank."""
    if (rank is None) == (tau is None):
        raise click.UsageError("give exactly one of --rank or --tau")
    present = {k: v for k, v in flags.items() if v is not None}
    try:
        if config_path:
            config = override(
                load_config(config_path), mode="fixed", fixed_ranks=(1,), **present
            )
        else:
            present.setdefault("epochs", 20)
            config = RunConfig(mode="fixed", fixed_ranks=(1,), **present)
    except ValueError as exc:
        raise click.UsageError(str(exc))
    server = ctx.obj.get("server")
    if server:
        payload = _jsonable(asdict(config))
        for drop in ("mode", "fixed_ranks", "freeze_epoch"):
            payload.pop(drop, None)
        payload.update({"checkpoint": checkpoint, "rank": rank, "tau": tau})
        with _client(server) as client:
            resp = client.post("/runs/prune-retrain", json=payload)
            _raise_for_detail(resp)
            info = _follow_job(client, resp.json(), _row_line)
        report = _finish_or_die(info)
    else:
        from .runner import prune_retrain_run

        try:
            report = prune_retrain_run(
                config, checkpoint, rank=rank, tau=tau,
                progress=lambda row: click.echo(_row_line(asdict(row))),
            )
        except (FileNotFoundError, ValueError) as exc:
            raise click.ClickException(str(exc))
    click.echo(
        f"before retraining {report['pre_accuracy']:.2%}  "
        f"after {report['post_accuracy']:.2%}  ranks {report['ranks']}  "
        f"compression {report['compression']:.2%}"
    )


@main.command()
@click.option("--width", type=int, default=1024)
@click.option("--ranks", default="8,16,32,64,128")
@click.option("--batch-size", type=int, default=256)
@click.option("--steps", "train_steps", type=int, default=50)
@click.option("--repeats", "predict_repeats", type=int, default=10)
@click.option("--n-predict", type=int, default=10_000)
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_dir", default=None)
@click.option("--no-dense", is_flag=True, help="Skip the dense baseline row.")
@click.option("--parallel", is_flag=True, help="Fan prediction chunks over threads.")
@click.pass_context
def benchmark(ctx, ranks, no_dense, **kwargs):
    """Time training steps and full-set prediction across ranks."""
    rank_list = _parse_ranks(ranks)
    server = ctx.obj.get("server")
    if server:
        payload = {
            "ranks": list(rank_list),
            "include_dense": not no_dense,
            **{k: v for k, v in kwargs.items() if v is not None},
        }
        with _client(server) as client:
            resp = client.post("/runs/benchmark", json=payload)
            _raise_for_detail(resp)
            info = _follow_job(client, resp.json(), _bench_line)
        _finish_or_die(info)
        return
    from .runner import benchmark_run

    benchmark_run(
        ranks=rank_list,
        include_dense=not no_dense,
        progress=lambda row: click.echo(_bench_line(asdict(row))),
        **kwargs,
    )


@main.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8000)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    main()
