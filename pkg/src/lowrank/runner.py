"""The four long-running jobs: train, evaluate, prune-and-retrain, and the
timing benchmark. Both the command-line tool and the service call these.

Each loop polls an optional `should_stop` callable between steps and reports
per-epoch progress through an optional callback, which is what makes the
jobs cancellable and observable when they run on a background thread.
"""

import csv
import time
from dataclasses import dataclass
from pathlib import Path
from statistics import mean, stdev

import numpy as np

from .checkpoint import DEPLOY, TRAIN, load_checkpoint, save_checkpoint
from .config import RunConfig, build_network
from .data import (
    Dataset,
    SplitSpec,
    batches,
    find_mnist_dir,
    mnist_splits,
    split,
    synthetic_dataset,
)
from .factorized import (
    LowRankFactors,
    TruncationPolicy,
    init_low_rank,
    truncation_rank,
)
from .linalg import svd_small
from .network import Batch, DenseLayer, Network, cross_entropy_loss, forward
from .optim import OptimizerStates, euler
from .stepper import dense_step, dlrt_step, parameter_counts

SYNTH_SIZES = (512, 128, 128)  # train/val/test rows for the synthetic set


def load_splits(config: RunConfig):
    if config.dataset == "synthetic":
        n_train, n_val, n_test = SYNTH_SIZES
        pool = synthetic_dataset(sum(SYNTH_SIZES), 784, 10, config.seed)
        return split(
            pool, SplitSpec(seed=config.seed, train=n_train, val=n_val, test=n_test)
        )
    directory = find_mnist_dir(config.data_dir)
    if directory is None:
        raise FileNotFoundError(
            "image data not found; pass --data-dir or set LOWRANK_DATA_DIR "
            "to a directory holding the four canonical files"
        )
    return mnist_splits(directory, config.seed)


def evaluate_network(net: Network, ds: Dataset, batch_size: int = 1024):
    """Forward-only loss and accuracy over a dataset, in column chunks."""
    total_loss = 0.0
    correct = 0
    n = len(ds)
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        chunk = Batch(
            np.ascontiguousarray(ds.images[start:stop].T), ds.labels[start:stop]
        )
        logits, _ = forward(net, chunk)
        total_loss += cross_entropy_loss(logits, chunk.labels) * (stop - start)
        correct += int((np.argmax(logits, axis=0) == chunk.labels).sum())
    return total_loss / n, correct / n


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float
    ranks: list
    eval_params: int
    train_params: int
    compression: float
    wall_seconds: float


@dataclass
class TrainResult:
    state: str  # done | cancelled
    rows: list
    out_dir: str
    final_ranks: list
    test_loss: float = None
    test_accuracy: float = None
    best_epoch: int = None

    @property
    def final_row(self):
        return self.rows[-1] if self.rows else None


def _write_metrics(out: Path, rows):
    with (out / "metrics.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            [
                "epoch", "train_loss", "train_accuracy", "val_loss",
                "val_accuracy", "eval_params", "train_params", "compression",
                "wall_seconds",
            ]
        )
        for r in rows:
            w.writerow(
                [
                    r.epoch, f"{r.train_loss:.6f}", f"{r.train_accuracy:.6f}",
                    f"{r.val_loss:.6f}", f"{r.val_accuracy:.6f}",
                    r.eval_params, r.train_params, f"{r.compression:.6f}",
                    f"{r.wall_seconds:.3f}",
                ]
            )


def _write_ranks(out: Path, rows):
    if not rows:
        return
    width = len(rows[0].ranks)
    with (out / "ranks.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch"] + [f"r{i}" for i in range(width)])
        for r in rows:
            w.writerow([r.epoch] + list(r.ranks))


def train_run(config: RunConfig, progress=None, should_stop=None) -> TrainResult:
    """Full training loop: per-epoch metrics, rank log, best/last checkpoints.

    progress: callable(EpochRow); should_stop: callable() -> bool, polled
    between steps.
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, val, test = load_splits(config)
    net = build_network(config)
    policy = config.policy()
    states = OptimizerStates()
    rows = []
    best_val = -1.0
    best_epoch = None
    state = "done"
    t0 = time.perf_counter()

    for epoch in range(config.epochs):
        if (
            config.freeze_epoch is not None
            and policy.is_adaptive
            and epoch >= config.freeze_epoch
        ):
            policy = TruncationPolicy.fixed(1)  # stop adapting, keep ranks
        integ = config.integrator().with_lr(config.lr_at(epoch))
        loss_sum = 0.0
        acc_sum = 0.0
        seen = 0
        for b_idx, batch in enumerate(
            batches(train, config.batch_size, config.seed, epoch)
        ):
            if config.max_batches is not None and b_idx >= config.max_batches:
                break
            if should_stop is not None and should_stop():
                state = "cancelled"
                break
            if config.mode == "dense":
                info = dense_step(net, batch, integ, states)
            else:
                info = dlrt_step(net, batch, policy, integ, states)
            bsz = batch.labels.shape[0]
            loss_sum += info.loss * bsz
            acc_sum += info.accuracy * bsz
            seen += bsz
        if state == "cancelled":
            break
        val_loss, val_acc = evaluate_network(net, val)
        report = parameter_counts(net)
        row = EpochRow(
            epoch=epoch,
            train_loss=loss_sum / max(seen, 1),
            train_accuracy=acc_sum / max(seen, 1),
            val_loss=val_loss,
            val_accuracy=val_acc,
            ranks=[
                int(r) for r in
                (dlrt_ranks(net) if config.mode != "dense" else [])
            ],
            eval_params=report.eval_params,
            train_params=report.train_params,
            compression=report.eval_compression,
            wall_seconds=time.perf_counter() - t0,
        )
        rows.append(row)
        if progress is not None:
            progress(row)
        if val_acc > best_val:
            best_val = val_acc
            best_epoch = epoch
            metrics = {"val_loss": val_loss, "val_accuracy": val_acc}
            save_checkpoint(
                out / "checkpoint-best", net, seed=config.seed, epoch=epoch,
                metrics=metrics, kind=TRAIN, dataset=config.dataset,
            )
            save_checkpoint(
                out / "checkpoint-best-deploy", net, seed=config.seed,
                epoch=epoch, metrics=metrics, kind=DEPLOY,
                dataset=config.dataset,
            )

    test_loss, test_acc = evaluate_network(net, test)
    last_epoch = rows[-1].epoch if rows else 0
    save_checkpoint(
        out / "checkpoint-last", net, seed=config.seed, epoch=last_epoch,
        metrics={"test_loss": test_loss, "test_accuracy": test_acc},
        kind=TRAIN, dataset=config.dataset,
    )
    _write_metrics(out, rows)
    _write_ranks(out, rows)
    return TrainResult(
        state=state,
        rows=rows,
        out_dir=str(out),
        final_ranks=dlrt_ranks(net) if config.mode != "dense" else [],
        test_loss=test_loss,
        test_accuracy=test_acc,
        best_epoch=best_epoch,
    )


def dlrt_ranks(net: Network):
    out = []
    for i in net.low_rank_indices():
        layer = net.layers[i]
        f = layer if isinstance(layer, LowRankFactors) else layer.factors
        out.append(int(f.rank))
    return out


def evaluate_run(checkpoint_dir, data_dir=None, which="test", dataset=None):
    """Load a checkpoint (train or deploy form) and score it on a split.

    The split is rebuilt from the seed recorded in the manifest, so
    evaluating right after training sees exactly the trainer's data.
    """
    ck = load_checkpoint(checkpoint_dir)
    ds_kind = dataset or ck.manifest.get("dataset") or "mnist"
    config = RunConfig(
        arch="mlp500", mode="dense", seed=ck.seed, data_dir=data_dir,
        dataset=ds_kind,
    )
    train, val, test = load_splits(config)
    ds = {"train": train, "val": val, "test": test}[which]
    loss, acc = evaluate_network(ck.net, ds)
    report = parameter_counts(ck.net)
    return {
        "checkpoint": str(checkpoint_dir),
        "kind": ck.kind,
        "split": which,
        "loss": loss,
        "accuracy": acc,
        "ranks": ck.manifest["ranks"],
        "eval_params": report.eval_params,
        "train_params": report.train_params,
        "full_params": report.full_params,
        "compression": report.eval_compression,
    }


def svd_truncate_dense(net: Network, rank=None, tau=None) -> Network:
    """Factorize every hidden dense layer of an unfactorized stack at the
    given rank (or per-layer adaptive rank from tau); the head stays dense."""
    if rank is None and tau is None:
        raise ValueError("need a rank or a tau")
    layers = list(net.layers)
    if not all(isinstance(l, DenseLayer) for l in layers):
        raise ValueError("pruning expects a fully dense feed-forward stack")
    out = []
    for i, layer in enumerate(layers):
        if i == len(layers) - 1:
            out.append(
                DenseLayer(
                    weight=layer.weight.copy(),
                    bias=layer.bias.copy(),
                    activation=layer.activation,
                )
            )
            continue
        p, sigma, q = svd_small(layer.weight)
        full = min(layer.weight.shape)
        if rank is not None:
            r = int(rank)
            if not 1 <= r <= full:
                raise ValueError(f"rank {r} outside [1, {full}] for layer {i}")
        else:
            r = truncation_rank(sigma, float(tau), 2, full)
        out.append(
            LowRankFactors(
                u=p[:, :r],
                s=np.diag(sigma[:r]),
                v=q[:, :r],
                bias=layer.bias.copy(),
                activation=layer.activation,
                rank=r,
            )
        )
    return Network(out, input_shape=net.input_shape)


def prune_retrain_run(
    config: RunConfig, dense_checkpoint, rank=None, tau=None,
    progress=None, should_stop=None,
):
    """SVD-truncate a trained dense net, report the damage, retrain at fixed
    rank, report the recovery. Returns the report dict."""
    ck = load_checkpoint(dense_checkpoint)
    ds_kind = config.dataset if config.dataset else "mnist"
    train, val, test = load_splits(config)
    net = svd_truncate_dense(ck.net, rank=rank, tau=tau)
    pre_loss, pre_acc = evaluate_network(net, test)

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    policy = TruncationPolicy.fixed(1)
    states = OptimizerStates()
    rows = []
    state = "done"
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        integ = config.integrator().with_lr(config.lr_at(epoch))
        loss_sum = acc_sum = 0.0
        seen = 0
        for b_idx, batch in enumerate(
            batches(train, config.batch_size, config.seed, epoch)
        ):
            if config.max_batches is not None and b_idx >= config.max_batches:
                break
            if should_stop is not None and should_stop():
                state = "cancelled"
                break
            info = dlrt_step(net, batch, policy, integ, states)
            bsz = batch.labels.shape[0]
            loss_sum += info.loss * bsz
            acc_sum += info.accuracy * bsz
            seen += bsz
        if state == "cancelled":
            break
        val_loss, val_acc = evaluate_network(net, val)
        report = parameter_counts(net)
        row = EpochRow(
            epoch=epoch,
            train_loss=loss_sum / max(seen, 1),
            train_accuracy=acc_sum / max(seen, 1),
            val_loss=val_loss,
            val_accuracy=val_acc,
            ranks=dlrt_ranks(net),
            eval_params=report.eval_params,
            train_params=report.train_params,
            compression=report.eval_compression,
            wall_seconds=time.perf_counter() - t0,
        )
        rows.append(row)
        if progress is not None:
            progress(row)

    post_loss, post_acc = evaluate_network(net, test)
    save_checkpoint(
        out / "checkpoint-pruned", net, seed=config.seed,
        epoch=rows[-1].epoch if rows else 0,
        metrics={
            "pre_accuracy": pre_acc,
            "post_accuracy": post_acc,
        },
        kind=TRAIN, dataset=ds_kind,
    )
    _write_metrics(out, rows)
    _write_ranks(out, rows)
    report = parameter_counts(net)
    return {
        "state": state,
        "pre_loss": pre_loss,
        "pre_accuracy": pre_acc,
        "post_loss": post_loss,
        "post_accuracy": post_acc,
        "ranks": dlrt_ranks(net),
        "eval_params": report.eval_params,
        "compression": report.eval_compression,
        "out_dir": str(out),
        "epochs_run": len(rows),
    }


def _benchmark_net(width, rank, seed):
    """4 hidden layers of the given width on 784 features, dense head;
    rank None means the dense baseline."""
    rng = np.random.default_rng(seed)
    widths = (784, width, width, width, width, 10)
    layers = []
    for i in range(4):
        n_in, n_out = widths[i], widths[i + 1]
        if rank is None:
            w = rng.standard_normal((n_out, n_in)) * np.sqrt(2.0 / n_in)
            layers.append(
                DenseLayer(weight=w, bias=np.zeros(n_out), activation="relu")
            )
        else:
            layers.append(init_low_rank(n_out, n_in, rank, "relu", rng))
    w = rng.standard_normal((10, widths[-2])) * np.sqrt(2.0 / widths[-2])
    layers.append(DenseLayer(weight=w, bias=np.zeros(10), activation="softmax"))
    return Network(layers)


def step_op_count(net: Network) -> int:
    """Analytic training-step cost: sum of r^2 (n_in + n_out) over factorized
    layers plus n_in * n_out for dense ones."""
    total = 0
    for layer in net.layers:
        if isinstance(layer, LowRankFactors):
            total += layer.rank**2 * (layer.n_in + layer.n_out)
        elif isinstance(layer, DenseLayer):
            total += layer.weight.shape[0] * layer.weight.shape[1]
    return total


def predict_op_count(net: Network) -> int:
    """Analytic per-sample prediction cost: the evaluation parameter count
    (two thin products for factorized layers, one full product for dense)."""
    return parameter_counts(net).eval_params


@dataclass
class BenchmarkRow:
    rank: str  # a number, or "dense"
    train_step_mean: float
    train_step_std: float
    predict_mean: float
    predict_std: float
    train_ops: int
    predict_ops: int


def benchmark_run(
    width=1024, ranks=(8, 16, 32, 64, 128), batch_size=256, train_steps=50,
    predict_repeats=10, n_predict=10_000, seed=0, out_dir=None,
    include_dense=True, parallel=False, progress=None, should_stop=None,
):
    """Wall-clock and analytic-cost table across ranks plus a dense baseline.

    Per row: a warm-up step, then `train_steps` individually timed steps on
    synthetic batches, and `predict_repeats` timed full-set predictions.
    With parallel=True prediction chunks are fanned out over threads against
    the frozen network; timings are single-threaded otherwise.
    """
    train_ds = synthetic_dataset(batch_size * 4, 784, 10, seed)
    predict_ds = synthetic_dataset(n_predict, 784, 10, seed + 1)
    variants = [(str(r), r) for r in ranks]
    if include_dense:
        variants.append(("dense", None))
    rows = []
    for label, rank in variants:
        if should_stop is not None and should_stop():
            break
        net = _benchmark_net(width, rank, seed)
        states = OptimizerStates()
        policy = TruncationPolicy.fixed(1)
        integ = euler(0.05)
        step = (
            (lambda b: dense_step(net, b, integ, states))
            if rank is None
            else (lambda b: dlrt_step(net, b, policy, integ, states))
        )
        batch_iter = batches(train_ds, batch_size, seed, 0)
        warm = next(batch_iter)
        step(warm)  # warm-up: allocator and cache effects land here
        times = []
        epoch = 0
        for _ in range(train_steps):
            try:
                batch = next(batch_iter)
            except StopIteration:
                epoch += 1
                batch_iter = batches(train_ds, batch_size, seed, epoch)
                batch = next(batch_iter)
            t0 = time.perf_counter()
            step(batch)
            times.append(time.perf_counter() - t0)
        predict_times = []
        for _ in range(predict_repeats):
            t0 = time.perf_counter()
            _predict_all(net, predict_ds, batch_size=1024, parallel=parallel)
            predict_times.append(time.perf_counter() - t0)
        row = BenchmarkRow(
            rank=label,
            train_step_mean=mean(times) if times else 0.0,
            train_step_std=stdev(times) if len(times) > 1 else 0.0,
            predict_mean=mean(predict_times) if predict_times else 0.0,
            predict_std=stdev(predict_times) if len(predict_times) > 1 else 0.0,
            train_ops=step_op_count(net),
            predict_ops=predict_op_count(net),
        )
        rows.append(row)
        if progress is not None:
            progress(row)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "timings.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(
                [
                    "rank", "train_step_mean_s", "train_step_std_s",
                    "predict_mean_s", "predict_std_s", "train_ops",
                    "predict_ops",
                ]
            )
            for r in rows:
                w.writerow(
                    [
                        r.rank, f"{r.train_step_mean:.6f}",
                        f"{r.train_step_std:.6f}", f"{r.predict_mean:.6f}",
                        f"{r.predict_std:.6f}", r.train_ops, r.predict_ops,
                    ]
                )
    return rows


def _predict_all(net, ds, batch_size=1024, parallel=False):
    spans = [
        (start, min(start + batch_size, len(ds)))
        for start in range(0, len(ds), batch_size)
    ]

    def run(span):
        start, stop = span
        chunk = Batch(
            np.ascontiguousarray(ds.images[start:stop].T), ds.labels[start:stop]
        )
        logits, _ = forward(net, chunk)
        return np.argmax(logits, axis=0)

    if parallel:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=4) as pool:
            return np.concatenate(list(pool.map(run, spans)))
    return np.concatenate([run(span) for span in spans])
