"""Checkpoint manifests and tensor blobs: round trips and corruption."""

import json

import numpy as np
import pytest

from lowrank import activations as act
from lowrank.checkpoint import (
    DEPLOY,
    FORMAT,
    MANIFEST,
    TRAIN,
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)
from lowrank.config import RunConfig, build_network
from lowrank.conv import ConvShape, Flatten, LowRankConv, MaxPool
from lowrank.factorized import LowRankFactors, init_low_rank
from lowrank.network import Batch, DenseLayer, Network, forward


def mixed_net(rng):
    """Low-rank hidden, dense hidden, dense head: covers both matrix kinds."""
    return Network(
        [
            init_low_rank(12, 20, 5, act.RELU, rng),
            DenseLayer(
                weight=rng.standard_normal((8, 12)),
                bias=rng.standard_normal(8),
                activation=act.RELU,
            ),
            DenseLayer(
                weight=rng.standard_normal((4, 8)),
                bias=np.zeros(4),
                activation=act.SOFTMAX,
            ),
        ],
        input_shape=None,
    )


def conv_net(rng):
    shape = ConvShape(2, 1, 3, 3, stride=1, padding=0, in_h=4, in_w=4)
    return Network(
        [
            LowRankConv(shape, init_low_rank(2, 9, 2, act.RELU, rng)),
            MaxPool(),
            Flatten(),
            DenseLayer(
                weight=rng.standard_normal((3, 2)),
                bias=np.zeros(3),
                activation=act.SOFTMAX,
            ),
        ],
        input_shape=(1, 4, 4),
    )


class TestTrainRoundTrip:
    def test_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        net = mixed_net(rng)
        save_checkpoint(tmp_path / "ck", net, seed=7, epoch=3)
        ck = load_checkpoint(tmp_path / "ck")
        assert ck.kind == TRAIN
        assert ck.seed == 7
        assert ck.epoch == 3
        lr = ck.net.layers[0]
        orig = net.layers[0]
        for name in ("u", "s", "v", "bias"):
            np.testing.assert_array_equal(getattr(lr, name), getattr(orig, name))
        for i in (1, 2):
            np.testing.assert_array_equal(
                ck.net.layers[i].weight, net.layers[i].weight
            )
            np.testing.assert_array_equal(ck.net.layers[i].bias, net.layers[i].bias)

    def test_rank_metadata_survives(self, tmp_path):
        rng = np.random.default_rng(1)
        f = init_low_rank(10, 16, 4, act.RELU, rng, rank_fixed=True)
        net = Network([f, DenseLayer(rng.standard_normal((3, 10)),
                                     np.zeros(3), act.SOFTMAX)], input_shape=None)
        save_checkpoint(tmp_path / "ck", net, seed=0, epoch=0)
        back = load_checkpoint(tmp_path / "ck").net.layers[0]
        assert isinstance(back, LowRankFactors)
        assert back.rank == 4
        assert back.rank_fixed
        assert (back.r_min, back.r_max) == (f.r_min, f.r_max)

    def test_metrics_and_dataset_in_manifest(self, tmp_path):
        rng = np.random.default_rng(2)
        save_checkpoint(
            tmp_path / "ck", mixed_net(rng), seed=1, epoch=9,
            metrics={"val_accuracy": 0.97}, dataset="mnist",
        )
        manifest = json.loads((tmp_path / "ck" / MANIFEST).read_text())
        assert manifest["format"] == FORMAT
        assert manifest["dataset"] == "mnist"
        assert manifest["metrics"]["val_accuracy"] == 0.97
        for entry in manifest["tensors"]:
            assert set(entry) >= {"file", "shape", "sha256"}

    def test_conv_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        net = conv_net(rng)
        save_checkpoint(tmp_path / "ck", net, seed=0, epoch=0)
        ck = load_checkpoint(tmp_path / "ck")
        assert ck.net.input_shape == (1, 4, 4)
        x = rng.standard_normal((16, 6))
        batch = Batch(x, rng.integers(0, 3, size=6))
        a, _ = forward(net, batch)
        b, _ = forward(ck.net, batch)
        np.testing.assert_array_equal(a, b)

    def test_resume_training_from_reload(self, tmp_path):
        # a reloaded train checkpoint must step identically to the original
        from lowrank.factorized import TruncationPolicy
        from lowrank.optim import OptimizerStates, euler
        from lowrank.stepper import dlrt_step

        rng = np.random.default_rng(4)
        net = mixed_net(rng)
        save_checkpoint(tmp_path / "ck", net, seed=0, epoch=0)
        twin = load_checkpoint(tmp_path / "ck").net
        batch = Batch(rng.standard_normal((20, 8)), rng.integers(0, 4, size=8))
        policy = TruncationPolicy.adaptive(0.3)
        for target in (net, twin):
            dlrt_step(target, batch, policy, euler(0.1), OptimizerStates())
        np.testing.assert_array_equal(net.layers[0].s, twin.layers[0].s)
        np.testing.assert_array_equal(net.layers[1].weight, twin.layers[1].weight)


class TestDeployRoundTrip:
    def test_logits_agree(self, tmp_path):
        rng = np.random.default_rng(5)
        net = build_network(RunConfig(mode="fixed", fixed_ranks=(9, 7, 6, 5), seed=5))
        save_checkpoint(tmp_path / "ck", net, seed=5, epoch=0, kind=DEPLOY)
        ck = load_checkpoint(tmp_path / "ck")
        assert ck.kind == DEPLOY
        batch = Batch(rng.standard_normal((784, 32)), rng.integers(0, 10, size=32))
        a, _ = forward(net, batch)
        b, _ = forward(ck.net, batch)
        assert np.max(np.abs(a - b)) < 1e-10

    def test_deploy_blobs_are_contracted(self, tmp_path):
        rng = np.random.default_rng(6)
        net = mixed_net(rng)
        save_checkpoint(tmp_path / "ck", net, seed=0, epoch=0, kind=DEPLOY)
        manifest = json.loads((tmp_path / "ck" / MANIFEST).read_text())
        roles = {e["file"].split("_", 1)[1] for e in manifest["tensors"]
                 if e["file"].startswith("layer0_")}
        assert roles == {"us.bin", "v.bin", "bias.bin"}
        # the u and s factors never ship separately
        assert not any("layer0_s" in e["file"] for e in manifest["tensors"])

    def test_deploy_ranks_preserved(self, tmp_path):
        rng = np.random.default_rng(7)
        net = mixed_net(rng)
        save_checkpoint(tmp_path / "ck", net, seed=0, epoch=0, kind=DEPLOY)
        back = load_checkpoint(tmp_path / "ck").net.layers[0]
        assert back.rank == net.layers[0].rank
        assert back.u.shape == (12, 5)
        assert back.v.shape == (20, 5)
        # identity core: U@S was folded into the stored left factor
        np.testing.assert_array_equal(back.s, np.eye(5))


class TestCorruption:
    def save_one(self, tmp_path):
        rng = np.random.default_rng(8)
        net = mixed_net(rng)
        save_checkpoint(tmp_path / "ck", net, seed=0, epoch=0)
        return tmp_path / "ck"

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(CheckpointError, match="manifest"):
            load_checkpoint(tmp_path / "void")

    def test_flipped_byte_detected(self, tmp_path):
        directory = self.save_one(tmp_path)
        blob = next(directory.glob("layer0_*.bin"))
        raw = bytearray(blob.read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        blob.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(directory)

    def test_missing_blob_detected(self, tmp_path):
        directory = self.save_one(tmp_path)
        next(directory.glob("layer1_*.bin")).unlink()
        with pytest.raises(CheckpointError, match="missing"):
            load_checkpoint(directory)

    def test_unknown_format_rejected(self, tmp_path):
        directory = self.save_one(tmp_path)
        manifest = json.loads((directory / MANIFEST).read_text())
        manifest["format"] = "lowrank-checkpoint/99"
        (directory / MANIFEST).write_text(json.dumps(manifest))
        with pytest.raises(CheckpointError, match="format"):
            load_checkpoint(directory)

    def test_truncated_blob_detected(self, tmp_path):
        directory = self.save_one(tmp_path)
        blob = next(directory.glob("layer0_*.bin"))
        blob.write_bytes(blob.read_bytes()[:-8])
        with pytest.raises(CheckpointError):
            load_checkpoint(directory)
