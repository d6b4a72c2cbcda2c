"""Request and response shapes for the HTTP surface."""

from typing import List, Optional

from pydantic import BaseModel, Field

from ..config import RunConfig


class TrainRequest(BaseModel):
    arch: str = "mlp500"
    mode: str = "adaptive"
    tau: Optional[float] = None
    fixed_ranks: Optional[List[int]] = None
    optimizer: str = "adam"
    lr: float = 1e-3
    lr_decay: Optional[float] = None
    epochs: int = 30
    batch_size: int = 256
    seed: int = 0
    data_dir: Optional[str] = None
    dataset: str = "mnist"
    out_dir: str = "runs/service"
    freeze_epoch: Optional[int] = None
    max_batches: Optional[int] = None

    def to_config(self) -> RunConfig:
        data = self.model_dump()
        if data["fixed_ranks"] is not None:
            data["fixed_ranks"] = tuple(data["fixed_ranks"])
        return RunConfig(**data)


class PruneRetrainRequest(BaseModel):
    checkpoint: str
    rank: Optional[int] = None
    tau: Optional[float] = None
    arch: str = "mlp784"
    optimizer: str = "adam"
    lr: float = 1e-3
    lr_decay: Optional[float] = None
    epochs: int = 20
    batch_size: int = 256
    seed: int = 0
    data_dir: Optional[str] = None
    dataset: str = "mnist"
    out_dir: str = "runs/service-pruned"
    max_batches: Optional[int] = None

    def to_config(self) -> RunConfig:
        data = self.model_dump(exclude={"checkpoint", "rank", "tau"})
        # retraining runs at pinned ranks; the rank itself comes from the
        # truncation arguments, so the config mode is dense-agnostic "fixed"
        # with a placeholder the loop never reads
        data["mode"] = "fixed"
        data["fixed_ranks"] = (1,)
        return RunConfig(**data)


class BenchmarkRequest(BaseModel):
    width: int = 1024
    ranks: List[int] = Field(default_factory=lambda: [8, 16, 32, 64, 128])
    batch_size: int = 256
    train_steps: int = 50
    predict_repeats: int = 10
    n_predict: int = 10_000
    seed: int = 0
    out_dir: Optional[str] = None
    include_dense: bool = True
    parallel: bool = False


class EvaluateRequest(BaseModel):
    checkpoint: str
    data_dir: Optional[str] = None
    split: str = "test"
    dataset: Optional[str] = None


class JobInfo(BaseModel):
    id: str
    kind: str
    state: str
    epochs_done: int
    last_row: Optional[dict] = None
    result: Optional[dict] = None
    error: Optional[str] = None
