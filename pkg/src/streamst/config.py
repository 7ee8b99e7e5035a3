"""Run configuration loaded from TOML.

Tables mirror the dataclasses they populate: ``[model]`` (with a nested
``[model.encoder]``), ``[synthesis]``, ``[data]``, ``[train.stage0]``,
``[train.stage1]``, ``[train.stage2]``, ``[lora]``, ``[generation]``,
``[cost]``, ``[run]`` and ``[toy]``. Unknown keys are rejected so typos surface early.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .decoder import GenConfig
from .encoder import EncoderConfig
from .layers import LoraConfig
from .model import ModelConfig
from .streaming import CostModel
from .tensor import ContractError
from .toy import ToyLanguage
from .trajectory import SynthesisConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    """Toy corpus sizes, or external alignment/feature inputs when ``alignments`` is set."""

    seed: int = 0
    n_recordings: int = 8
    recording_ms: int = 288_000
    n_pool: int = 400
    n_simulated: int = 120
    n_heldout: int = 3
    heldout_ms: int = 57_600
    alignments: str | None = None
    features: str | None = None


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    latency_multipliers: tuple[int, ...] = (3,)
    target_language: str = "Chinese"
    work_dir: str = "runs/toy"


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    data: DataConfig = field(default_factory=DataConfig)
    stages: tuple[TrainConfig, ...] = (TrainConfig(stage=1), TrainConfig(stage=2, max_lr=1e-4))
    lora: LoraConfig = field(default_factory=LoraConfig)
    generation: GenConfig = field(default_factory=GenConfig)
    cost: CostModel = field(default_factory=CostModel)
    run: RunSettings = field(default_factory=RunSettings)
    toy: ToyLanguage = field(default_factory=ToyLanguage)
    source: str | None = None

    def stage(self, n: int) -> TrainConfig:
        for s in self.stages:
            if s.stage == n:
                return s
        raise ContractError(f"config has no train.stage{n} table")

    def paths(self) -> dict[str, str]:
        out = {}
        if self.data.alignments:
            out["data.alignments"] = self.data.alignments
        if self.data.features:
            out["data.features"] = self.data.features
        return out

    def missing_paths(self) -> list[str]:
        base = Path(self.source).parent if self.source else Path(".")
        return [f"{k}={v}" for k, v in self.paths().items() if not (base / v).exists()]


def _build(cls, table: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(table) - names
    if unknown:
        raise ContractError(f"[{where}] unknown keys: {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in table:
            v = table[f.name]
            kwargs[f.name] = tuple(v) if isinstance(v, list) else v
    return cls(**kwargs)


def parse_config(doc: dict, source: str | None = None) -> RunConfig:
    doc = dict(doc)
    known = {"model", "synthesis", "data", "train", "lora", "generation", "cost", "run", "toy"}
    unknown = set(doc) - known
    if unknown:
        raise ContractError(f"unknown tables: {sorted(unknown)}")
    model_t = dict(doc.get("model", {}))
    enc = _build(EncoderConfig, model_t.pop("encoder", {}), "model.encoder")
    model = _build(ModelConfig, model_t, "model")
    model = dataclasses.replace(model, encoder=enc)
    stages = []
    for name, table in sorted(doc.get("train", {}).items()):
        if not name.startswith("stage"):
            raise ContractError(f"[train.{name}] must be named stageN")
        table = dict(table)
        stage = int(name[len("stage") :])
        if table.setdefault("stage", stage) != stage:
            raise ContractError(f"[train.{name}] declares stage {table['stage']}")
        stages.append(_build(TrainConfig, table, f"train.{name}"))
    cfg = RunConfig(
        model=model,
        synthesis=_build(SynthesisConfig, doc.get("synthesis", {}), "synthesis"),
        data=_build(DataConfig, doc.get("data", {}), "data"),
        stages=tuple(stages) if stages else RunConfig().stages,
        lora=_build(LoraConfig, doc.get("lora", {}), "lora"),
        generation=_build(GenConfig, doc.get("generation", {}), "generation"),
        cost=_build(CostModel, doc.get("cost", {}), "cost"),
        run=_build(RunSettings, doc.get("run", {}), "run"),
        toy=_build(ToyLanguage, doc.get("toy", {}), "toy"),
        source=source,
    )
    if cfg.model.encoder.frame_ms != cfg.synthesis.frame_ms:
        raise ContractError("model.encoder.frame_ms and synthesis.frame_ms differ")
    if cfg.model.encoder.chunk_ms != cfg.synthesis.chunk_ms:
        raise ContractError("encoder chunk length and synthesis chunk_ms differ")
    return cfg


def load_config(path) -> RunConfig:
    with open(path, "rb") as fh:
        return parse_config(tomli.load(fh), str(path))
