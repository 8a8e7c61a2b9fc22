# -*- coding: utf-8 -*-
"""
Config-driven experiment harness: full benchmark runs, one-axis ablations,
result records (append-only JSON lines), per-step CSVs and per-task checkpoints.
"""
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime
from typing import Dict, List, Literal, Optional, Tuple

import pandas as pd
import torch
from pydantic import BaseModel, Field, model_validator

from backbone import IncrementalNet, expand, frozen_checksums
from cil_errors import CILError, ConfigurationError, UsageError
from data_stream import (BenchmarkSpec, build_task_stream, load_manifest_source, make_synthetic_source,
                         seeded_class_order)
from memory import ExemplarMemory, memory_from_triples, memory_triples
from trainer import Components, TrainConfig, average_accuracy, evaluate_step, set_determinism, train_task

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "CIL_OUTPUT_ROOT"
RECORDS_FILE = "records.jsonl"

ABLATION_AXES = ("components", "mix", "gamma_tau", "eta_ma", "schedule", "plug_and_play", "seeds")
GAMMA_GRID = [0.01, 0.1, 0.5, 1.0, 10.0]
TAU_GRID = [0.1, 0.5, 0.6, 1.0]
ETA_MA_GRID = [0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0]
SEED_REPLICAS = 5


# --- Configuration ---

class DatasetConfig(BaseModel):
    kind: Literal["synthetic", "manifest"] = "synthetic"
    root: Optional[str] = None
    classes: int = Field(10, ge=1)
    height: int = Field(16, ge=8)
    width: int = Field(16, ge=8)
    channels: int = Field(3, ge=1)
    train_per_class: int = Field(20, ge=1)
    test_per_class: int = Field(10, ge=1)
    noise: float = Field(0.05, ge=0)

    @model_validator(mode="after")
    def manifest_needs_root(self):
        if self.kind == "manifest" and not self.root:
            raise ValueError("dataset.root is required for kind='manifest'")
        return self


class ExperimentConfig(BaseModel):
    name: str = "experiment"
    benchmark: BenchmarkSpec = Field(default_factory=BenchmarkSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    components: Components = Field(default_factory=Components)
    architecture: Literal["dynamic", "single"] = "dynamic"
    memory_selection: Literal["herding", "random"] = "herding"
    shuffle_classes: bool = False
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    output_dir: str = "runs"
    save_checkpoints: bool = True
    seed: int = 0

    @model_validator(mode="after")
    def check_consistency(self):
        if self.dataset.kind == "synthetic" and self.dataset.classes != self.benchmark.total_classes:
            raise ValueError(f"dataset.classes ({self.dataset.classes}) != benchmark.total_classes ({self.benchmark.total_classes})")
        if self.train.seed != self.seed:
            # a single seed drives every random stream
            self.train = self.train.model_copy(update={"seed": self.seed})
        return self


def load_config(path: str) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ConfigurationError(f"Config file not found: {path}")
    with open(path) as f:
        text = f.read()
    try:
        return ExperimentConfig.model_validate_json(text)
    except ValueError as e:
        raise ConfigurationError(f"Invalid config {path}: {e}") from e


def config_hash(config: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON form (sorted keys, defaults filled in)."""
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def resolve_output_dir(config: ExperimentConfig) -> str:
    root = os.getenv(OUTPUT_ROOT_ENV) or config.output_dir
    return os.path.join(root, f"{config.name}_{config_hash(config)[:10]}")


# --- Records ---

class ResultRecord(BaseModel):
    name: str
    config_hash: str
    class_order: List[int]
    cnn_accuracy: List[float] = Field(default_factory=list)
    nme_accuracy: List[Optional[float]] = Field(default_factory=list)
    steps: List[Dict] = Field(default_factory=list)
    average_cnn: Optional[float] = None
    last_cnn: Optional[float] = None
    average_nme: Optional[float] = None
    last_nme: Optional[float] = None
    final_alignment: Optional[float] = None
    components: Dict[str, bool]
    architecture: str
    mix_method: str
    seed: int
    wall_time: float = 0.0
    status: Literal["ok", "failed"] = "ok"
    error: Optional[str] = None
    timestamp: str = Field(default_factory=lambda: datetime.now().isoformat(timespec="seconds"))
    output_dir: str = ""

    def finalize(self):
        if self.cnn_accuracy:
            self.average_cnn, self.last_cnn = average_accuracy(self.cnn_accuracy)
        nme = [a for a in self.nme_accuracy if a is not None]
        if nme and len(nme) == len(self.nme_accuracy):
            self.average_nme, self.last_nme = average_accuracy(nme)
        return self


def append_record(record: ResultRecord, path: str):
    with open(path, "a") as f:
        f.write(record.model_dump_json() + "\n")


def read_records(path: str) -> List[ResultRecord]:
    with open(path) as f:
        return [ResultRecord.model_validate_json(line) for line in f if line.strip()]


# --- Checkpoints ---

def save_checkpoint(directory: str, net: IncrementalNet, memory: ExemplarMemory, task_index: int, cfg_hash: str):
    os.makedirs(directory, exist_ok=True)
    torch.save(net.state_dict(), os.path.join(directory, "weights.pt"))
    manifest = {
        "task": task_index,
        "config_hash": cfg_hash,
        "classes": net.num_classes,
        "extractors": len(net.extractors),
        "feature_dim": net.feature_dim,
        "frozen_checksums": frozen_checksums(net),
        "memory": {"budget": memory.budget, "policy": memory.policy, "selection": memory.selection,
                   "triples": memory_triples(memory)},
    }
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)


def load_checkpoint(directory: str, config: ExperimentConfig) -> Tuple[IncrementalNet, ExemplarMemory]:
    """Rebuild the network shape of the saved task, then load weights and memory."""
    manifest_path = os.path.join(directory, "manifest.json")
    if not os.path.exists(manifest_path):
        raise UsageError(f"No checkpoint manifest in {directory}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest["config_hash"] != config_hash(config):
        raise ConfigurationError(f"Checkpoint {directory} was written by a different config")

    sizes = config.benchmark.task_sizes()[:manifest["task"]]
    net = _build_net(config)
    seen = 0
    for size in sizes:
        seen += size
        expand(net, seen, size)
    net.load_state_dict(torch.load(os.path.join(directory, "weights.pt")))
    mem = manifest["memory"]
    memory = memory_from_triples(mem["triples"], mem["budget"], mem["policy"], mem["selection"])
    return net, memory


# --- Run ---

def _build_net(config: ExperimentConfig) -> IncrementalNet:
    return IncrementalNet(config.dataset.channels, config.train.feature_dim, config.train.conv_width,
                          use_vmf=config.components.vmf, architecture=config.architecture)


def _load_source(config: ExperimentConfig):
    ds = config.dataset
    if ds.kind == "manifest":
        return load_manifest_source(ds.root)
    return make_synthetic_source(ds.classes, ds.height, ds.width, ds.channels, ds.train_per_class,
                                 ds.test_per_class, ds.noise, seed=config.seed)


def run(config: ExperimentConfig) -> ResultRecord:
    """Train and evaluate over the whole task stream; persists artifacts as it goes."""
    started = time.time()
    cfg_hash = config_hash(config)
    out_dir = resolve_output_dir(config)
    if not os.path.exists(out_dir):
        os.makedirs(out_dir)
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        f.write(config.model_dump_json(indent=2))

    set_determinism(config.seed)
    benchmark = config.benchmark
    if benchmark.class_order is None and config.shuffle_classes:
        benchmark = benchmark.model_copy(update={"class_order": seeded_class_order(benchmark.total_classes, config.seed)})
    stream = build_task_stream(_load_source(config), benchmark)

    record = ResultRecord(name=config.name, config_hash=cfg_hash, class_order=stream.class_order,
                          components=config.components.model_dump(), architecture=config.architecture,
                          mix_method=config.train.mix.method if config.components.mcmix else "none",
                          seed=config.seed, output_dir=out_dir)
    memory = ExemplarMemory(benchmark.memory_size, benchmark.memory_policy, config.memory_selection)
    net = _build_net(config)
    epoch_log = os.path.join(out_dir, "epochs.jsonl")
    step_csv = os.path.join(out_dir, "steps.csv")
    # one epoch log per run
    if os.path.exists(epoch_log):
        os.remove(epoch_log)

    logger.info(f"=== RUN {config.name} ({cfg_hash[:10]}) START ===")
    current = 0
    try:
        for task in stream.tasks:
            current = task.index
            logger.info(f"=== TASK {task.index}/{len(stream.tasks)} START ===")
            expand(net, task.total_classes, len(task.new_classes))
            outcome = train_task(net, task, stream, memory, config.train, config.components, epoch_log)
            memory = outcome.memory
            metrics = evaluate_step(net, outcome.prototypes, stream, task)

            record.steps.append(metrics.to_dict())
            record.cnn_accuracy.append(metrics.cnn_accuracy)
            record.nme_accuracy.append(metrics.nme_accuracy)
            if outcome.epochs:
                record.final_alignment = outcome.epochs[-1]["alignment"]
            pd.DataFrame(record.steps).to_csv(step_csv, index=False)
            if config.save_checkpoints:
                save_checkpoint(os.path.join(out_dir, "checkpoints", f"task_{task.index}"), net, memory, task.index, cfg_hash)
    except Exception as e:
        record.status, record.error = "failed", f"task {current}: {type(e).__name__}: {e}"
        record.wall_time = time.time() - started
        record.finalize()
        if record.steps:
            pd.DataFrame(record.steps).to_csv(step_csv, index=False)
        append_record(record, os.path.join(out_dir, RECORDS_FILE))
        logger.error(f"Run {config.name} failed at task {current}: {type(e).__name__}: {e}")
        if isinstance(e, CILError):
            raise type(e)(f"task {current}: {e}") from e
        raise CILError(f"task {current}: {type(e).__name__}: {e}") from e

    record.wall_time = time.time() - started
    record.finalize()
    append_record(record, os.path.join(out_dir, RECORDS_FILE))
    logger.info(f"=== RUN {config.name} END === avg CNN {record.average_cnn:.2f}%, last {record.last_cnn:.2f}% "
                f"({record.wall_time:.1f}s)")
    return record


# --- Ablations ---

def ablation_cells(base: ExperimentConfig, axis: str) -> List[Tuple[str, ExperimentConfig]]:
    """Labelled configs for one ablation axis; the first cell is the reference."""
    def variant(label: str, **updates) -> Tuple[str, ExperimentConfig]:
        data = base.model_dump()
        for dotted, value in updates.items():
            target = data
            *parents, leaf = dotted.split("__")
            for key in parents:
                target = target[key]
            target[leaf] = value
        data["name"] = f"{base.name}-{axis}-{label}"
        return label, ExperimentConfig.model_validate(data)

    off = dict(mcmix=False, vmf=False, matching=False, aux=False, weight_align=False)
    if axis == "components":
        return [
            variant("baseline", components=off),
            variant("+mcmix", components={**off, "mcmix": True}),
            variant("+vmf", components={**off, "vmf": True}),
            variant("+vmf+matching", components={**off, "vmf": True, "matching": True}),
            variant("full", components={k: True for k in off}),
        ]
    if axis == "mix":
        return [variant(m, components__mcmix=True, train__mix__method=m)
                for m in ("none", "mixup", "cutmix", "cutmix-w", "mcmix")]
    if axis == "gamma_tau":
        return [variant(f"g{g}_t{t}", train__mix__schedule__gamma=g, train__mix__schedule__tau=t)
                for g in GAMMA_GRID for t in TAU_GRID]
    if axis == "eta_ma":
        return [variant(f"eta{eta}", train__eta_ma=eta) for eta in ETA_MA_GRID]
    if axis == "schedule":
        return [variant(k, train__mix__schedule__kind=k) for k in ("sigmoid", "linear", "step")]
    if axis == "plug_and_play":
        return [variant("single", architecture="single", components__mcmix=False),
                variant("single+mcmix", architecture="single", components__mcmix=True, train__mix__method="mcmix")]
    if axis == "seeds":
        return [variant(f"seed{base.seed + k}", seed=base.seed + k, shuffle_classes=True)
                for k in range(SEED_REPLICAS)]
    raise UsageError(f"Unknown ablation axis '{axis}'; expected one of {', '.join(ABLATION_AXES)}")


def _run_cell(config_json: str) -> str:
    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
    return run(ExperimentConfig.model_validate_json(config_json)).model_dump_json()


def summarize_ablation(labels: List[str], records: List[ResultRecord], axis: str) -> pd.DataFrame:
    rows = [{"axis": axis, "cell": label, "seed": r.seed, "average_cnn": r.average_cnn, "last_cnn": r.last_cnn,
             "average_nme": r.average_nme, "last_nme": r.last_nme, "final_alignment": r.final_alignment,
             "config_hash": r.config_hash}
            for label, r in zip(labels, records)]
    summary = pd.DataFrame(rows)
    for col in ("average_cnn", "last_cnn"):
        summary[f"delta_{col}"] = summary[col] - summary[col].iloc[0]
    if summary["seed"].nunique() > 1:
        agg = summary[["average_cnn", "last_cnn", "average_nme", "last_nme"]].astype(float).agg(["mean", "std"])
        for stat in ("mean", "std"):
            extra = {"axis": axis, "cell": stat}
            extra.update(agg.loc[stat].to_dict())
            summary = pd.concat([summary, pd.DataFrame([extra])], ignore_index=True)
    return summary


def ablate(base: ExperimentConfig, axis: str, workers: int = 1) -> List[ResultRecord]:
    cells = ablation_cells(base, axis)
    labels = [label for label, _ in cells]
    logger.info(f"=== ABLATION {axis} START === {len(cells)} cells, {workers} worker(s)")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, [cfg.model_dump_json() for _, cfg in cells]))
        records = [ResultRecord.model_validate_json(r) for r in results]
    else:
        records = [run(cfg) for _, cfg in cells]

    root = os.getenv(OUTPUT_ROOT_ENV) or base.output_dir
    if not os.path.exists(root):
        os.makedirs(root)
    summary = summarize_ablation(labels, records, axis)
    summary_path = os.path.join(root, f"ablation_{base.name}_{axis}.csv")
    summary.to_csv(summary_path, index=False)
    logger.info(f"Ablation summary written to {summary_path}")
    return records


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
    demo = ExperimentConfig(name="demo", train=TrainConfig(epochs=2, decay_epochs=[1], warmup_epochs=0))
    result = run(demo)
    print(json.dumps({"cnn": result.cnn_accuracy, "nme": result.nme_accuracy}, indent=2))
