"""JSON experiment configs and the per-seed runs they describe.

Example::

    {
      "model":   {"layer_shapes": [[64, 64], [64, 64]], "nonlinearities": ["tanh", "none"], "seed": null},
      "adapter": {"variant": "bone_col", "b": 16, "recompute": false},
      "train":   {"task": {"kind": "teacher_student_regression", "rank": 4, "scale": 0.1},
                  "optimizer": "adamw", "lr": 0.001, "steps": 500, "batch": 64,
                  "seeds": [0, 1, 2, 3, 4], "dtype": "f32"},
      "output_dir": "runs/bone_col"
    }

A ``null`` model or task seed follows the run seed, so each seed gets its own
base model and dataset.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .adapters import AdapterConfig, ConfigError
from .model import DESK_NONLINEARITIES, DESK_SHAPES, SyntheticTask
from .train import TrainRun

_SECTIONS = {"model", "adapter", "train", "output_dir"}
_MODEL_KEYS = {"layer_shapes", "nonlinearities", "seed"}
_TRAIN_KEYS = {"task", "optimizer", "lr", "steps", "batch", "seeds", "dtype", "weight_decay"}
_TASK_KEYS = {"kind", "dataset_size", "seed", "rank", "scale", "modulus"}


def _reject_unknown(section: str, d: dict, allowed: set) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be an object")
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(extra)}")


@dataclass
class ExperimentConfig:
    adapter: AdapterConfig
    layer_shapes: tuple = DESK_SHAPES
    nonlinearities: tuple = DESK_NONLINEARITIES
    model_seed: int | None = None
    task: dict = field(default_factory=dict)
    optimizer: str = "adamw"
    lr: float = 1e-3
    steps: int = 500
    batch: int = 64
    seeds: tuple = (0,)
    dtype: str = "f32"
    weight_decay: float = 0.0
    output_dir: str = "runs"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        _reject_unknown("config", d, _SECTIONS)
        if "adapter" not in d:
            raise ConfigError("config needs an 'adapter' section")
        model, train = d.get("model", {}), d.get("train", {})
        _reject_unknown("model", model, _MODEL_KEYS)
        _reject_unknown("train", train, _TRAIN_KEYS)
        task = train.get("task", {})
        if isinstance(task, str):
            task = {"kind": task}
        _reject_unknown("train.task", task, _TASK_KEYS)
        shapes = tuple(tuple(int(x) for x in s) for s in model.get("layer_shapes", DESK_SHAPES))
        nls = model.get("nonlinearities")
        if nls is None:
            nls = ["tanh"] * (len(shapes) - 1) + ["none"]
        seeds = train.get("seeds", [0])
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
            raise ConfigError("train.seeds must be a non-empty list of integers")
        if len(set(seeds)) != len(seeds):
            raise ConfigError("train.seeds must not repeat")
        cfg = cls(
            adapter=AdapterConfig.from_dict(d["adapter"]),
            layer_shapes=shapes,
            nonlinearities=tuple(nls),
            model_seed=model.get("seed"),
            task=dict(task),
            optimizer=train.get("optimizer", "adamw"),
            lr=float(train.get("lr", 1e-3)),
            steps=int(train.get("steps", 500)),
            batch=int(train.get("batch", 64)),
            seeds=tuple(seeds),
            dtype=train.get("dtype", "f32"),
            weight_decay=float(train.get("weight_decay", 0.0)),
            output_dir=str(d.get("output_dir", "runs")),
        )
        cfg.runs()  # validates every run before anything is computed
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(raw)

    def with_overrides(self, out: str | None = None, seed: int | None = None,
                       dtype: str | None = None) -> "ExperimentConfig":
        cfg = replace(self,
                      output_dir=out if out is not None else self.output_dir,
                      seeds=(seed,) if seed is not None else self.seeds,
                      dtype=dtype if dtype is not None else self.dtype)
        cfg.runs()
        return cfg

    def run_for(self, seed: int) -> TrainRun:
        task_kw = dict(self.task)
        if task_kw.get("seed") is None:
            task_kw["seed"] = seed
        in_dim, out_dim = self.layer_shapes[0][1], self.layer_shapes[-1][0]
        try:
            task = SyntheticTask(input_dim=in_dim, output_dim=out_dim, **task_kw)
            return TrainRun(
                adapter=self.adapter,
                task=task,
                layer_shapes=self.layer_shapes,
                nonlinearities=self.nonlinearities,
                model_seed=seed if self.model_seed is None else int(self.model_seed),
                optimizer=self.optimizer,
                lr=self.lr,
                steps=self.steps,
                batch_size=self.batch,
                seed=seed,
                dtype=self.dtype,
                weight_decay=self.weight_decay,
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def runs(self) -> list[TrainRun]:
        for (o, _), (_, i) in zip(self.layer_shapes, self.layer_shapes[1:]):
            if o != i:
                raise ConfigError(f"layer shapes do not chain: {list(self.layer_shapes)}")
        if len(self.nonlinearities) != len(self.layer_shapes):
            raise ConfigError("one nonlinearity per layer is required")
        if any(nl not in ("tanh", "none") for nl in self.nonlinearities):
            raise ConfigError(f"unknown nonlinearity in {list(self.nonlinearities)}")
        if self.lr < 0:
            raise ConfigError("train.lr must be non-negative")
        return [self.run_for(s) for s in self.seeds]
