"""Experiment configuration files, presets and their expansion into runs."""
from __future__ import annotations

import copy
import dataclasses
import json
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .agents import DataSource, EvaluatorConfig, LearnerConfig, RunSpec
from .embed_net import NetConfig
from .ppp_loss import LossConfig
from .streams import SPLIT_MNIST_TASKS, StreamSpec

LR_GRID = [0.05, 0.01, 0.005, 0.001]
IID_OFFLINE_EPOCHS = 5


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    source: str = "mnist"
    path: typing.Optional[str] = None
    synth_classes: int = 2
    synth_dim: int = 20
    synth_separation: float = 10.0
    synth_per_class: int = 500
    synth_test_per_class: int = 200
    synth_seed: int = 0


@dataclass
class StreamSection:
    tasks: typing.List[typing.List[int]] = field(default_factory=lambda: [list(t) for t in SPLIT_MNIST_TASKS])
    batch_size: int = 10
    task_sizes: typing.Optional[typing.List[typing.Optional[int]]] = None
    # one stream variant per entry: task (1-based) that gets big_size samples
    imbalanced_big_tasks: typing.Optional[typing.List[int]] = None
    big_size: int = 2000
    small_size: int = 200
    shuffle_within_task: bool = True
    iid: bool = False
    epochs: int = 1


@dataclass
class NetSection:
    hidden: typing.List[int] = field(default_factory=lambda: [400, 400])
    latent_dim: int = 100
    weight_init_scale: typing.Optional[float] = None


@dataclass
class LearnerSection:
    method: str = "cope"
    lr: float = 0.01
    lr_grid: typing.Optional[typing.List[float]] = None
    memory_size: int = 2000
    momentum: float = 0.99
    iterations: int = 1
    temperature: float = 0.1
    include_pseudo_prototypes: bool = True
    attractor_enabled: bool = True
    repellor_enabled: bool = True
    normalize_prototypes: bool = True
    stream_only_counts: bool = False
    net: NetSection = field(default_factory=NetSection)


@dataclass
class EvaluatorSection:
    period: int = 100
    batch_size: int = 1000


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    data: DataSection = field(default_factory=DataSection)
    stream: StreamSection = field(default_factory=StreamSection)
    learner: LearnerSection = field(default_factory=LearnerSection)
    evaluator: EvaluatorSection = field(default_factory=EvaluatorSection)
    seeds: typing.List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    out_dir: str = "results"

    def to_dict(self) -> dict:
        return asdict(self)


def _check_scalar(value, tp, path: str):
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported type {tp}")


def _coerce(value, tp, path: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], path)
    if origin in (list, typing.List):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        (inner,) = typing.get_args(tp)
        return [_coerce(v, inner, f"{path}[{k}]") for k, v in enumerate(value)]
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
    return _check_scalar(value, tp, path)


def from_dict(cls, data, path: str = ""):
    """Build dataclass ``cls`` from ``data``, rejecting unknown keys and bad types."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown key {where}{unknown[0]}")
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(value, hints[name], f"{path}.{name}" if path else name)
    return cls(**kwargs)


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: line {err.lineno} column {err.colno}: {err.msg}") from None
    try:
        return from_dict(ExperimentConfig, data)
    except ConfigError as err:
        raise ConfigError(f"{path}: {err}") from None


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``key.path=value`` overrides; values are parsed as JSON when possible."""
    data = copy.deepcopy(cfg.to_dict())
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.strip().split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown key {key}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown key {key}")
        node[parts[-1]] = value
    return from_dict(ExperimentConfig, data)


# -- presets ------------------------------------------------------------------------


def _balanced(method: str = "cope") -> ExperimentConfig:
    cfg = ExperimentConfig(name="split-mnist-balanced")
    cfg.learner.method = method
    cfg.learner.lr_grid = list(LR_GRID)
    cfg.evaluator.period = 500
    return cfg


def _imbalanced(method: str = "cope") -> ExperimentConfig:
    cfg = ExperimentConfig(name="split-mnist-imbalanced")
    cfg.stream.imbalanced_big_tasks = [1, 2, 3, 4, 5]
    cfg.learner.method = method
    cfg.learner.lr_grid = list(LR_GRID)
    cfg.learner.memory_size = 300
    cfg.learner.iterations = 5
    cfg.learner.net = NetSection(hidden=[100, 100], latent_dim=64)
    cfg.evaluator.period = 1000
    return cfg


def _iid(epochs: int) -> ExperimentConfig:
    # upper-bound baselines: a plain softmax learner on the globally shuffled stream
    cfg = _balanced("finetune")
    cfg.name = "split-mnist-iid-offline" if epochs > 1 else "split-mnist-iid-online"
    cfg.stream.iid = True
    cfg.stream.epochs = epochs
    return cfg


def _synth_smoke() -> ExperimentConfig:
    cfg = ExperimentConfig(name="synth-smoke")
    cfg.data = DataSection(source="synth", synth_classes=2, synth_dim=20, synth_separation=10.0, synth_per_class=2500)
    cfg.stream.tasks = [[0], [1]]
    cfg.learner.lr = 0.01
    cfg.learner.memory_size = 200
    cfg.learner.net = NetSection(hidden=[64], latent_dim=16)
    cfg.evaluator.period = 100
    cfg.seeds = [0]
    return cfg


PRESETS = {
    "split-mnist-balanced": _balanced,
    "split-mnist-imbalanced": _imbalanced,
    "split-mnist-iid-online": lambda: _iid(1),
    "split-mnist-iid-offline": lambda: _iid(IID_OFFLINE_EPOCHS),
    "synth-smoke": _synth_smoke,
}


def preset(name: str) -> ExperimentConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# -- expansion into runs --------------------------------------------------------------


def learner_config(cfg: ExperimentConfig, lr: float | None = None, input_dim: int = 1) -> LearnerConfig:
    s = cfg.learner
    return LearnerConfig(
        net=NetConfig(input_dim, tuple(s.net.hidden), s.net.latent_dim, 0, s.net.weight_init_scale),
        method=s.method,
        loss=LossConfig(s.temperature, s.include_pseudo_prototypes, s.attractor_enabled, s.repellor_enabled),
        memory_size=s.memory_size,
        momentum=s.momentum,
        lr=s.lr if lr is None else lr,
        iterations=s.iterations,
        normalize_prototypes=s.normalize_prototypes,
        stream_only_counts=s.stream_only_counts,
    )


def stream_variants(cfg: ExperimentConfig) -> list[tuple[str, StreamSpec]]:
    s = cfg.stream
    tasks = tuple(tuple(t) for t in s.tasks)
    common = dict(tasks=tasks, batch_size=s.batch_size, shuffle_within_task=s.shuffle_within_task, iid=s.iid, epochs=s.epochs)
    if s.imbalanced_big_tasks:
        out = []
        for t in s.imbalanced_big_tasks:
            if not 1 <= t <= len(tasks):
                raise ConfigError(f"stream.imbalanced_big_tasks: task {t} outside 1..{len(tasks)}")
            sizes = tuple(s.big_size if k == t - 1 else s.small_size for k in range(len(tasks)))
            out.append((f"S(T{t})", StreamSpec(task_sizes=sizes, **common)))
        return out
    sizes = tuple(s.task_sizes) if s.task_sizes is not None else None
    return [("", StreamSpec(task_sizes=sizes, **common))]


def data_source(cfg: ExperimentConfig) -> DataSource:
    d = cfg.data
    if d.source not in ("mnist", "synth"):
        raise ConfigError(f"data.source: unknown source {d.source!r}")
    return DataSource(
        d.source, d.path, d.synth_classes, d.synth_dim, d.synth_separation, d.synth_per_class, d.synth_test_per_class, d.synth_seed
    )


def expand(cfg: ExperimentConfig, name: str | None = None) -> list[RunSpec]:
    """Every (variant, learning rate, seed) run described by ``cfg``."""
    try:
        lrs = cfg.learner.lr_grid or [cfg.learner.lr]
        evaluator = EvaluatorConfig(cfg.evaluator.period, cfg.evaluator.batch_size)
        source = data_source(cfg)
        specs = []
        for variant, stream in stream_variants(cfg):
            for lr in lrs:
                learner = learner_config(cfg, lr)
                for seed in cfg.seeds:
                    specs.append(RunSpec(name or cfg.name, source, stream, learner, evaluator, seed, variant, f"lr={lr:g}"))
        return specs
    except ValueError as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(str(err)) from None
