"""Learner and evaluator agents, baselines, and multi-seed experiment orchestration."""
from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .embed_net import EmbeddingNetwork, LinearHead, NetConfig
from .numerics import make_rng
from .ppp_loss import LabeledFeatures, LossConfig, cross_entropy_loss, ppp_loss_terms
from .proto_memory import ClassBalancedReservoir, OperationalMemory, ReservoirBuffer
from .streams import Dataset, DatasetMissingError, Stream, StreamBatch, StreamSpec, build_stream, holdout_split, load_mnist, synth_gaussians

log = logging.getLogger(__name__)

METHODS = ("cope", "cope_ce", "reservoir_ce", "finetune")
CHECKPOINT_FORMAT = "cope-checkpoint"
CHECKPOINT_VERSION = 1


class EmptyEvaluationError(RuntimeError):
    pass


class CheckpointVersionError(ValueError):
    pass


@dataclass(frozen=True)
class LearnerConfig:
    net: NetConfig
    method: str = "cope"
    loss: LossConfig = LossConfig()
    memory_size: int = 2000
    momentum: float = 0.99
    lr: float = 0.01
    iterations: int = 1
    normalize_prototypes: bool = True
    stream_only_counts: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass(frozen=True)
class EvaluatorConfig:
    period: int = 100
    batch_size: int = 1000

    def __post_init__(self):
        if self.period < 1:
            raise ValueError("period must be >= 1")


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray
    classes: list[int]

    @property
    def recall(self) -> dict[int, float]:
        totals = self.confusion.sum(axis=1)
        return {c: float(self.confusion[k, k] / totals[k]) if totals[k] else float("nan") for k, c in enumerate(self.classes)}


@dataclass
class RunResult:
    final_accuracy: float
    timeline: list[tuple[int, float]]
    confusion: list[list[int]]
    classes: list[int]
    recall: dict[int, float]
    loss_timeline: list[tuple[int, float, float]]
    seed: int
    config: dict

    def to_dict(self) -> dict:
        d = asdict(self)
        d["recall"] = {str(k): v for k, v in self.recall.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunResult":
        d = dict(d)
        d["recall"] = {int(k): v for k, v in d["recall"].items()}
        d["timeline"] = [tuple(t) for t in d["timeline"]]
        d["loss_timeline"] = [tuple(t) for t in d["loss_timeline"]]
        return cls(**d)


# -- predictors (what the evaluator sees) ------------------------------------


class PrototypePredictor:
    """Frozen copy of the network and prototypes; predicts the nearest prototype."""

    kind = "prototype"

    def __init__(self, net: EmbeddingNetwork, prototypes: dict[int, np.ndarray]):
        self.net = net
        self.prototypes = prototypes
        self._classes = np.array(sorted(prototypes), dtype=np.int64)
        self._P = np.stack([prototypes[c] for c in self._classes]) if prototypes else None

    @property
    def classes(self) -> list[int]:
        return self._classes.tolist()

    def predict(self, x: np.ndarray) -> np.ndarray:
        if self._P is None:
            raise RuntimeError("no classes observed")
        sims = self.net.embed(x) @ self._P.T
        return self._classes[np.argmax(sims, axis=1)]

    def to_dict(self) -> dict:
        from .embed_net import encode_array

        return {
            "kind": self.kind,
            "net": self.net.to_dict(),
            "prototypes": {str(c): encode_array(p) for c, p in self.prototypes.items()},
        }


class HeadPredictor:
    kind = "head"

    def __init__(self, net: EmbeddingNetwork, head: LinearHead):
        self.net = net
        self.head = head

    @property
    def classes(self) -> list[int]:
        return list(self.head.classes)

    def predict(self, x: np.ndarray) -> np.ndarray:
        if not self.head.classes:
            raise RuntimeError("no classes observed")
        raw = self.net.forward(x)[1].raw
        return self.head.predict(raw)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "net": self.net.to_dict(), "head": self.head.to_dict()}


def predictor_from_dict(d: dict):
    from .embed_net import decode_array

    net = EmbeddingNetwork.from_dict(d["net"])
    if d["kind"] == "prototype":
        return PrototypePredictor(net, {int(c): decode_array(p) for c, p in d["prototypes"].items()})
    if d["kind"] == "head":
        return HeadPredictor(net, LinearHead.from_dict(d["head"]))
    raise ValueError(f"unknown predictor kind {d['kind']!r}")


def save_checkpoint(predictor, path, extra: dict | None = None) -> None:
    payload = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "predictor": predictor.to_dict()}
    if extra:
        payload["extra"] = extra
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path):
    try:
        payload = json.loads(Path(path).read_text())
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointVersionError(f"{path}: not a readable checkpoint ({err})") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointVersionError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: version {payload.get('version')} != {CHECKPOINT_VERSION}")
    return predictor_from_dict(payload["predictor"])


def evaluate(predictor, eval_set: Dataset, batch_size: int = 1000) -> EvalResult:
    """Accuracy and confusion matrix over evaluation samples of already observed classes."""
    classes = predictor.classes
    mask = np.isin(eval_set.labels, classes)
    if not mask.any():
        raise EmptyEvaluationError("no evaluation samples of observed classes")
    x = eval_set.inputs[mask]
    y = eval_set.labels[mask]
    preds = np.concatenate([predictor.predict(x[s : s + batch_size]) for s in range(0, len(y), batch_size)])
    index = {c: k for k, c in enumerate(classes)}
    cm = np.zeros((len(classes), len(classes)), dtype=np.int64)
    np.add.at(cm, (np.array([index[c] for c in y.tolist()]), np.array([index[c] for c in preds.tolist()])), 1)
    return EvalResult(float(np.trace(cm) / cm.sum()), cm, list(classes))


# -- learners -----------------------------------------------------------------


def _state_digest(h, arrays) -> None:
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())


class CopeLearner:
    """Online learner: PPP-loss on new plus replayed samples, momentum prototypes, balanced replay."""

    def __init__(self, config: LearnerConfig, seed: int = 0):
        self.config = config
        self.net = EmbeddingNetwork(replace(config.net, init_seed=seed))
        self.memory = OperationalMemory(
            config.memory_size,
            config.net.latent_dim,
            config.momentum,
            config.normalize_prototypes,
            config.stream_only_counts,
            rng=make_rng(seed, "memory"),
        )
        self.replay_rng = make_rng(seed, "replay")

    def observe(self, batch: StreamBatch) -> tuple[float, float]:
        n_new = len(batch.y)
        loss = pos_fraction = 0.0
        for it in range(self.config.iterations):
            xm, ym = self.memory.sample_replay(n_new, self.replay_rng)
            x = np.concatenate([batch.x, xm]) if len(ym) else batch.x
            y = np.concatenate([batch.y, ym]) if len(ym) else batch.y
            for c in y.tolist():
                if c not in self.memory.counts:
                    self.memory.init_class(c)
            features, cache = self.net.forward(x)
            out = ppp_loss_terms(LabeledFeatures(features, y, self.memory.prototypes.prototypes), self.config.loss)
            self.net.sgd_step(self.net.backward(cache, out.grad), self.config.lr)
            if it == 0:
                self.memory.prototype_update(features, y, n_stream=n_new)
            else:
                self.memory.prototypes.update(features, y)
            loss, pos_fraction = out.loss, out.pos_fraction
        self.memory.memory_update(batch.x, batch.y)
        return loss, pos_fraction

    def predictor(self) -> PrototypePredictor:
        return PrototypePredictor(self.net.copy(), self.memory.prototypes.snapshot())

    def state_hash(self) -> str:
        h = hashlib.sha256()
        _state_digest(h, self.net.weights + self.net.biases)
        for c in sorted(self.memory.prototypes.prototypes):
            _state_digest(h, [self.memory.prototypes.prototypes[c]])
            _state_digest(h, self.memory.replay.exemplars[c])
        h.update(json.dumps(self.memory.counts, sort_keys=True).encode())
        h.update(repr(self.memory.rng.bit_generator.state).encode())
        h.update(repr(self.replay_rng.bit_generator.state).encode())
        return h.hexdigest()


class CrossEntropyLearner:
    """Softmax-head baselines.

    ``finetune`` trains on new samples only, ``reservoir_ce`` replays from a
    plain reservoir and ``cope_ce`` from the class-balanced CoPE memory.
    """

    def __init__(self, config: LearnerConfig, seed: int = 0):
        self.config = config
        self.net = EmbeddingNetwork(replace(config.net, init_seed=seed))
        self.head = LinearHead(config.net.latent_dim, seed=seed)
        self.memory_rng = make_rng(seed, "memory")
        self.replay_rng = make_rng(seed, "replay")
        if config.method == "reservoir_ce":
            self.buffer = ReservoirBuffer(config.memory_size)
        elif config.method == "cope_ce":
            self.buffer = ClassBalancedReservoir(config.memory_size)
        else:
            self.buffer = None

    def observe(self, batch: StreamBatch) -> tuple[float, float]:
        n_new = len(batch.y)
        loss = 0.0
        for it in range(self.config.iterations):
            x, y = batch.x, batch.y
            if self.buffer is not None:
                xm, ym = self.buffer.sample(n_new, self.replay_rng)
                if len(ym):
                    x, y = np.concatenate([x, xm]), np.concatenate([y, ym])
            for c in y.tolist():
                if c not in self.head.classes:
                    self.head.add_class(c)
                    if isinstance(self.buffer, ClassBalancedReservoir):
                        self.buffer.add_class(c)
            if it == 0 and isinstance(self.buffer, ClassBalancedReservoir):
                self.buffer.count(y[:n_new] if self.config.stream_only_counts else y)
            _, cache = self.net.forward(x)
            logits = self.head.logits(cache.raw)
            loss, d_logits = cross_entropy_loss(logits, self.head.column_of(y))
            d_raw = d_logits @ self.head.weight.T
            grads = self.net.backward(cache, d_raw=d_raw)
            self.head.sgd_step(d_logits, cache.raw, self.config.lr)
            self.net.sgd_step(grads, self.config.lr)
        if self.buffer is not None:
            self.buffer.update(batch.x, batch.y, self.memory_rng)
        return loss, float("nan")

    def predictor(self) -> HeadPredictor:
        return HeadPredictor(self.net.copy(), self.head.copy())

    def state_hash(self) -> str:
        h = hashlib.sha256()
        _state_digest(h, self.net.weights + self.net.biases + [self.head.weight, self.head.bias])
        h.update(repr(self.memory_rng.bit_generator.state).encode())
        h.update(repr(self.replay_rng.bit_generator.state).encode())
        return h.hexdigest()


def make_learner(config: LearnerConfig, seed: int = 0):
    if config.method == "cope":
        return CopeLearner(config, seed)
    return CrossEntropyLearner(config, seed)


def _run(learner, stream: Stream, config: LearnerConfig, evaluator: EvaluatorConfig, seed: int, hook=None) -> RunResult:
    timeline: list[tuple[int, float]] = []
    loss_timeline: list[tuple[int, float, float]] = []
    window_loss: list[float] = []
    window_pos: list[float] = []
    seen = 0
    for seen, batch in enumerate(stream, start=1):
        loss, pos = learner.observe(batch)
        window_loss.append(loss)
        window_pos.append(pos)
        if seen % evaluator.period == 0:
            res = evaluate(learner.predictor(), stream.eval_set, evaluator.batch_size)
            timeline.append((seen, res.accuracy))
            loss_timeline.append((seen, float(np.mean(window_loss)), float(np.mean(window_pos))))
            window_loss, window_pos = [], []
            if hook is not None:
                hook(seen, learner, res)
    final = evaluate(learner.predictor(), stream.eval_set, evaluator.batch_size)
    if hook is not None and (not timeline or timeline[-1][0] != seen):
        hook(seen, learner, final)
    if not timeline or timeline[-1][0] != seen:
        timeline.append((seen, final.accuracy))
        if window_loss:
            loss_timeline.append((seen, float(np.mean(window_loss)), float(np.mean(window_pos))))
    return RunResult(
        final_accuracy=final.accuracy,
        timeline=timeline,
        confusion=final.confusion.tolist(),
        classes=final.classes,
        recall=final.recall,
        loss_timeline=loss_timeline,
        seed=seed,
        config=config_echo(config, evaluator),
    )


def run_cope_learner(stream: Stream, config: LearnerConfig, evaluator: EvaluatorConfig, seed: int = 0, hook=None) -> RunResult:
    if config.method != "cope":
        raise ValueError("run_cope_learner needs method='cope'")
    return _run(CopeLearner(config, seed), stream, config, evaluator, seed, hook)


def run_baseline_learner(stream: Stream, config: LearnerConfig, evaluator: EvaluatorConfig, seed: int = 0, hook=None) -> RunResult:
    if config.method == "cope":
        raise ValueError("use run_cope_learner for method='cope'")
    return _run(CrossEntropyLearner(config, seed), stream, config, evaluator, seed, hook)


def run_learner(stream: Stream, config: LearnerConfig, evaluator: EvaluatorConfig, seed: int = 0, hook=None) -> RunResult:
    return _run(make_learner(config, seed), stream, config, evaluator, seed, hook)


def config_echo(config: LearnerConfig, evaluator: EvaluatorConfig) -> dict:
    d = {"learner": asdict(config), "evaluator": asdict(evaluator)}
    d["learner"]["net"]["hidden"] = list(d["learner"]["net"]["hidden"])
    return d


# -- experiments ------------------------------------------------------------------


@dataclass(frozen=True)
class DataSource:
    """Where a run's train/test data comes from; resolved lazily inside workers."""

    kind: str = "mnist"
    path: str | None = None
    synth_classes: int = 2
    synth_dim: int = 20
    synth_separation: float = 10.0
    synth_per_class: int = 500
    synth_test_per_class: int = 200
    synth_seed: int = 0


@lru_cache(maxsize=4)
def load_data(source: DataSource) -> tuple[Dataset, Dataset]:
    if source.kind == "mnist":
        return load_mnist(source.path)
    if source.kind == "synth":
        ds = synth_gaussians(
            source.synth_classes,
            source.synth_dim,
            source.synth_separation,
            source.synth_per_class + source.synth_test_per_class,
            source.synth_seed,
        )
        return holdout_split(ds, source.synth_test_per_class, source.synth_seed)
    raise ValueError(f"unknown data source {source.kind!r}")


@dataclass(frozen=True)
class RunSpec:
    """One (configuration, seed) cell of an experiment.

    ``name`` groups seeds of the same configuration, ``variant`` identifies a
    stream variant inside a suite (e.g. which task is the big one) and
    ``setting`` a hyperparameter setting (e.g. the learning rate) competing
    in a grid.
    """

    name: str
    data: DataSource
    stream: StreamSpec
    learner: LearnerConfig
    evaluator: EvaluatorConfig
    seed: int
    variant: str = ""
    setting: str = ""

    def key(self) -> str:
        d = {
            "data": asdict(self.data),
            "stream": asdict(self.stream),
            "learner": asdict(self.learner),
            "evaluator": asdict(self.evaluator),
            "seed": self.seed,
        }
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=list).encode()).hexdigest()[:20]

    def checkpoint_prefix(self) -> str:
        parts = [self.name, self.variant, self.setting, f"seed{self.seed}"]
        return "_".join(p.replace("/", "-").replace("(", "").replace(")", "") for p in parts if p)


def execute(spec: RunSpec, checkpoint_dir=None) -> RunResult:
    """Run one spec; optionally checkpoint the evaluator snapshot at every evaluation."""
    train, test = load_data(spec.data)
    stream = build_stream(train, replace(spec.stream, seed=spec.seed), test)
    net = replace(spec.learner.net, input_dim=train.inputs.shape[1])
    config = replace(spec.learner, net=net)
    hook = None
    if checkpoint_dir is not None:
        out = Path(checkpoint_dir)
        out.mkdir(parents=True, exist_ok=True)
        prefix = spec.checkpoint_prefix()

        def hook(seen, learner, res):
            save_checkpoint(learner.predictor(), out / f"{prefix}_b{seen}.json", {"batches_seen": seen, "accuracy": res.accuracy})

    result = run_learner(stream, config, spec.evaluator, spec.seed, hook)
    return result


def _execute_cached(args) -> dict:
    spec, cache_dir, checkpoint_dir = args
    if checkpoint_dir is not None:
        return execute(spec, checkpoint_dir).to_dict()
    if cache_dir is not None:
        path = Path(cache_dir) / f"{spec.key()}.json"
        if path.exists():
            return json.loads(path.read_text())
    try:
        result = execute(spec).to_dict()
    except DatasetMissingError:
        raise
    except Exception as err:
        raise RuntimeError(f"run {spec.name} [{spec.variant} {spec.setting}] seed {spec.seed} failed: {err}") from err
    if cache_dir is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(result))
        tmp.replace(path)
    return result


@dataclass
class Summary:
    mean: float
    std: float
    n: int
    values: list[float]

    @classmethod
    def of(cls, values: Sequence[float]) -> "Summary":
        v = np.asarray(values, dtype=float)
        std = float(v.std(ddof=1)) if len(v) > 1 else 0.0
        return cls(float(v.mean()), std, len(v), v.tolist())


@dataclass
class ExperimentReport:
    runs: list[tuple[RunSpec, RunResult]]
    # name -> setting -> variant -> accuracy summary over seeds (in %)
    cells: dict[str, dict[str, dict[str, Summary]]] = field(default_factory=dict)

    def setting_score(self, name: str, setting: str) -> Summary:
        """Mean over variants of the per-variant seed means; std across variant means.

        With a single variant this is just the seed summary.
        """
        variants = self.cells[name][setting]
        if len(variants) == 1:
            return next(iter(variants.values()))
        return Summary.of([s.mean for s in variants.values()])

    def best_setting(self, name: str) -> str:
        settings = self.cells[name]
        return max(settings, key=lambda s: self.setting_score(name, s).mean)

    def score(self, name: str) -> Summary:
        return self.setting_score(name, self.best_setting(name))

    def results(self, name: str, setting: str | None = None, variant: str | None = None) -> list[RunResult]:
        setting = self.best_setting(name) if setting is None else setting
        return [
            r
            for s, r in self.runs
            if s.name == name and s.setting == setting and (variant is None or s.variant == variant)
        ]

    def rows(self) -> list[dict]:
        out = []
        for name, settings in self.cells.items():
            best = self.best_setting(name)
            for setting, variants in settings.items():
                for variant, s in variants.items():
                    out.append(
                        {"name": name, "setting": setting, "variant": variant, "mean": s.mean, "std": s.std, "n": s.n, "best": setting == best}
                    )
                if len(variants) > 1:
                    s = self.setting_score(name, setting)
                    out.append({"name": name, "setting": setting, "variant": "avg", "mean": s.mean, "std": s.std, "n": s.n, "best": setting == best})
        return out

    def to_dict(self) -> dict:
        return {
            "summary": self.rows(),
            "runs": [
                {"name": s.name, "variant": s.variant, "setting": s.setting, "seed": s.seed, "result": r.to_dict()} for s, r in self.runs
            ],
        }


def run_experiment(specs: Sequence[RunSpec], jobs: int = 1, cache_dir=None, checkpoint_dir=None) -> ExperimentReport:
    """Run every spec independently and aggregate accuracies per name/setting/variant.

    Finished runs are stored under ``cache_dir`` (keyed by their full
    configuration) and reused on the next call.
    """
    args = [(s, cache_dir, checkpoint_dir) for s in specs]
    if jobs > 1 and len(specs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            raw = list(pool.map(_execute_cached, args))
    else:
        raw = []
        for k, a in enumerate(args):
            log.info("run %d/%d: %s %s %s seed=%d", k + 1, len(args), a[0].name, a[0].variant, a[0].setting, a[0].seed)
            raw.append(_execute_cached(a))
    results = [RunResult.from_dict(r) for r in raw]
    report = ExperimentReport(list(zip(specs, results)))
    grouped: dict[str, dict[str, dict[str, list[float]]]] = {}
    for spec, res in report.runs:
        grouped.setdefault(spec.name, {}).setdefault(spec.setting, {}).setdefault(spec.variant, []).append(100.0 * res.final_accuracy)
    report.cells = {
        n: {s: {v: Summary.of(acc) for v, acc in vs.items()} for s, vs in ss.items()} for n, ss in grouped.items()
    }
    return report
