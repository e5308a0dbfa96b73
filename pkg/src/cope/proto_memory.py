"""Operational memory: momentum-updated class prototypes and replay buffers."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embed_net import decode_array, encode_array
from .numerics import DTYPE, l2_normalize


class UnknownClassError(KeyError):
    pass


class DuplicateClassError(ValueError):
    pass


class PrototypeStore:
    """One prototype per observed class, updated as ``p <- a p + (1 - a) mean(batch)``."""

    def __init__(self, latent_dim: int, momentum: float = 0.99, normalize: bool = True):
        if not 0.0 <= momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        self.latent_dim = latent_dim
        self.momentum = momentum
        self.normalize = normalize
        self.prototypes: dict[int, np.ndarray] = {}

    def __contains__(self, c) -> bool:
        return int(c) in self.prototypes

    def add(self, c: int, rng: np.random.Generator) -> None:
        if c in self.prototypes:
            raise DuplicateClassError(f"class {c} already has a prototype")
        # strictly positive draws, so the norm cannot vanish
        p = rng.uniform(0.0, 1.0, size=self.latent_dim)
        while np.any(p == 0.0):
            p = rng.uniform(0.0, 1.0, size=self.latent_dim)
        self.prototypes[int(c)] = l2_normalize(p)

    def update(self, features: np.ndarray, labels: np.ndarray) -> None:
        labels = np.asarray(labels)
        for c in np.unique(labels):
            c = int(c)
            if c not in self.prototypes:
                raise UnknownClassError(c)
            mean = features[labels == c].mean(axis=0)
            p = self.momentum * self.prototypes[c] + (1.0 - self.momentum) * mean
            self.prototypes[c] = l2_normalize(p) if self.normalize else p

    def classify(self, features: np.ndarray) -> np.ndarray:
        """Nearest prototype by dot product; ties go to the lowest class id."""
        if not self.prototypes:
            raise RuntimeError("no classes observed")
        classes = sorted(self.prototypes)
        P = np.stack([self.prototypes[c] for c in classes])
        sims = np.atleast_2d(features) @ P.T
        # argmax returns the first maximum, i.e. the lowest id among ties
        return np.asarray(classes, dtype=np.int64)[np.argmax(sims, axis=1)]

    def snapshot(self) -> dict[int, np.ndarray]:
        return {c: p.copy() for c, p in self.prototypes.items()}

    def to_dict(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "momentum": self.momentum,
            "normalize": self.normalize,
            "prototypes": {str(c): encode_array(p) for c, p in self.prototypes.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PrototypeStore":
        store = cls(d["latent_dim"], d["momentum"], d["normalize"])
        store.prototypes = {int(c): decode_array(p) for c, p in d["prototypes"].items()}
        return store


class ClassBalancedReservoir:
    """Replay buffer split equally over observed classes, with per-class reservoirs.

    ``capacity`` is the total number of exemplars.  Each class keeps at most
    ``capacity // len(classes)`` of them; when a class arrives the existing
    lists are cut down to their first ``m`` entries.
    """

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = capacity
        self.classes: list[int] = []
        self.exemplars: dict[int, list[np.ndarray]] = {}
        self.counts: dict[int, int] = {}

    @property
    def per_class(self) -> int:
        return self.capacity // len(self.classes) if self.classes else self.capacity

    def __len__(self) -> int:
        return sum(len(v) for v in self.exemplars.values())

    def add_class(self, y: int) -> None:
        y = int(y)
        if y in self.counts:
            raise DuplicateClassError(f"class {y} already initialised")
        self.counts[y] = 0
        self.classes.append(y)
        m = self.per_class
        for c in self.exemplars:
            del self.exemplars[c][m:]
        self.exemplars[y] = []

    def count(self, labels) -> None:
        for c in np.asarray(labels).tolist():
            if c not in self.counts:
                raise UnknownClassError(c)
            self.counts[c] += 1

    def update(self, inputs: np.ndarray, labels, rng: np.random.Generator) -> None:
        """Offer new stream samples to their class reservoirs.

        Counts must already include these samples.
        """
        m = self.per_class
        for x, c in zip(inputs, np.asarray(labels).tolist()):
            if c not in self.exemplars:
                raise UnknownClassError(c)
            slots = self.exemplars[c]
            if len(slots) < m:
                slots.append(np.array(x, dtype=DTYPE))
                continue
            j = int(rng.integers(1, self.counts[c], endpoint=True))
            if j <= len(slots):
                slots[j - 1] = np.array(x, dtype=DTYPE)

    def sample(self, k: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Up to ``k`` distinct exemplars drawn uniformly from all classes."""
        items = [(c, x) for c in self.classes for x in self.exemplars[c]]
        if k <= 0 or not items:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        idx = rng.choice(len(items), size=min(k, len(items)), replace=False)
        xs = np.stack([items[i][1] for i in idx])
        ys = np.array([items[i][0] for i in idx], dtype=np.int64)
        return xs, ys

    def to_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "classes": list(self.classes),
            "counts": {str(c): n for c, n in self.counts.items()},
            "exemplars": {
                str(c): encode_array(np.stack(v)) if v else None for c, v in self.exemplars.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassBalancedReservoir":
        mem = cls(d["capacity"])
        mem.classes = list(d["classes"])
        mem.counts = {int(c): n for c, n in d["counts"].items()}
        mem.exemplars = {
            int(c): ([row.copy() for row in decode_array(v)] if v is not None else [])
            for c, v in d["exemplars"].items()
        }
        return mem


@dataclass
class ReservoirBuffer:
    """Plain reservoir over the whole stream: the n-th sample is kept with probability M/n."""

    capacity: int
    seen: int = 0
    inputs: list = field(default_factory=list)
    labels: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.inputs)

    def update(self, inputs: np.ndarray, labels, rng: np.random.Generator) -> None:
        for x, c in zip(inputs, np.asarray(labels).tolist()):
            self.seen += 1
            if len(self.inputs) < self.capacity:
                self.inputs.append(np.array(x, dtype=DTYPE))
                self.labels.append(c)
                continue
            j = int(rng.integers(0, self.seen))
            if j < self.capacity:
                self.inputs[j] = np.array(x, dtype=DTYPE)
                self.labels[j] = c

    def sample(self, k: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        if k <= 0 or not self.inputs:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        idx = rng.choice(len(self.inputs), size=min(k, len(self.inputs)), replace=False)
        return np.stack([self.inputs[i] for i in idx]), np.array([self.labels[i] for i in idx], dtype=np.int64)


class OperationalMemory:
    """Prototype store plus class-balanced replay, driven the way the CoPE learner uses them.

    With ``stream_only_counts`` the per-class counts used by the reservoir only
    include new stream samples; by default they include replayed ones too.
    """

    def __init__(
        self,
        capacity: int,
        latent_dim: int,
        momentum: float = 0.99,
        normalize_prototypes: bool = True,
        stream_only_counts: bool = False,
        rng: np.random.Generator | None = None,
    ):
        self.prototypes = PrototypeStore(latent_dim, momentum, normalize_prototypes)
        self.replay = ClassBalancedReservoir(capacity)
        self.stream_only_counts = stream_only_counts
        self.rng = rng if rng is not None else np.random.default_rng(0)

    @property
    def classes(self) -> list[int]:
        return self.replay.classes

    @property
    def counts(self) -> dict[int, int]:
        return self.replay.counts

    def init_class(self, y: int) -> None:
        self.replay.add_class(y)
        self.prototypes.add(int(y), self.rng)

    def prototype_update(self, features: np.ndarray, labels, n_stream: int | None = None) -> None:
        """Momentum update of the prototypes for the classes in the batch.

        The first ``n_stream`` rows are new stream samples; the rest are replays.
        """
        labels = np.asarray(labels)
        counted = labels[:n_stream] if (self.stream_only_counts and n_stream is not None) else labels
        self.replay.count(counted)
        self.prototypes.update(features, labels)

    def memory_update(self, inputs: np.ndarray, labels) -> None:
        self.replay.update(inputs, labels, self.rng)

    def sample_replay(self, k: int, rng: np.random.Generator | None = None):
        return self.replay.sample(k, rng if rng is not None else self.rng)

    def classify(self, features: np.ndarray) -> np.ndarray:
        return self.prototypes.classify(features)

    def to_dict(self) -> dict:
        return {
            "prototypes": self.prototypes.to_dict(),
            "replay": self.replay.to_dict(),
            "stream_only_counts": self.stream_only_counts,
        }

    @classmethod
    def from_dict(cls, d: dict, rng: np.random.Generator | None = None) -> "OperationalMemory":
        mem = cls.__new__(cls)
        mem.prototypes = PrototypeStore.from_dict(d["prototypes"])
        mem.replay = ClassBalancedReservoir.from_dict(d["replay"])
        mem.stream_only_counts = d["stream_only_counts"]
        mem.rng = rng if rng is not None else np.random.default_rng(0)
        return mem
