"""Class-balanced contrastive memory: per-class FIFO queues of key vectors.

Each stored entry is a detached unit-norm embedding tagged with the source
image index and weather class. The multi-queue keeps one fixed-capacity FIFO
per weather class so the memory stays class-balanced no matter how imbalanced
the stream of keys is. A single shared FIFO and an update-in-place per-image
bank are provided as alternative storage strategies behind the same API.
"""

from __future__ import annotations

from typing import NamedTuple

import torch


class ProjEntry(NamedTuple):
    """One stored key: embedding vector plus provenance tags."""

    vector: torch.Tensor
    image_index: int
    weather: int


class _Ring:
    """Fixed-capacity FIFO over preallocated tensors."""

    def __init__(self, capacity: int, dim: int):
        self.capacity = capacity
        self.vecs = torch.zeros(capacity, dim)
        self.idx = torch.full((capacity,), -1, dtype=torch.long)
        self.wth = torch.full((capacity,), -1, dtype=torch.long)
        self.fill = 0
        self.ptr = 0

    def push(self, vector: torch.Tensor, image_index: int, weather: int) -> None:
        self.vecs[self.ptr] = vector.detach()
        self.idx[self.ptr] = image_index
        self.wth[self.ptr] = weather
        self.ptr = (self.ptr + 1) % self.capacity
        self.fill = min(self.fill + 1, self.capacity)

    def order(self) -> list[int]:
        """Slot indices oldest -> newest."""
        if self.fill < self.capacity:
            return list(range(self.fill))
        return list(range(self.ptr, self.capacity)) + list(range(self.ptr))

    def entries(self) -> list[ProjEntry]:
        return [
            ProjEntry(self.vecs[i].clone(), int(self.idx[i]), int(self.wth[i]))
            for i in self.order()
        ]

    def stacked(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        sel = torch.as_tensor(self.order(), dtype=torch.long)
        return self.vecs[sel], self.idx[sel], self.wth[sel]


class MultiQueue:
    """B equal-capacity FIFO sub-queues, one per weather class.

    Keys route to the sub-queue of their weather tag; eviction is strictly
    FIFO within a sub-queue and classes never displace each other, so after
    enough pushes every class holds exactly ``capacity`` keys.
    """

    kind = "multi-queue"

    def __init__(self, num_classes: int, capacity: int, dim: int):
        if num_classes < 2:
            raise ValueError("need at least 2 classes (a single class admits no "
                             "cross-class negatives)")
        if capacity < 1 or dim < 1:
            raise ValueError("capacity and dim must be positive")
        self.num_classes = num_classes
        self.capacity = capacity
        self.dim = dim
        self._rings = [_Ring(capacity, dim) for _ in range(num_classes)]

    def _check_class(self, weather: int) -> None:
        if not (0 <= weather < self.num_classes):
            raise ValueError(f"weather tag {weather} out of range [0, {self.num_classes})")

    def push(self, vector: torch.Tensor, image_index: int, weather: int) -> None:
        self._check_class(weather)
        self._rings[weather].push(vector, image_index, weather)

    def push_batch(self, vectors: torch.Tensor, image_indices, weathers) -> None:
        for v, i, w in zip(vectors, image_indices, weathers):
            self.push(v, int(i), int(w))

    def class_entries(self, weather: int) -> list[ProjEntry]:
        self._check_class(weather)
        return self._rings[weather].entries()

    def all_entries(self) -> list[ProjEntry]:
        return [e for ring in self._rings for e in ring.entries()]

    def positives(self, image_index: int) -> list[ProjEntry]:
        return [e for e in self.all_entries() if e.image_index == image_index]

    @property
    def fill_counts(self) -> tuple[int, ...]:
        return tuple(ring.fill for ring in self._rings)

    def __len__(self) -> int:
        return sum(self.fill_counts)

    def stacked(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """All filled keys as (vectors, image indices, weather tags)."""
        parts = [ring.stacked() for ring in self._rings if ring.fill]
        if not parts:
            empty = torch.zeros(0, dtype=torch.long)
            return torch.zeros(0, self.dim), empty, empty.clone()
        vecs, idx, wth = zip(*parts)
        return torch.cat(vecs), torch.cat(idx), torch.cat(wth)

    def state_dict(self) -> dict:
        vecs, idx, wth = self.stacked()
        return {
            "kind": self.kind,
            "num_classes": self.num_classes,
            "capacity": self.capacity,
            "dim": self.dim,
            "vectors": vecs,
            "image_indices": idx,
            "weathers": wth,
        }

    @classmethod
    def from_state(cls, state: dict) -> "MultiQueue":
        mq = cls(state["num_classes"], state["capacity"], state["dim"])
        mq._load_entries(state)
        return mq

    def _load_entries(self, state: dict) -> None:
        for v, i, w in zip(state["vectors"], state["image_indices"], state["weathers"]):
            self.push(v, int(i), int(w))


class SingleQueue(MultiQueue):
    """One shared FIFO (class routing disabled), tags retained on entries."""

    kind = "single-queue"

    def __init__(self, num_classes: int, capacity: int, dim: int):
        if num_classes < 1 or capacity < 1 or dim < 1:
            raise ValueError("dimensions must be positive")
        self.num_classes = num_classes
        self.capacity = capacity
        self.dim = dim
        self._rings = [_Ring(capacity, dim)]

    def push(self, vector: torch.Tensor, image_index: int, weather: int) -> None:
        self._check_class(weather)
        self._rings[0].push(vector, image_index, weather)

    def class_entries(self, weather: int) -> list[ProjEntry]:
        self._check_class(weather)
        return [e for e in self._rings[0].entries() if e.weather == weather]

    @property
    def fill_counts(self) -> tuple[int, ...]:
        return (self._rings[0].fill,)

    @classmethod
    def from_state(cls, state: dict) -> "SingleQueue":
        sq = cls(state["num_classes"], state["capacity"], state["dim"])
        sq._load_entries(state)
        return sq


class MemoryBank(SingleQueue):
    """One slot per image, overwritten in place when the image recurs."""

    kind = "memory-bank"

    def __init__(self, num_classes: int, dim: int):
        self.num_classes = num_classes
        self.dim = dim
        self._slots: dict[int, ProjEntry] = {}

    def push(self, vector: torch.Tensor, image_index: int, weather: int) -> None:
        self._check_class(weather)
        self._slots[image_index] = ProjEntry(vector.detach().clone(), image_index, weather)

    def all_entries(self) -> list[ProjEntry]:
        return list(self._slots.values())

    def class_entries(self, weather: int) -> list[ProjEntry]:
        self._check_class(weather)
        return [e for e in self._slots.values() if e.weather == weather]

    def positives(self, image_index: int) -> list[ProjEntry]:
        entry = self._slots.get(image_index)
        return [entry] if entry is not None else []

    @property
    def fill_counts(self) -> tuple[int, ...]:
        return (len(self._slots),)

    def __len__(self) -> int:
        return len(self._slots)

    def stacked(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        if not self._slots:
            empty = torch.zeros(0, dtype=torch.long)
            return torch.zeros(0, self.dim), empty, empty.clone()
        entries = self.all_entries()
        return (
            torch.stack([e.vector for e in entries]),
            torch.tensor([e.image_index for e in entries], dtype=torch.long),
            torch.tensor([e.weather for e in entries], dtype=torch.long),
        )

    def state_dict(self) -> dict:
        vecs, idx, wth = self.stacked()
        return {
            "kind": self.kind,
            "num_classes": self.num_classes,
            "dim": self.dim,
            "vectors": vecs,
            "image_indices": idx,
            "weathers": wth,
        }

    @classmethod
    def from_state(cls, state: dict) -> "MemoryBank":
        mb = cls(state["num_classes"], state["dim"])
        mb._load_entries(state)
        return mb


def make_memory(kind: str, num_classes: int, capacity: int, dim: int):
    """Build the configured key-storage strategy.

    The single queue gets the multi-queue's total capacity (``B * L``) so the
    two differ only in class balance, not memory size.
    """
    if kind == "multi-queue":
        return MultiQueue(num_classes, capacity, dim)
    if kind == "single-queue":
        return SingleQueue(num_classes, capacity * num_classes, dim)
    if kind == "memory-bank":
        return MemoryBank(num_classes, dim)
    raise ValueError(f"unknown memory kind {kind!r}")


def memory_from_state(state: dict):
    kinds = {
        "multi-queue": MultiQueue,
        "single-queue": SingleQueue,
        "memory-bank": MemoryBank,
    }
    try:
        cls = kinds[state["kind"]]
    except KeyError as exc:
        raise ValueError(f"unknown memory kind in state: {state.get('kind')!r}") from exc
    return cls.from_state(state)
