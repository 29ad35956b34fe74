"""Latent replay memory: 1-bit activations under class-balanced reservoir sampling.

Each class keeps its own reservoir of at most N samples.  New samples are
streamed through classic reservoir updates (per-class seen counters), which
makes every element of a class's lifetime stream equally likely to be
retained, regardless of which experience it arrived in.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .bitpack import BitTensor


class ReplayError(ValueError):
    pass


@dataclass(frozen=True)
class LatentSample:
    activation: BitTensor
    label: int


class MemoryFootprint(NamedTuple):
    payload_bits: int  # 1 bit per stored activation element
    float32_bits: int  # the same contents stored as 32-bit floats
    bookkeeping_bits: int  # labels and per-class counters


@dataclass
class ReplayMemory:
    quota: int  # N, max samples per class
    max_classes: int  # C
    per_class: dict[int, list[LatentSample]] = field(default_factory=dict)
    seen_counts: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.quota < 1 or self.max_classes < 1:
            raise ReplayError("quota and max_classes must be >= 1")

    @property
    def classes(self) -> list[int]:
        return sorted(self.per_class)

    @property
    def total(self) -> int:
        return sum(len(v) for v in self.per_class.values())


def update_after_experience(mem: ReplayMemory, new_samples: list[LatentSample],
                            rng: np.random.Generator) -> None:
    """Fold one experience's latents into the memory, class by class.

    Per-class reservoir update: while under quota, append; once full, sample
    i of the class's stream replaces a random slot with probability N/i.
    Classes absent from the new data are untouched.
    """
    shape = None
    for s in mem.per_class.values():
        if s:
            shape = s[0].activation.shape
            break
    for sample in new_samples:
        if sample.label < 0 or sample.label >= mem.max_classes:
            raise ReplayError(f"class id {sample.label} outside [0, {mem.max_classes})")
        if shape is None:
            shape = sample.activation.shape
        elif sample.activation.shape != shape:
            raise ReplayError(
                f"sample shape {sample.activation.shape} does not match memory shape {shape}"
            )
        bucket = mem.per_class.setdefault(sample.label, [])
        seen = mem.seen_counts.get(sample.label, 0) + 1
        mem.seen_counts[sample.label] = seen
        if len(bucket) < mem.quota:
            bucket.append(sample)
        else:
            j = int(rng.integers(0, seen))
            if j < mem.quota:
                bucket[j] = sample


def sample_minibatch(mem: ReplayMemory, b_r: int, rng: np.random.Generator) -> list[LatentSample]:
    """Draw b_r replay samples, class-balanced.

    Classes are visited round-robin in a shuffled order, one uniform draw per
    visit; within a minibatch a class's samples are drawn without replacement
    (wrapping with a reshuffle only if a bucket is exhausted).
    """
    if mem.total == 0:
        raise ReplayError("empty replay memory")
    if b_r < 1:
        raise ReplayError("b_r must be >= 1")
    classes = list(mem.classes)
    order = rng.permutation(len(classes))
    pools = {c: list(rng.permutation(len(mem.per_class[c]))) for c in classes}
    out: list[LatentSample] = []
    pos = 0
    while len(out) < b_r:
        c = classes[order[pos % len(classes)]]
        pos += 1
        if not pools[c]:
            pools[c] = list(rng.permutation(len(mem.per_class[c])))
        out.append(mem.per_class[c][pools[c].pop()])
    return out


def memory_footprint_bits(mem: ReplayMemory) -> MemoryFootprint:
    """Bit accounting for the stored latents.

    The activation payload is exactly 1 bit per element; the float32 baseline
    is the same contents at 32 bits per element (ratio exactly 32).
    """
    elements = 0
    n_samples = 0
    for bucket in mem.per_class.values():
        for s in bucket:
            elements += s.activation.size
            n_samples += 1
    bookkeeping = 16 * n_samples + 64 * len(mem.per_class)  # u16 label + u64 counter
    return MemoryFootprint(
        payload_bits=elements,
        float32_bits=32 * elements,
        bookkeeping_bits=bookkeeping,
    )
