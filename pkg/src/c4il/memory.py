"""Fixed-capacity, class-balanced rehearsal memory with random retention."""

from __future__ import annotations

import numpy as np

from .data import Sample


class MemoryBank:
    """Exemplar store keyed by class; total size never exceeds capacity.

    Quotas are floor(capacity / classes_seen), with the remainder going to
    the lowest class ids. Both down-sampling of retained classes and
    admission of new ones are uniformly random (no herding).
    """

    def __init__(self, capacity: int = 2000):
        if capacity < 0:
            raise ValueError(f"capacity must be nonnegative, got {capacity}")
        self.capacity = capacity
        self.store: dict[int, list[Sample]] = {}

    def __len__(self) -> int:
        return sum(len(v) for v in self.store.values())

    @property
    def classes(self) -> list[int]:
        return sorted(self.store)

    def samples(self) -> list[Sample]:
        out: list[Sample] = []
        for c in self.classes:
            out.extend(self.store[c])
        return out

    def exemplars(self, class_id: int) -> list[Sample]:
        return list(self.store.get(class_id, []))

    def quotas(self, class_ids: list[int]) -> dict[int, int]:
        """Per-class target counts for a given set of seen classes."""
        k = len(class_ids)
        if k == 0:
            return {}
        base, rem = divmod(self.capacity, k)
        return {c: base + (1 if i < rem else 0) for i, c in enumerate(sorted(class_ids))}

    def check_invariants(self) -> None:
        total = len(self)
        if total > self.capacity:
            raise AssertionError(f"memory holds {total} > capacity {self.capacity}")
        counts = [len(v) for v in self.store.values()]
        if counts and max(counts) - min(counts) > 1:
            raise AssertionError(f"per-class counts unbalanced: {counts}")


def update_memory(bank: MemoryBank, new_phase_samples: list[Sample], seed: int) -> MemoryBank:
    """Rebalance after a phase: shrink old classes, admit new ones at quota.

    Returns a new bank; the input is not mutated. If a class has fewer
    samples available than its quota, everything available is kept (the
    balance invariant then holds only up to data scarcity).
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x3e30]))
    new_by_class: dict[int, list[Sample]] = {}
    for s in new_phase_samples:
        new_by_class.setdefault(s.label, []).append(s)
    seen = sorted(set(bank.store) | set(new_by_class))
    quotas = bank.quotas(seen)

    out = MemoryBank(bank.capacity)
    scarce = False
    for c in seen:
        pool = bank.store.get(c, new_by_class.get(c, []))
        q = min(quotas[c], len(pool))
        scarce = scarce or q < quotas[c]
        keep = rng.choice(len(pool), size=q, replace=False) if q < len(pool) else np.arange(len(pool))
        out.store[c] = [pool[int(i)] for i in sorted(keep)]
    if scarce:
        # balance can only hold up to availability; capacity still must
        if len(out) > out.capacity:
            raise AssertionError(f"memory holds {len(out)} > capacity {out.capacity}")
    else:
        out.check_invariants()
    return out
