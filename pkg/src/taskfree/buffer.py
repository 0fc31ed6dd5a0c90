"""Hard-sample buffer with prioritized keeping.

Every update re-scores the current entries under the current model, merges
the new samples, and keeps the highest-loss candidates. Equal losses favour
the newer sample; within a single update call the remaining ties are broken
by sample content so that the result does not depend on arrival order.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .nn import LossSpec, Model, per_sample_loss

log = logging.getLogger(__name__)


@dataclass
class BufferEntry:
    x: np.ndarray
    y: int
    loss: float
    stamp: int  # index of the update call that inserted this sample

    def sort_key(self):
        return (-self.loss, -self.stamp, tuple(self.x.ravel().tolist()), self.y)


class HardBuffer:
    def __init__(self, capacity: int, normalize_classes: bool = False):
        if capacity < 0:
            raise ConfigError("buffer capacity must be nonnegative")
        self.capacity = int(capacity)
        self.normalize_classes = normalize_classes
        self.entries: list[BufferEntry] = []
        self.faults = 0
        self._updates = 0

    def __len__(self):
        return len(self.entries)

    def as_batch(self):
        """Stacked ``(X, y)`` of the current contents, or None when empty."""
        if not self.entries:
            return None
        return np.stack([e.x for e in self.entries]), np.array([e.y for e in self.entries])

    def class_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for e in self.entries:
            counts[e.y] = counts.get(e.y, 0) + 1
        return dict(sorted(counts.items()))

    def update(self, model: Model, X, y, spec: LossSpec) -> None:
        if self.capacity == 0:
            return
        self._updates += 1
        candidates = []
        if self.entries:
            old = self.as_batch()
            for e, loss in zip(self.entries, per_sample_loss(model, old, spec)):
                candidates.append(BufferEntry(e.x, e.y, float(loss), e.stamp))
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        if len(X):
            for xi, yi, loss in zip(X, y, per_sample_loss(model, (X, y), spec)):
                candidates.append(BufferEntry(xi.copy(), int(yi), float(loss), self._updates))

        kept = []
        for c in candidates:
            if math.isfinite(c.loss) and c.loss >= 0:
                kept.append(c)
            else:
                self.faults += 1
                log.warning("discarding buffer candidate with loss %r", c.loss)
        kept.sort(key=BufferEntry.sort_key)
        if self.normalize_classes:
            self.entries = _balanced_select(kept, self.capacity)
        else:
            self.entries = kept[: self.capacity]


def _balanced_select(ranked: list[BufferEntry], capacity: int) -> list[BufferEntry]:
    """Even per-class quotas, then spare slots to the hardest leftovers.

    Spare slots are handed out in rounds where each class receives at most one
    extra, so class counts differ by at most one whenever every class has
    enough candidates.
    """
    by_class: dict[int, list[BufferEntry]] = {}
    for e in ranked:
        by_class.setdefault(e.y, []).append(e)
    if not by_class:
        return []
    quota = capacity // len(by_class)
    chosen = []
    leftovers: dict[int, list[BufferEntry]] = {}
    for cls, items in by_class.items():
        chosen.extend(items[:quota])
        leftovers[cls] = items[quota:]
    spare = capacity - len(chosen)
    while spare > 0 and any(leftovers.values()):
        heads = sorted((items[0] for items in leftovers.values() if items), key=BufferEntry.sort_key)
        for e in heads[:spare]:
            chosen.append(e)
            leftovers[e.y].pop(0)
        spare -= min(spare, len(heads))
    chosen.sort(key=BufferEntry.sort_key)
    return chosen
