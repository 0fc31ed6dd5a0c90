"""Loss-window plateau/peak detector that decides when to consolidate."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

from .errors import ConfigError, StreamFaultError


class LossWindow:
    """Fixed-capacity FIFO of recent losses."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("window capacity must be positive")
        self.capacity = int(capacity)
        self._entries: deque[float] = deque(maxlen=self.capacity)

    def append(self, loss: float) -> None:
        self._entries.append(float(loss))

    def clear(self) -> None:
        self._entries.clear()

    @property
    def entries(self) -> list[float]:
        return list(self._entries)

    @property
    def full(self) -> bool:
        return len(self._entries) == self.capacity

    def __len__(self):
        return len(self._entries)

    def mean(self) -> float:
        if not self._entries:
            return math.nan
        n = len(self._entries)
        try:
            mu = math.fsum(self._entries) / n
        except OverflowError:
            return math.inf
        # second pass removes the rounding of the division, so a constant
        # window has exactly that constant as its mean
        return mu + math.fsum(v - mu for v in self._entries) / n

    def std(self) -> float:
        """Sample standard deviation; 0 for a single entry."""
        n = len(self._entries)
        if n == 0:
            return math.nan
        if n == 1:
            return 0.0
        mu = self.mean()
        dev = [v - mu for v in self._entries]
        scale = max(abs(d) for d in dev)
        if scale == 0 or not math.isfinite(scale):
            return scale
        # scaled so squaring cannot overflow for large finite losses
        return scale * math.sqrt(math.fsum((d / scale) ** 2 for d in dev) / (n - 1))


@dataclass
class StabilityController:
    window_length: int = 5
    delta_mu: float = 0.5
    delta_sigma: float = 0.1
    plateau: bool = False
    mu_old: float = 0.0
    sigma_old: float = 0.0
    window: LossWindow = field(init=False)

    def __post_init__(self):
        if not (self.delta_mu > 0 and self.delta_sigma > 0):
            raise ConfigError("plateau thresholds must be positive")
        self.window = LossWindow(self.window_length)

    def record_loss(self, loss: float) -> None:
        if not math.isfinite(loss):
            raise StreamFaultError(f"non-finite loss {loss!r}")
        self.window.append(loss)

    def should_consolidate(self) -> bool:
        return (
            self.window.full
            and not self.plateau
            and self.window.mean() < self.delta_mu
            and self.window.std() < self.delta_sigma
        )

    def on_consolidated(self) -> tuple[float, float]:
        """Remember the plateau statistics, clear the window and disarm."""
        self.mu_old = self.window.mean()
        self.sigma_old = self.window.std()
        self.window.clear()
        self.plateau = True
        return self.mu_old, self.sigma_old

    def check_peak(self) -> bool:
        """Re-arm when the window mean rises above mu_old + sigma_old.

        Returns True only on the disarmed -> armed transition.
        """
        if self.plateau and len(self.window) and self.window.mean() > self.mu_old + self.sigma_old:
            self.plateau = False
            return True
        return False
