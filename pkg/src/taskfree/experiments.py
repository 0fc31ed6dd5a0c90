"""Ready-made synthetic experiments.

``quadrant``: two orthants of the 4D sphere task, one after the other.
``drift``: four segments of a 3-class Gaussian problem, each segment living in
its own region of the plane with its own arrangement of the class clusters.
"""
from __future__ import annotations

import numpy as np

from .harness import RunConfig
from .streams import Segment, SegmentSchedule, StreamConfig


def quadrant_stream(duration: int = 600) -> StreamConfig:
    schedule = SegmentSchedule(
        (Segment({"orthant": "++++"}, duration), Segment({"orthant": "-+++"}, duration))
    )
    return StreamConfig("quadrant", schedule, {})


def drift_stream(duration: int = 300, separation: float = 1.0, std: float = 0.25) -> StreamConfig:
    regions = [(3.0, 3.0), (-3.0, 3.0), (-3.0, -3.0), (3.0, -3.0)]
    segments = []
    for s, (cx, cy) in enumerate(regions):
        phase = s * (np.pi / 2 + 0.3)
        means = [
            [cx + separation * np.cos(phase + 2 * np.pi * k / 3), cy + separation * np.sin(phase + 2 * np.pi * k / 3)]
            for k in range(3)
        ]
        segments.append(Segment({"means": means, "std": std}, duration))
    return StreamConfig("gaussian", SegmentSchedule(tuple(segments)), {})


# Window losses here are recent-batch loss plus hard-buffer loss, so the mean
# threshold sits above the per-term values of the reference profiles.
EXPERIMENTS = {
    "quadrant": (quadrant_stream, dict(lam=100.0, delta_mu=1.0, buffer_capacity=40)),
    "drift": (drift_stream, dict(lam=5.0, delta_mu=0.7)),
}


def experiment_config(name: str, variant: str, seed: int = 0, stream: StreamConfig | None = None, **overrides) -> RunConfig:
    """Classification profile plus the experiment's tuned settings; ``stream`` swaps in another schedule."""
    make_stream, tuned = EXPERIMENTS[name]
    return RunConfig.from_profile(
        "classification", stream or make_stream(), variant=variant, seed=seed, **{**tuned, **overrides}
    )
