"""End-to-end online training loop, baselines, evaluation and CSV export."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import mas
from .buffer import HardBuffer
from .controller import StabilityController
from .errors import ConfigError, EmptySamplesError, InputError, StreamFaultError
from .nn import CROSS_ENTROPY, TRIPLET, LossSpec, Model, forward, loss_and_grad, sgd_step
from .streams import StreamBatch, StreamConfig, StreamSource

log = logging.getLogger(__name__)

ONLINE_NO_BUFFER = "online-no-buffer"
ONLINE_BASELINE = "online-baseline"
ONLINE_CONTINUAL = "online-continual"
ONLINE_JOINT = "online-joint"
OFFLINE_JOINT = "offline-joint"
VARIANTS = (ONLINE_NO_BUFFER, ONLINE_BASELINE, ONLINE_CONTINUAL, ONLINE_JOINT, OFFLINE_JOINT)
ONLINE_VARIANTS = (ONLINE_NO_BUFFER, ONLINE_BASELINE, ONLINE_CONTINUAL)

PROFILES = {
    # face-identity analog: triplet embeddings
    "embedding": dict(lr=1e-4, lam=100.0, buffer_capacity=100, window=5, delta_mu=0.3, delta_sigma=0.1, inner_steps=10, loss=TRIPLET),
    # simulated-corridor analog
    "classification": dict(lr=0.01, lam=0.5, buffer_capacity=40, window=5, delta_mu=0.5, delta_sigma=0.1, inner_steps=3, loss=CROSS_ENTROPY),
    # real-robot analog
    "small": dict(lr=0.01, lam=0.5, buffer_capacity=30, window=5, delta_mu=0.5, delta_sigma=0.02, inner_steps=3, loss=CROSS_ENTROPY),
}


@dataclass
class RunConfig:
    stream: StreamConfig
    variant: str = ONLINE_CONTINUAL
    seed: int = 0
    lr: float = 0.01
    lam: float = 0.5
    buffer_capacity: int = 40
    window: int = 5
    delta_mu: float = 0.5
    delta_sigma: float = 0.1
    inner_steps: int = 3
    omega_mode: str = mas.CUMULATIVE
    normalize_buffer: bool = False
    loss: str = CROSS_ENTROPY
    margin: float = 1.0
    hidden: tuple[int, ...] = (32, 32)
    embedding_dim: int = 8
    epochs: int = 5
    eval_every: int = 50
    test_per_segment: int = 500

    @classmethod
    def from_profile(cls, profile: str, stream: StreamConfig, **overrides) -> "RunConfig":
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}")
        return cls(stream=stream, **{**PROFILES[profile], **overrides})

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @property
    def effective_capacity(self) -> int:
        return 0 if self.variant == ONLINE_NO_BUFFER else self.buffer_capacity

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.lam < 0:
            raise ConfigError("lam must be nonnegative")
        if self.buffer_capacity < 0:
            raise ConfigError("buffer capacity must be nonnegative")
        if self.inner_steps < 1 or self.epochs < 1 or self.window < 1 or self.eval_every < 1:
            raise ConfigError("inner_steps, epochs, window and eval_every must be >= 1")
        if self.omega_mode not in (mas.CUMULATIVE, mas.DECAYING):
            raise ConfigError(f"unknown omega mode {self.omega_mode!r}")
        LossSpec(self.loss, self.margin)
        if (self.loss == TRIPLET) != (self.stream.kind == "identity"):
            raise ConfigError("the triplet loss goes with the identity stream and only with it")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden sizes must be positive")
        if self.test_per_segment < 1:
            raise ConfigError("test_per_segment must be positive")


@dataclass
class EvalRecord:
    step: int
    segment_acc: list[float]
    total: float
    weighted: float
    forgetting: list[float]
    consolidated: bool
    window_mean: float | None
    window_std: float | None
    n_consolidations: int
    buffer_counts: dict[int, int]


@dataclass
class MetricsLog:
    variant: str
    seed: int
    n_segments: int
    records: list[EvalRecord] = field(default_factory=list)
    consolidations: list[dict] = field(default_factory=list)
    peaks: list[int] = field(default_factory=list)
    batches_processed: int = 0
    fault: str | None = None

    @property
    def final(self) -> EvalRecord:
        return self.records[-1]


class ClassifierReport(NamedTuple):
    total: float
    per_class: dict[int, float]
    weighted: float
    absent: list[int]


def evaluate_classifier(model: Model, X, y, n_classes: int | None = None) -> ClassifierReport:
    """Plain accuracy, per-class accuracy and their unweighted class mean.

    Classes in ``range(n_classes)`` that do not occur in ``y`` are left out of
    the weighted mean and listed in ``absent``.
    """
    y = np.asarray(y)
    if len(y) == 0:
        raise InputError("empty test set")
    pred = np.argmax(forward(model, X), axis=1)
    return _report(pred, y, n_classes)


def _report(pred, y, n_classes=None) -> ClassifierReport:
    correct = pred == y
    classes = range(n_classes) if n_classes else np.unique(y)
    per_class, absent = {}, []
    for c in classes:
        mask = y == c
        if mask.any():
            per_class[int(c)] = float(correct[mask].mean())
        else:
            absent.append(int(c))
    if absent:
        log.debug("classes %s absent from the test set", absent)
    weighted = float(np.mean(list(per_class.values())))
    return ClassifierReport(float(correct.mean()), per_class, weighted, absent)


def nearest_template(model: Model, templates, template_ids, X, rng=None) -> np.ndarray:
    """Identity of the closest template embedding for each row of X; ties broken at random."""
    template_ids = np.asarray(template_ids)
    if len(np.unique(template_ids)) < 2:
        raise ConfigError("template evaluation needs at least two identities")
    rng = np.random.default_rng(0) if rng is None else rng
    t_emb = forward(model, templates)
    x_emb = forward(model, X)
    d = ((x_emb[:, None, :] - t_emb[None, :, :]) ** 2).sum(axis=2)
    best = d.min(axis=1, keepdims=True)
    pred = np.empty(len(X), dtype=template_ids.dtype)
    for i, row in enumerate(d == best):
        pred[i] = template_ids[rng.choice(np.flatnonzero(row))]
    return pred


def evaluate_templates(model: Model, templates, template_ids, X, y, rng=None) -> float:
    """Nearest-template (1-NN over all templates) identification accuracy."""
    return float(np.mean(nearest_template(model, templates, template_ids, X, rng) == np.asarray(y)))


class _Evaluator:
    def __init__(self, config: RunConfig, source: StreamSource):
        self.tests = source.test_sets(config.test_per_segment)
        self.n_classes = source.n_classes
        self.triplet = config.loss == TRIPLET
        self.templates = source.templates() if self.triplet else None
        self.X = np.concatenate([t[0] for t in self.tests])
        self.y = np.concatenate([t[1] for t in self.tests])
        self.bounds = np.cumsum([0] + [len(t[1]) for t in self.tests])
        self.best = [-math.inf] * len(self.tests)

    def __call__(self, model: Model):
        if self.triplet:
            # fixed tie-break stream so repeated evaluations are reproducible
            pred = nearest_template(model, *self.templates, self.X, np.random.default_rng(12345))
        else:
            pred = np.argmax(forward(model, self.X), axis=1)
        report = _report(pred, self.y, self.n_classes)
        seg_acc = [
            float(np.mean(pred[a:b] == self.y[a:b])) for a, b in zip(self.bounds[:-1], self.bounds[1:])
        ]
        self.best = [max(b, a) for b, a in zip(self.best, seg_acc)]
        forgetting = [b - a for b, a in zip(self.best, seg_acc)]
        return seg_acc, report.total, report.weighted, forgetting


def _joint_batches(batches: list[StreamBatch], batch_size: int, rng) -> list[StreamBatch]:
    X = np.concatenate([b.x for b in batches])
    y = np.concatenate([b.y for b in batches])
    seg = np.concatenate([np.full(len(b.y), b.segment) for b in batches])
    order = rng.permutation(len(y))
    return [
        StreamBatch(X[order[i : i + batch_size]], y[order[i : i + batch_size]], -1)
        for i in range(0, len(y), batch_size)
    ]


def train_online(
    config: RunConfig,
    source: StreamSource | None = None,
    batches: list[StreamBatch] | None = None,
    on_step: Callable[[int, np.ndarray], None] | None = None,
) -> MetricsLog:
    """Run one variant on one stream and return its evaluation log.

    ``source`` defaults to ``config.stream.build(config.seed)``; it supplies the
    test sets. ``batches`` overrides the training batches (replay of a
    recorded stream). ``on_step`` is called after every SGD step with the
    global step index and the current flat parameters.
    """
    config.validate()
    source = source if source is not None else config.stream.build(config.seed)
    spec = LossSpec(config.loss, config.margin)
    init_seed = np.random.SeedSequence([config.seed, 1])
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    in_dim = source.input_shape[-1]
    out_dim = config.embedding_dim if config.loss == TRIPLET else source.n_classes
    model = Model.init((in_dim, *config.hidden, out_dim), init_seed)

    stream = list(batches) if batches is not None else list(source.batches())
    online = config.variant in ONLINE_VARIANTS
    continual = config.variant == ONLINE_CONTINUAL
    if online:
        schedule = [stream]
    else:
        epochs = 1 if config.variant == ONLINE_JOINT else config.epochs
        schedule = [_joint_batches(stream, source.batch_size, shuffle_rng) for _ in range(epochs)]

    buffer = HardBuffer(config.effective_capacity, config.normalize_buffer)
    controller = StabilityController(config.window, config.delta_mu, config.delta_sigma)
    importance = mas.ImportanceState.zeros(model, config.lam, config.omega_mode)
    evaluate = _Evaluator(config, source)
    metrics = MetricsLog(config.variant, config.seed, source.n_segments)
    boundaries = set(source.schedule.boundaries) if online else set()

    pending_consolidation = False
    step = 0
    t = 0

    def record():
        nonlocal pending_consolidation
        seg_acc, total, weighted, forgetting = evaluate(model)
        w = controller.window
        metrics.records.append(
            EvalRecord(
                step=t,
                segment_acc=seg_acc,
                total=total,
                weighted=weighted,
                forgetting=forgetting,
                consolidated=pending_consolidation,
                window_mean=w.mean() if len(w) else None,
                window_std=w.std() if len(w) else None,
                n_consolidations=importance.update_count,
                buffer_counts=buffer.class_counts(),
            )
        )
        pending_consolidation = False

    try:
        for epoch in schedule:
            for batch in epoch:
                if t in boundaries and (not metrics.records or metrics.records[-1].step != t):
                    record()
                data = (batch.x, batch.y)
                for n in range(config.inner_steps):
                    loss, grad = loss_and_grad(model, data, spec)
                    replay = buffer.as_batch()
                    if replay is not None:
                        b_loss, b_grad = loss_and_grad(model, replay, spec)
                        loss += b_loss
                        grad = grad + b_grad
                    if not math.isfinite(loss):
                        raise StreamFaultError(f"non-finite loss at batch {t}, inner step {n}")
                    if continual:
                        grad = grad + mas.penalty_grad(importance, model)
                    model = sgd_step(model, grad, config.lr)
                    step += 1
                    if on_step is not None:
                        on_step(step, model.params)
                    if n == 0:
                        controller.record_loss(loss)
                if continual:
                    if controller.should_consolidate() and replay is not None:
                        try:
                            importance = mas.consolidate(importance, model, replay[0])
                        except EmptySamplesError:
                            pass
                        else:
                            mu, sd = controller.on_consolidated()
                            metrics.consolidations.append(
                                dict(step=t, window_mean=mu, window_std=sd, update_count=importance.update_count)
                            )
                            pending_consolidation = True
                    if controller.check_peak():
                        metrics.peaks.append(t)
                buffer.update(model, batch.x, batch.y, spec)
                t += 1
                metrics.batches_processed = t
                if t % config.eval_every == 0:
                    record()
        if not metrics.records or metrics.records[-1].step != t:
            record()
    except StreamFaultError as exc:
        metrics.fault = str(exc)
        log.error("run aborted: %s", exc)
    return metrics


# --- CSV -----------------------------------------------------------------------


def csv_header(n_segments: int) -> list[str]:
    return (
        ["step", "variant", "seed"]
        + [f"acc_seg{i}" for i in range(n_segments)]
        + ["total", "weighted"]
        + [f"forgetting_seg{i}" for i in range(n_segments)]
        + ["consolidated", "window_mean", "window_std"]
    )


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def export_csv(metrics: MetricsLog, path) -> None:
    if not metrics.records:
        raise InputError("nothing to export: the log has no evaluation records")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(csv_header(metrics.n_segments))
        for r in metrics.records:
            writer.writerow(
                [r.step, metrics.variant, metrics.seed]
                + [_fmt(a) for a in r.segment_acc]
                + [_fmt(r.total), _fmt(r.weighted)]
                + [_fmt(f) for f in r.forgetting]
                + [int(r.consolidated), _fmt(r.window_mean), _fmt(r.window_std)]
            )


def read_csv(path) -> list[dict]:
    """Parse a file written by :func:`export_csv` back into typed rows."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for raw in csv.DictReader(fh):
            row: dict = {}
            for key, value in raw.items():
                if key == "variant":
                    row[key] = value
                elif key in ("step", "seed", "consolidated"):
                    row[key] = int(value)
                else:
                    row[key] = None if value == "" else float(value)
            rows.append(row)
    return rows
