"""Seeded non-i.i.d. sample streams with scheduled distribution shifts.

A stream is a sequence of small batches. The schedule decides which segment
(distribution) each batch comes from; learners only ever see ``(x, y)``
through iteration, while the harness can read hidden segment ids from
:meth:`StreamSource.batches` for bookkeeping.

Three generators are provided:

* ``quadrant``: 4D points labelled inside/outside the unit sphere, one
  orthant per segment.
* ``gaussian``: class-conditional Gaussians whose means drift per segment.
* ``identity``: Gaussian identity clusters emitted as pairs of tracks and
  converted to (anchor, positive, negative) triplets.
"""
from __future__ import annotations

import configparser
import queue
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np

from .errors import ConfigError, InputError


@dataclass(frozen=True)
class Segment:
    params: dict
    duration: int
    blend: int = 0  # batches spent interpolating from the previous segment; 0 means sudden

    def __post_init__(self):
        if self.duration < 1:
            raise ConfigError("segment duration must be positive")
        if self.blend < 0 or self.blend > self.duration:
            raise ConfigError("blend length must lie in [0, duration]")


@dataclass(frozen=True)
class SegmentSchedule:
    segments: tuple[Segment, ...]

    def __post_init__(self):
        if not self.segments:
            raise ConfigError("schedule needs at least one segment")

    @property
    def total(self) -> int:
        return sum(s.duration for s in self.segments)

    @property
    def boundaries(self) -> list[int]:
        """Batch indices at which a new segment starts (excluding 0)."""
        out, t = [], 0
        for s in self.segments[:-1]:
            t += s.duration
            out.append(t)
        return out

    def locate(self, t: int) -> tuple[int, int | None, float]:
        """(segment, previous segment or None, weight of the current segment) for batch t."""
        start = 0
        for i, seg in enumerate(self.segments):
            if t < start + seg.duration:
                offset = t - start
                if i > 0 and offset < seg.blend:
                    return i, i - 1, (offset + 1) / (seg.blend + 1)
                return i, None, 1.0
            start += seg.duration
        raise IndexError(f"batch {t} is past the end of the schedule ({self.total})")


@dataclass
class StreamBatch:
    x: np.ndarray
    y: np.ndarray
    segment: int
    tracks: tuple[int, int] | None = None


class StreamSource:
    """Base class; subclasses implement ``_draw`` and ``_draw_test``."""

    kind = ""

    def __init__(self, seed: int, schedule: SegmentSchedule, batch_size: int = 10):
        if batch_size < 1:
            raise ConfigError("batch size must be positive")
        self.schedule = schedule
        self.batch_size = int(batch_size)
        self.seed = seed
        self._stream_ss, self._test_ss, self._world_ss = np.random.SeedSequence(seed).spawn(3)

    n_classes = 0
    input_shape: tuple[int, ...] = ()

    @property
    def n_segments(self) -> int:
        return len(self.schedule.segments)

    def batches(self) -> Iterator[StreamBatch]:
        rng = np.random.default_rng(self._stream_ss)
        for t in range(self.schedule.total):
            seg, prev, alpha = self.schedule.locate(t)
            yield self._draw(rng, seg, prev, alpha)

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        for b in self.batches():
            yield b.x, b.y

    def test_sets(self, n_per_segment: int = 500) -> list[tuple[np.ndarray, np.ndarray]]:
        rng = np.random.default_rng(self._test_ss)
        return [self._draw_test(rng, s, n_per_segment) for s in range(self.n_segments)]

    def _pick(self, rng, seg, prev, alpha, size):
        """Segment index per sample, mixing in the previous segment during a blend."""
        if prev is None:
            return np.full(size, seg)
        return np.where(rng.random(size) < alpha, seg, prev)

    def _draw(self, rng, seg, prev, alpha) -> StreamBatch:
        raise NotImplementedError

    def _draw_test(self, rng, seg, n):
        raise NotImplementedError


def _parse_orthant(spec) -> np.ndarray:
    if isinstance(spec, str):
        if not spec or any(c not in "+-" for c in spec):
            raise ConfigError(f"orthant must be a string of +/- signs, got {spec!r}")
        return np.array([1.0 if c == "+" else -1.0 for c in spec])
    signs = np.sign(np.asarray(spec, dtype=np.float64))
    if np.any(signs == 0):
        raise ConfigError("orthant signs must be nonzero")
    return signs


class QuadrantSphereStream(StreamSource):
    """Binary inside/outside-unit-sphere task restricted to one orthant per segment.

    ``sampling="radial"`` draws a radius uniformly in ``[0, radius]`` and a
    direction uniformly over the orthant; ``sampling="box"`` draws uniformly
    from the box ``[0, radius]^d`` with signs applied. With ``balance`` each
    batch is filled by rejection to equal inside/outside counts.
    """

    kind = "quadrant"
    n_classes = 2

    def __init__(self, seed, schedule, batch_size=10, radius=1.3, sampling="radial", balance=True):
        super().__init__(seed, schedule, batch_size)
        if sampling not in ("radial", "box"):
            raise ConfigError(f"unknown sampling law {sampling!r}")
        if not radius > 1:
            raise ConfigError("radius must exceed 1 so both classes occur")
        self.radius = float(radius)
        self.sampling = sampling
        self.balance = balance
        self._signs = [_parse_orthant(s.params.get("orthant", "++++")) for s in schedule.segments]
        dims = {len(s) for s in self._signs}
        if len(dims) != 1:
            raise ConfigError("all orthants must have the same dimension")
        self.input_shape = (dims.pop(),)

    @staticmethod
    def label(x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return (np.linalg.norm(x, axis=-1) < 1.0).astype(np.int64)

    def sample_raw(self, rng, signs: np.ndarray, n: int) -> np.ndarray:
        d = len(signs)
        if self.sampling == "box":
            mag = rng.uniform(0.0, self.radius, size=(n, d))
        else:
            direction = np.abs(rng.standard_normal((n, d)))
            direction /= np.linalg.norm(direction, axis=1, keepdims=True)
            mag = direction * rng.uniform(0.0, self.radius, size=(n, 1))
        return mag * signs

    def _sample(self, rng, segs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n = len(segs)
        if not self.balance:
            x = np.concatenate([self.sample_raw(rng, self._signs[s], 1) for s in segs])
            return x, self.label(x)
        want = {1: (n + 1) // 2, 0: n // 2}
        xs, ys = [], []
        for s in segs:
            while True:
                x = self.sample_raw(rng, self._signs[s], 1)[0]
                y = int(self.label(x))
                if want[y] > 0:
                    want[y] -= 1
                    xs.append(x)
                    ys.append(y)
                    break
        return np.array(xs), np.array(ys, dtype=np.int64)

    def _draw(self, rng, seg, prev, alpha):
        x, y = self._sample(rng, self._pick(rng, seg, prev, alpha, self.batch_size))
        return StreamBatch(x, y, seg)

    def _draw_test(self, rng, seg, n):
        return self._sample(rng, np.full(n, seg))


class DriftingGaussianStream(StreamSource):
    """Class-conditional Gaussians; each segment sets means, covariances and priors.

    Segment params: ``means`` (C x d), ``priors`` (C, default uniform) and either
    ``covs`` (C x d x d) or an isotropic ``std``. During a blend the means,
    covariances and priors are linearly interpolated.
    """

    kind = "gaussian"

    def __init__(self, seed, schedule, batch_size=10):
        super().__init__(seed, schedule, batch_size)
        self._segs = [self._validate(s.params) for s in schedule.segments]
        shapes = {m.shape for m, _, _ in self._segs}
        if len(shapes) != 1:
            raise ConfigError("all segments must share the number of classes and input dim")
        self.n_classes, dim = shapes.pop()
        self.input_shape = (dim,)

    @staticmethod
    def _validate(params):
        means = np.atleast_2d(np.asarray(params["means"], dtype=np.float64))
        c, d = means.shape
        if "covs" in params:
            covs = np.asarray(params["covs"], dtype=np.float64).reshape(c, d, d)
        else:
            std = float(params.get("std", 1.0))
            covs = np.repeat((std**2 * np.eye(d))[None], c, axis=0)
        for cov in covs:
            if not np.allclose(cov, cov.T):
                raise ConfigError("covariance must be symmetric")
            try:
                np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                raise ConfigError("covariance must be positive definite") from None
        priors = np.asarray(params.get("priors", np.full(c, 1.0 / c)), dtype=np.float64)
        if priors.shape != (c,) or np.any(priors < 0) or not priors.sum() > 0:
            raise ConfigError("priors must be C nonnegative weights")
        return means, covs, priors / priors.sum()

    def _params(self, seg, prev, alpha):
        means, covs, priors = self._segs[seg]
        if prev is None:
            return means, covs, priors
        pm, pc, pp = self._segs[prev]
        return (
            alpha * means + (1 - alpha) * pm,
            alpha * covs + (1 - alpha) * pc,
            alpha * priors + (1 - alpha) * pp,
        )

    def _sample(self, rng, n, means, covs, priors):
        y = rng.choice(len(priors), size=n, p=priors)
        chol = np.linalg.cholesky(covs)
        z = rng.standard_normal((n, means.shape[1]))
        x = means[y] + np.einsum("nij,nj->ni", chol[y], z)
        return x, y.astype(np.int64)

    def _draw(self, rng, seg, prev, alpha):
        x, y = self._sample(rng, self.batch_size, *self._params(seg, prev, alpha))
        return StreamBatch(x, y, seg)

    def _draw_test(self, rng, seg, n):
        return self._sample(rng, n, *self._segs[seg])


class IdentityTrackStream(StreamSource):
    """Pairs of single-identity tracks turned into triplets.

    Each identity is an isotropic Gaussian cluster. Per batch the stream picks
    a lead identity from the segment priors and a different partner identity,
    draws a track of ``track_length`` samples for each and builds
    ``batch_size`` triplets: anchor and positive from one track, negative from
    the other (half the triplets are anchored on each track). Labels are the
    anchor identities.
    """

    kind = "identity"

    def __init__(
        self,
        seed,
        schedule,
        batch_size=10,
        n_identities=6,
        dim=8,
        spread=0.6,
        center_scale=1.0,
        track_length=8,
        n_templates=5,
    ):
        super().__init__(seed, schedule, batch_size)
        if track_length < 2:
            raise ConfigError("tracks need at least two samples")
        self.n_identities = int(n_identities)
        self.n_classes = self.n_identities
        self.dim = int(dim)
        self.input_shape = (3, self.dim)
        self.spread = float(spread)
        self.track_length = int(track_length)
        self._segs = []
        for s in schedule.segments:
            ids = np.asarray(s.params.get("identities", range(self.n_identities)), dtype=np.int64)
            if len(np.unique(ids)) < 2:
                raise ConfigError("each segment needs at least two identities")
            if ids.min() < 0 or ids.max() >= self.n_identities:
                raise ConfigError("identity id out of range")
            priors = np.asarray(s.params.get("priors", np.ones(len(ids))), dtype=np.float64)
            if priors.shape != ids.shape or np.any(priors < 0) or not priors.sum() > 0:
                raise ConfigError("identity priors must match the identity list")
            self._segs.append((ids, priors / priors.sum()))
        world = np.random.default_rng(self._world_ss)
        self.centers = world.standard_normal((self.n_identities, self.dim)) * center_scale
        tpl = self.centers[:, None, :] + self.spread * world.standard_normal((self.n_identities, n_templates, self.dim))
        self._templates = tpl.reshape(-1, self.dim), np.repeat(np.arange(self.n_identities), n_templates)

    def templates(self) -> tuple[np.ndarray, np.ndarray]:
        """Held-out template samples and their identity ids."""
        return self._templates[0].copy(), self._templates[1].copy()

    def _track(self, rng, ident, n):
        return self.centers[ident] + self.spread * rng.standard_normal((n, self.dim))

    def draw_pair(self, rng, seg, prev=None, alpha=1.0) -> tuple[int, int]:
        use = seg if prev is None or rng.random() < alpha else prev
        ids, priors = self._segs[use]
        lead = int(rng.choice(ids, p=priors))
        mask = ids != lead
        w = priors[mask]
        w = w / w.sum() if w.sum() > 0 else np.full(mask.sum(), 1.0 / mask.sum())
        return lead, int(rng.choice(ids[mask], p=w))

    def _draw(self, rng, seg, prev, alpha):
        lead, partner = self.draw_pair(rng, seg, prev, alpha)
        tracks = {lead: self._track(rng, lead, self.track_length), partner: self._track(rng, partner, self.track_length)}
        X = np.empty((self.batch_size, 3, self.dim))
        y = np.empty(self.batch_size, dtype=np.int64)
        for k in range(self.batch_size):
            own, other = (lead, partner) if k % 2 == 0 else (partner, lead)
            i, j = rng.choice(self.track_length, size=2, replace=False)
            X[k, 0] = tracks[own][i]
            X[k, 1] = tracks[own][j]
            X[k, 2] = tracks[other][rng.integers(self.track_length)]
            y[k] = own
        return StreamBatch(X, y, seg, (lead, partner))

    def _draw_test(self, rng, seg, n):
        ids, _ = self._segs[seg]
        y = rng.choice(ids, size=n)
        return self.centers[y] + self.spread * rng.standard_normal((n, self.dim)), y.astype(np.int64)


GENERATORS = {
    "quadrant": QuadrantSphereStream,
    "gaussian": DriftingGaussianStream,
    "identity": IdentityTrackStream,
}


def quadrant_sphere_stream(seed, schedule, **kw) -> QuadrantSphereStream:
    return QuadrantSphereStream(seed, schedule, **kw)


def drifting_gaussian_stream(seed, schedule, **kw) -> DriftingGaussianStream:
    return DriftingGaussianStream(seed, schedule, **kw)


def identity_track_stream(seed, schedule, **kw) -> IdentityTrackStream:
    return IdentityTrackStream(seed, schedule, **kw)


@dataclass
class StreamConfig:
    """Everything needed to rebuild a stream except the seed."""

    kind: str
    schedule: SegmentSchedule
    options: dict[str, Any] = field(default_factory=dict)

    def build(self, seed) -> StreamSource:
        if self.kind not in GENERATORS:
            raise ConfigError(f"unknown stream kind {self.kind!r}")
        return GENERATORS[self.kind](seed, self.schedule, **self.options)


# --- key-value config files -------------------------------------------------

_INT_OPTIONS = {"batch_size", "n_identities", "dim", "track_length", "n_templates"}
_FLOAT_OPTIONS = {"radius", "spread", "center_scale"}
_BOOL_OPTIONS = {"balance"}


def _parse_array(text: str) -> Any:
    """'1,2;3,4' -> [[1,2],[3,4]]; '1,2' -> [1,2]; '+-++' stays a string."""
    text = text.strip()
    if text and all(c in "+-" for c in text):
        return text
    rows = [r for r in text.split(";") if r.strip()]
    parsed = [[float(v) for v in r.replace(",", " ").split()] for r in rows]
    return parsed if len(parsed) > 1 else parsed[0] if parsed else []


def parse_stream_config(cp: configparser.ConfigParser) -> StreamConfig:
    if "stream" not in cp:
        raise ConfigError("config has no [stream] section")
    sec = cp["stream"]
    kind = sec.get("kind", "gaussian")
    options: dict[str, Any] = {}
    for key, value in sec.items():
        if key == "kind":
            continue
        if key in _INT_OPTIONS:
            options[key] = int(value)
        elif key in _FLOAT_OPTIONS:
            options[key] = float(value)
        elif key in _BOOL_OPTIONS:
            options[key] = sec.getboolean(key)
        elif key == "sampling":
            options[key] = value.strip()
        else:
            raise ConfigError(f"unknown stream option {key!r}")
    names = sorted((n for n in cp.sections() if n.startswith("segment.")), key=lambda n: int(n.split(".", 1)[1]))
    if not names:
        raise ConfigError("config defines no [segment.N] sections")
    segments = []
    for name in names:
        s = cp[name]
        params = {}
        for key, value in s.items():
            if key in ("duration", "blend"):
                continue
            if key == "identities":
                params[key] = [int(float(v)) for v in _parse_array(value)]
            elif key == "std":
                params[key] = float(value)
            else:
                params[key] = _parse_array(value)
        segments.append(Segment(params, s.getint("duration"), s.getint("blend", 0)))
    return StreamConfig(kind, SegmentSchedule(tuple(segments)), options)


def load_stream_config(path) -> StreamConfig:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise ConfigError(f"cannot read config file {path}")
    return parse_stream_config(cp)


# --- record / replay ----------------------------------------------------------
#
# File layout: a sequence of records, each an unsigned little-endian 64-bit
# count n followed by n little-endian float64 values. The first record is the
# header [format version, len(sample_shape), *sample_shape]; every following
# record is one batch [segment, K, *x.ravel(), *y].

FORMAT_VERSION = 1.0


def _write_record(fh, values: np.ndarray) -> None:
    values = np.asarray(values, dtype="<f8")
    fh.write(struct.pack("<Q", values.size))
    fh.write(values.tobytes())


def _read_record(fh) -> np.ndarray | None:
    head = fh.read(8)
    if not head:
        return None
    if len(head) != 8:
        raise InputError("truncated record header")
    (n,) = struct.unpack("<Q", head)
    body = fh.read(8 * n)
    if len(body) != 8 * n:
        raise InputError("truncated record body")
    return np.frombuffer(body, dtype="<f8").astype(np.float64)


def record_stream(batches: Iterable[StreamBatch], path) -> int:
    """Dump batches to ``path``; returns the number of batches written."""
    count = 0
    with open(path, "wb") as fh:
        shape = None
        for b in batches:
            if shape is None:
                shape = b.x.shape[1:]
                _write_record(fh, np.array([FORMAT_VERSION, len(shape), *shape], dtype=np.float64))
            elif b.x.shape[1:] != shape:
                raise InputError("all batches must share a sample shape")
            k = b.x.shape[0]
            _write_record(fh, np.concatenate([[b.segment, k], b.x.ravel(), np.asarray(b.y, dtype=np.float64)]))
            count += 1
    return count


class RecordedStream:
    """Replays a file written by :func:`record_stream`."""

    def __init__(self, path):
        self.path = Path(path)
        with open(self.path, "rb") as fh:
            header = _read_record(fh)
        if header is None or header[0] != FORMAT_VERSION:
            raise InputError(f"{path} is not a recorded stream")
        ndim = int(header[1])
        self.sample_shape = tuple(int(v) for v in header[2 : 2 + ndim])

    def batches(self) -> Iterator[StreamBatch]:
        width = int(np.prod(self.sample_shape))
        with open(self.path, "rb") as fh:
            _read_record(fh)
            while (rec := _read_record(fh)) is not None:
                seg, k = int(rec[0]), int(rec[1])
                x = rec[2 : 2 + k * width].reshape((k, *self.sample_shape))
                y = rec[2 + k * width :].astype(np.int64)
                if len(y) != k:
                    raise InputError("record length does not match its batch size")
                yield StreamBatch(x, y, seg)

    def __iter__(self):
        for b in self.batches():
            yield b.x, b.y


def prefetch(iterable: Iterable, maxsize: int = 8) -> Iterator:
    """Drive ``iterable`` on a worker thread through a bounded queue."""
    q: queue.Queue = queue.Queue(maxsize=maxsize)
    done = object()

    def worker():
        try:
            for item in iterable:
                q.put(item)
        except BaseException as exc:  # re-raised on the consumer side
            q.put(exc)
        q.put(done)

    threading.Thread(target=worker, daemon=True).start()
    while (item := q.get()) is not done:
        if isinstance(item, BaseException):
            raise item
        yield item
