import configparser
import threading

import numpy as np
import pytest

from taskfree.errors import ConfigError, InputError
from taskfree.streams import (
    DriftingGaussianStream,
    IdentityTrackStream,
    QuadrantSphereStream,
    RecordedStream,
    Segment,
    SegmentSchedule,
    StreamConfig,
    load_stream_config,
    parse_stream_config,
    prefetch,
    record_stream,
)

# upper 1% points of the chi-square distribution
CHI2_99 = {1: 6.635, 2: 9.210, 3: 11.345, 4: 13.277}


def sched(*segments):
    return SegmentSchedule(tuple(segments))


def gaussian(means, duration=20, blend=0, **params):
    return Segment({"means": means, **params}, duration, blend)


def chi2_stat(counts, probs):
    exp = np.asarray(probs) * np.sum(counts)
    return float(np.sum((np.asarray(counts) - exp) ** 2 / exp))


def least_squares_probe(X, y):
    """Offline one-vs-rest linear probe; returns a predict function."""
    A = np.hstack([X, np.ones((len(X), 1))])
    T = np.eye(y.max() + 1)[y]
    W, *_ = np.linalg.lstsq(A, T, rcond=None)
    return lambda Z: np.argmax(np.hstack([Z, np.ones((len(Z), 1))]) @ W, axis=1)


# --- schedules ----------------------------------------------------------------


def test_schedule_boundaries_and_locate():
    s = sched(gaussian([[0.0], [1.0]], 3), gaussian([[0.0], [1.0]], 4, blend=2))
    assert s.total == 7 and s.boundaries == [3]
    assert s.locate(2) == (0, None, 1.0)
    assert s.locate(3) == (1, 0, pytest.approx(1 / 3))
    assert s.locate(4) == (1, 0, pytest.approx(2 / 3))
    assert s.locate(5) == (1, None, 1.0)
    with pytest.raises(IndexError):
        s.locate(7)


def test_schedule_validation():
    with pytest.raises(ConfigError):
        Segment({}, 0)
    with pytest.raises(ConfigError):
        Segment({}, 3, blend=4)
    with pytest.raises(ConfigError):
        SegmentSchedule(())


# --- quadrant sphere ----------------------------------------------------------


def test_sphere_labels():
    assert QuadrantSphereStream.label([0.1] * 4) == 1
    assert QuadrantSphereStream.label([0.9] * 4) == 0


def test_box_inside_fraction_matches_volume():
    src = QuadrantSphereStream(0, sched(Segment({"orthant": "++++"}, 1)), sampling="box", balance=False)
    x = src.sample_raw(np.random.default_rng(0), np.ones(4), 100_000)
    frac = QuadrantSphereStream.label(x).mean()
    assert frac == pytest.approx((np.pi**2 / 32) / 1.3**4, abs=0.01)
    assert abs(frac - 0.108) < 0.01


def test_radial_inside_fraction():
    src = QuadrantSphereStream(0, sched(Segment({"orthant": "++++"}, 1)), balance=False)
    x = src.sample_raw(np.random.default_rng(1), np.ones(4), 100_000)
    assert QuadrantSphereStream.label(x).mean() == pytest.approx(1 / 1.3, abs=0.01)


def test_quadrant_batches_balanced_and_in_orthant():
    src = QuadrantSphereStream(3, sched(Segment({"orthant": "++++"}, 5), Segment({"orthant": "-+++"}, 5)))
    for b in src.batches():
        assert b.y.sum() == 5
        signs = np.sign(b.x)
        expected = np.array([1, 1, 1, 1]) if b.segment == 0 else np.array([-1, 1, 1, 1])
        assert np.all((signs == expected) | (signs == 0))


def test_bad_orthant():
    with pytest.raises(ConfigError):
        QuadrantSphereStream(0, sched(Segment({"orthant": "+x++"}, 1)))


# --- drifting Gaussians ---------------------------------------------------------


def test_identical_means_are_chance_level():
    src = DriftingGaussianStream(0, sched(gaussian([[0.0, 0.0], [0.0, 0.0]], 200)))
    X = np.concatenate([b.x for b in src.batches()])
    y = np.concatenate([b.y for b in src.batches()])
    (Xt, yt), = src.test_sets(2000)
    acc = (least_squares_probe(X, y)(Xt) == yt).mean()
    assert acc <= 0.5 + 3 * np.sqrt(0.25 / len(yt))


def test_separated_means_linear_probe():
    src = DriftingGaussianStream(1, sched(gaussian([[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]], 100, std=1.0)))
    X = np.concatenate([b.x for b in src.batches()])
    y = np.concatenate([b.y for b in src.batches()])
    (Xt, yt), = src.test_sets(3000)
    assert (least_squares_probe(X, y)(Xt) == yt).mean() >= 0.99


@pytest.mark.parametrize("covs", [[[1.0, 2.0], [2.0, 1.0]], [[1.0, 0.5], [0.0, 1.0]]])
def test_invalid_covariance(covs):
    with pytest.raises(ConfigError):
        DriftingGaussianStream(0, sched(gaussian([[0.0, 0.0]], covs=[covs])))


def test_sudden_boundary_changes_segment_id_exactly():
    src = DriftingGaussianStream(0, sched(gaussian([[0.0], [1.0]], 7), gaussian([[5.0], [6.0]], 5)))
    ids = [b.segment for b in src.batches()]
    assert ids == [0] * 7 + [1] * 5


def test_gradual_blend_moves_means():
    src = DriftingGaussianStream(
        0, sched(gaussian([[0.0], [0.0]], 1, std=1e-9), gaussian([[10.0], [10.0]], 9, blend=4, std=1e-9))
    )
    means, _, _ = src._params(1, 0, 0.5)
    assert means == pytest.approx(np.array([[5.0], [5.0]]))


def test_class_priors_chi_square():
    priors = [0.6, 0.3, 0.1]
    src = DriftingGaussianStream(5, sched(gaussian([[0.0], [1.0], [2.0]], 1000, priors=priors)))
    y = np.concatenate([b.y for b in src.batches()])
    assert len(y) == 10_000
    assert chi2_stat(np.bincount(y, minlength=3), priors) < CHI2_99[2]


# --- identity tracks --------------------------------------------------------------


def identity_stream(seed=0, **kw):
    segs = sched(Segment({"identities": [0, 1, 2], "priors": [0.5, 0.3, 0.2]}, 40), Segment({"identities": [3, 4, 5]}, 40))
    return IdentityTrackStream(seed, segs, **kw)


def test_track_pairs_distinct_and_triplets_consistent():
    src = identity_stream()
    for b in src.batches():
        lead, partner = b.tracks
        assert lead != partner
        assert set(b.y) == {lead, partner}
        assert b.x.shape == (10, 3, 8)


def test_templates_disjoint_from_stream():
    src = identity_stream()
    T, ids = src.templates()
    assert np.bincount(ids).tolist() == [5] * 6
    seen = {tuple(v) for b in src.batches() for v in b.x.reshape(-1, 8)}
    assert not any(tuple(t) in seen for t in T)


def test_lead_identity_frequency_matches_priors():
    src = identity_stream()
    rng = np.random.default_rng(11)
    leads = np.array([src.draw_pair(rng, 0)[0] for _ in range(10_000)])
    counts = np.bincount(leads, minlength=3)[:3]
    for c, p in zip(counts, [0.5, 0.3, 0.2]):
        assert abs(c / 1e4 - p) <= 4 * np.sqrt(p * (1 - p) / 1e4)
    assert chi2_stat(counts, [0.5, 0.3, 0.2]) < CHI2_99[2]


def test_identity_segment_needs_two_ids():
    with pytest.raises(ConfigError):
        IdentityTrackStream(0, sched(Segment({"identities": [1, 1]}, 5)))


# --- shared stream contract ---------------------------------------------------------


@pytest.mark.parametrize(
    "make",
    [
        lambda s: QuadrantSphereStream(s, sched(Segment({"orthant": "++++"}, 10), Segment({"orthant": "-+++"}, 10, blend=3))),
        lambda s: DriftingGaussianStream(s, sched(gaussian([[0.0], [2.0]]), gaussian([[1.0], [3.0]], blend=5))),
        lambda s: identity_stream(s),
    ],
)
def test_same_seed_bit_identical(make):
    a, b, c = make(7), make(7), make(8)
    for (xa, ya), (xb, yb) in zip(a, b):
        assert xa.tobytes() == xb.tobytes() and ya.tobytes() == yb.tobytes()
    assert any(not np.array_equal(xa, xc) for (xa, _), (xc, _) in zip(make(7), c))
    ta, tb = a.test_sets(50), b.test_sets(50)
    assert all(np.array_equal(p[0], q[0]) for p, q in zip(ta, tb))


def test_learner_view_hides_segment():
    src = DriftingGaussianStream(0, sched(gaussian([[0.0], [1.0]], 3), gaussian([[5.0], [6.0]], 3)))
    items = list(src)
    assert len(items) == 6
    assert all(isinstance(it, tuple) and len(it) == 2 for it in items)


# --- record / replay ------------------------------------------------------------------


@pytest.mark.parametrize("factory", ["gaussian", "identity"])
def test_record_replay_roundtrip(tmp_path, factory):
    src = identity_stream() if factory == "identity" else DriftingGaussianStream(
        2, sched(gaussian([[0.0, 1.0], [2.0, 3.0]], 6), gaussian([[1.0, 1.0], [3.0, 3.0]], 4))
    )
    path = tmp_path / "stream.bin"
    n = record_stream(src.batches(), path)
    assert n == src.schedule.total
    replay = list(RecordedStream(path).batches())
    for a, b in zip(src.batches(), replay):
        assert a.x.tobytes() == b.x.tobytes()
        assert np.array_equal(a.y, b.y) and a.segment == b.segment


def test_record_format_is_length_prefixed_le_doubles(tmp_path):
    src = DriftingGaussianStream(0, sched(gaussian([[0.0], [1.0]], 2)), batch_size=3)
    path = tmp_path / "s.bin"
    record_stream(src.batches(), path)
    raw = path.read_bytes()
    assert int.from_bytes(raw[:8], "little") == 3  # header: version, ndim, dim
    assert np.frombuffer(raw[8:32], "<f8").tolist() == [1.0, 1.0, 1.0]
    assert int.from_bytes(raw[32:40], "little") == 2 + 3 + 3
    assert len(raw) == 32 + 2 * (8 + 8 * 8)


def test_truncated_recording(tmp_path):
    src = DriftingGaussianStream(0, sched(gaussian([[0.0], [1.0]], 2)))
    path = tmp_path / "s.bin"
    record_stream(src.batches(), path)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(InputError):
        list(RecordedStream(path))


def test_not_a_recording(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes((1).to_bytes(8, "little") + np.array([9.0]).tobytes())
    with pytest.raises(InputError):
        RecordedStream(path)


# --- handoff queue --------------------------------------------------------------------------


def test_prefetch_preserves_order_on_another_thread():
    src = DriftingGaussianStream(0, sched(gaussian([[0.0], [1.0]], 30)))
    producers = []

    def tagged():
        for b in src.batches():
            producers.append(threading.get_ident())
            yield b

    got = list(prefetch(tagged(), maxsize=2))
    assert [b.x.tobytes() for b in got] == [b.x.tobytes() for b in src.batches()]
    assert threading.get_ident() not in producers


def test_prefetch_propagates_errors():
    def broken():
        yield 1
        raise ValueError("boom")

    it = prefetch(broken())
    assert next(it) == 1
    with pytest.raises(ValueError, match="boom"):
        next(it)


# --- config files -------------------------------------------------------------------------


INI = """
[stream]
kind = gaussian
batch_size = 5

[segment.1]
duration = 8
blend = 2
means = 1,1; 2,2
std = 0.5

[segment.0]
duration = 4
means = 0,0; 1,0
priors = 0.7, 0.3
"""


def test_parse_ini(tmp_path):
    path = tmp_path / "s.ini"
    path.write_text(INI)
    cfg = load_stream_config(path)
    assert cfg.kind == "gaussian" and cfg.options == {"batch_size": 5}
    s0, s1 = cfg.schedule.segments
    assert (s0.duration, s1.duration, s1.blend) == (4, 8, 2)
    assert s0.params["priors"] == [0.7, 0.3]
    assert s1.params == {"means": [[1.0, 1.0], [2.0, 2.0]], "std": 0.5}
    src = cfg.build(0)
    assert src.batch_size == 5 and src.schedule.total == 12


def test_parse_quadrant_orthant():
    cp = configparser.ConfigParser()
    cp.read_string("[stream]\nkind = quadrant\nradius = 1.5\n[segment.0]\nduration = 3\northant = -+-+\n")
    cfg = parse_stream_config(cp)
    assert cfg.schedule.segments[0].params["orthant"] == "-+-+"
    assert cfg.build(0).radius == 1.5


@pytest.mark.parametrize(
    "text",
    [
        "[segment.0]\nduration = 3\nmeans = 0;1\n",
        "[stream]\nkind = gaussian\n",
        "[stream]\nbogus = 1\n[segment.0]\nduration = 3\nmeans = 0;1\n",
    ],
)
def test_parse_errors(text):
    cp = configparser.ConfigParser()
    cp.read_string(text)
    with pytest.raises(ConfigError):
        parse_stream_config(cp)


def test_unknown_kind():
    with pytest.raises(ConfigError):
        StreamConfig("video", sched(gaussian([[0.0], [1.0]]))).build(0)
