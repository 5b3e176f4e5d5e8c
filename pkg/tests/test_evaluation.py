from collections import defaultdict

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ucil import evaluation as ev
from ucil.data import SynthConfig, frame_targets, synth_dataset
from ucil.evaluation import DetectedEvent as E


def test_decode_examples():
    assert ev.decode_events(np.full((30, 2), 0.2), 0.5) == []
    p = np.zeros((40, 1))
    p[10:21] = 0.9
    (e,) = ev.decode_events(p, 0.5, median_width=3, hop_seconds=0.016, class_names=["dog"], clip_id="c")
    assert (e.class_id, e.clip_id) == ("dog", "c")
    assert e.onset == pytest.approx(0.16) and e.offset == pytest.approx(0.336)
    blip = np.zeros((9, 1))
    blip[4] = 1.0
    assert ev.decode_events(blip, 0.5, median_width=3) == []
    with pytest.raises(ValueError):
        ev.decode_events(blip, 0.5, median_width=4)
    with pytest.raises(ValueError):
        ev.decode_events(blip + 1.0, 0.5)


@pytest.mark.parametrize("level", [0.0, 0.3, 0.9, 1.0])
def test_constant_track_gives_at_most_one_event_per_class(level):
    out = ev.decode_events(np.full((25, 3), level), 0.5, median_width=5)
    assert len(out) in (0, 3)
    assert len({e.class_id for e in out}) == len(out)


def median_loop(track, width):
    half = width // 2
    padded = [track[0]] * half + list(track) + [track[-1]] * half
    return np.array([float(np.median(padded[i : i + width]) > 0.5) for i in range(len(track))])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=40), st.sampled_from([1, 3, 5, 7]))
def test_median_filter_matches_loop(bits, width):
    track = np.array(bits, dtype=float)[:, None]
    np.testing.assert_array_equal(ev.median_filter_binary(track, width)[:, 0], median_loop(track[:, 0], width))


def test_match_examples():
    cfg7 = ev.PsdsConfig(dtc=0.7, gtc=0.7)
    cfg1 = ev.PsdsConfig(dtc=0.1, gtc=0.1)
    gt = [E("a", 0.5, 1.5, "c")]
    assert ev.intersection_match([E("a", 0.5, 1.5, "c")], gt, ev.PsdsConfig(dtc=1.0, gtc=1.0)).tp["a"] == 1
    far = ev.intersection_match([E("a", 5.0, 6.0, "c")], gt, cfg7)
    assert far.fp["a"] == 1 and far.tp.get("a", 0) == 0
    half = [E("a", 0.0, 1.0, "c")]
    assert ev.intersection_match(half, gt, cfg7).tp.get("a", 0) == 0
    assert ev.intersection_match(half, gt, cfg1).tp["a"] == 1
    ct = ev.intersection_match([E("b", 0.6, 1.4, "c")], gt, cfg7)
    assert ct.ct[("b", "a")] == 1 and ct.fp.get("b", 0) == 0
    with pytest.raises(ValueError):
        ev.intersection_match([], gt + gt, cfg7)


def oracle_match(dets, gts, cfg):
    """Pairwise interval loops, no vectorisation."""
    tp, fp, ct, n_gt = defaultdict(int), defaultdict(int), defaultdict(int), defaultdict(int)

    def inter(a, b):
        return max(0.0, min(a.offset, b.offset) - max(a.onset, b.onset))

    for g in gts:
        n_gt[g.class_id] += 1
    passing = []
    for d in dets:
        same = sum(inter(d, g) for g in gts if g.clip_id == d.clip_id and g.class_id == d.class_id)
        ok = same / (d.offset - d.onset) >= cfg.dtc
        passing.append(ok)
        if ok:
            continue
        crossed = False
        for c in sorted({g.class_id for g in gts if g.clip_id == d.clip_id}):
            if c == d.class_id:
                continue
            cov = sum(inter(d, g) for g in gts if g.clip_id == d.clip_id and g.class_id == c)
            if cov / (d.offset - d.onset) >= cfg.cttc:
                ct[(d.class_id, c)] += 1
                crossed = True
        if not crossed:
            fp[d.class_id] += 1
    for g in gts:
        cov = sum(inter(d, g) for d, ok in zip(dets, passing) if ok and d.clip_id == g.clip_id and d.class_id == g.class_id)
        if cov / (g.offset - g.onset) >= cfg.gtc:
            tp[g.class_id] += 1
    return tp, fp, ct, n_gt


def random_events(rng, n, classes, clips, disjoint_keys=True):
    out, keys = [], set()
    while len(out) < n:
        on = float(np.round(rng.uniform(0, 9.5), 2))
        off = float(np.round(min(10.0, on + rng.uniform(0.05, 3.0)), 2))
        e = E(str(rng.choice(classes)), on, off, str(rng.choice(clips)))
        if off <= on or (disjoint_keys and (e.class_id, on, off, e.clip_id) in keys):
            continue
        keys.add((e.class_id, on, off, e.clip_id))
        out.append(e)
    return out


def _nz(d):
    return {k: v for k, v in d.items() if v}


def test_match_agrees_with_pairwise_oracle_on_1000_fixtures():
    rng = np.random.default_rng(0)
    cfgs = [ev.PSDS1, ev.PSDS2, ev.PsdsConfig(dtc=0.5, gtc=0.3, cttc=0.1)]
    for k in range(1000):
        n_g, n_d = rng.integers(0, 11), rng.integers(0, 11)
        gts = random_events(rng, n_g, ["a", "b", "c"], ["x", "y"])
        dets = random_events(rng, n_d, ["a", "b", "c"], ["x", "y"], disjoint_keys=False)
        cfg = cfgs[k % 3]
        got = ev.intersection_match(dets, gts, cfg)
        tp, fp, ct, n_gt = oracle_match(dets, gts, cfg)
        assert _nz(got.tp) == _nz(tp) and _nz(got.fp) == _nz(fp), k
        assert _nz(got.ct) == _nz(ct) and _nz(got.n_gt) == _nz(n_gt), k


def counts(tp, n_gt, fp=None, ct=None):
    c = ev.MatchCounts()
    c.tp.update(tp)
    c.n_gt.update(n_gt)
    c.fp.update(fp or {})
    c.ct.update(ct or {})
    return c


def test_hand_built_three_threshold_roc():
    cfg = ev.PsdsConfig(alpha_ct=0.0, alpha_st=1.0, max_efpr=100.0, thresholds=(0.2, 0.5, 0.8))
    grid = [counts({"a": 3}, {"a": 4}, {"a": 2}), counts({"a": 2}, {"a": 4}, {"a": 1}), counts({"a": 1}, {"a": 4})]
    # 0.1 h: eFPR 20, 10, 0; step envelope 0.25 on [0,10), 0.5 on [10,20), 0.75 on [20,100]
    expected = (0.25 * 10 + 0.5 * 10 + 0.75 * 80) / 100
    assert ev.psds_score(grid, cfg, 0.1, ["a"]) == pytest.approx(expected, abs=1e-9)


def test_two_class_roc_with_cross_triggers_and_spread():
    cfg = ev.PsdsConfig(alpha_ct=0.5, alpha_st=1.0, max_efpr=100.0, thresholds=(0.3, 0.7))
    lo = counts({"a": 2, "b": 1}, {"a": 2, "b": 2}, {"a": 1}, {("b", "a"): 2})
    hi = counts({"a": 1}, {"a": 2, "b": 2})
    # 0.1 h. class a: (10, 1.0), (0, 0.5); class b: eFPR 0.5*20 = 10 -> (10, 0.5), (0, 0)
    # e in [0,10): tprs (0.5, 0) -> 0.25 - 0.25 = 0; e >= 10: (1.0, 0.5) -> 0.75 - 0.25 = 0.5
    assert ev.psds_score([lo, hi], cfg, 0.1, ["a", "b"]) == pytest.approx(0.5 * 90 / 100, abs=1e-9)
    assert ev.psds_score([lo, hi], cfg, 0.1, ["b", "a"]) == pytest.approx(0.45, abs=1e-9)
    with pytest.raises(ValueError):
        ev.psds_score([lo], cfg, 0.0, ["a"])


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=4),
    st.integers(0, 3),
    st.sampled_from(["tp", "fp"]),
)
def test_score_is_monotone(rows, which, kind):
    cfg = ev.PsdsConfig(thresholds=tuple(np.linspace(0.1, 0.9, len(rows))), alpha_ct=0.5)
    base = [counts({"a": ta, "b": tb}, {"a": 6, "b": 6}, {"a": f}) for ta, tb, f in rows]
    k = which % len(rows)
    bumped = [counts(dict(c.tp), dict(c.n_gt), dict(c.fp)) for c in base]
    if kind == "tp":
        bumped[k].tp["a"] += 1
        assert ev.psds_score(bumped, cfg, 0.5, ["a", "b"]) >= ev.psds_score(base, cfg, 0.5, ["a", "b"]) - 1e-12
    else:
        bumped[k].fp["b"] += 1
        assert ev.psds_score(bumped, cfg, 0.5, ["a", "b"]) <= ev.psds_score(base, cfg, 0.5, ["a", "b"]) + 1e-12


@pytest.fixture(scope="module")
def synth_test_clips():
    corpus = synth_dataset(4, {"strong": 0, "weak": 0, "unlabeled": 0, "test": 30}, 2, SynthConfig(n_mels=16))
    ids = corpus.select("test")
    labels = {c: frame_targets(corpus.clip(c), corpus.classes, corpus.hop_seconds, corpus.n_frames) for c in ids}
    gt = [E(e.label, e.onset, e.offset, c) for c in ids for e in corpus.clip(c).events]
    return corpus, labels, gt


@pytest.mark.parametrize("cfg", [ev.PSDS1, ev.PSDS2], ids=["psds1", "psds2"])
def test_perfect_and_empty_detectors(synth_test_clips, cfg):
    corpus, labels, gt = synth_test_clips
    hop = corpus.hop_seconds
    assert ev.psds_from_probs(labels, gt, cfg, corpus.classes, hop, median_width=1) == pytest.approx(1.0, abs=1e-12)
    silent = {c: np.zeros_like(v) for c, v in labels.items()}
    assert ev.psds_from_probs(silent, gt, cfg, corpus.classes, hop, median_width=1) == 0.0


def test_score_ignores_clip_and_class_order(synth_test_clips):
    corpus, labels, gt = synth_test_clips
    rng = np.random.default_rng(1)
    noisy = {c: np.clip(v * 0.3 + rng.uniform(0, 0.8, v.shape), 0, 1) for c, v in labels.items()}
    hop = corpus.hop_seconds
    ref = ev.psds_from_probs(noisy, gt, ev.PSDS2, corpus.classes, hop)
    perm = rng.permutation(len(corpus.classes))
    swapped = {c: v[:, perm] for c, v in reversed(list(noisy.items()))}
    classes = [corpus.classes[i] for i in perm]
    assert ev.psds_from_probs(swapped, gt[::-1], ev.PSDS2, classes, hop) == pytest.approx(ref, abs=1e-12)
    assert 0.0 < ref < 1.0


def test_segment_f1_examples():
    y = np.zeros((20, 2))
    y[:10, 0] = 1
    y[4:14, 1] = 1
    assert ev.segment_f1(y, y, hop_seconds=0.5) == 1.0
    assert ev.segment_f1(1 - y, y, hop_seconds=0.5) == 0.0
    # 1 s segments of 2 frames; class 0 active in segments 0-4. Predict only 0-1 plus 5-6.
    p = y.copy()
    p[:, 0] = 0
    p[:4, 0] = 1
    p[10:14, 0] = 1
    # class 0: tp 2, fp 2, fn 3 -> 4/9; class 1 perfect
    assert ev.segment_f1(p, y, hop_seconds=0.5) == pytest.approx((4 / 9 + 1) / 2, abs=1e-12)
    assert ev.segment_f1(np.zeros((4, 1)), np.zeros((4, 1))) == 1.0


def test_tsv_round_trip(tmp_path):
    rows = [E("dog", 0.1, 0.35, "c1"), E("Alarm_bell_ringing", 2.0, 9.999, "c2")]
    p = tmp_path / "det.tsv"
    ev.write_events(rows, p)
    assert p.read_text().splitlines()[0] == "clip_id\tonset\toffset\tclass_name"
    assert ev.read_events(p) == rows


def test_invalid_events_and_configs():
    with pytest.raises(ValueError):
        E("a", 1.0, 1.0)
    with pytest.raises(ValueError):
        E("a", 2.0, 11.0)
    with pytest.raises(ValueError):
        ev.PsdsConfig(dtc=0.0)
    with pytest.raises(ValueError):
        ev.PsdsConfig(thresholds=(0.5, 0.5))
