import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sparseview.bandit import (
    BanditError,
    BanditLog,
    BanditState,
    RewardNormalizer,
    build_action_space,
    interpolate_viewpoints,
    make_selector,
    reward_from_loss,
    select_action,
    ucb_values,
    update,
)
from sparseview.camera import Camera


def ring(azimuths, elevation=0.3, radius=3.0):
    return [Camera.from_orbit(a, elevation, radius) for a in azimuths]


def _arc_gap(a, b):
    d = abs(a - b) % (2 * math.pi)
    return min(d, 2 * math.pi - d)


# ---- interpolation --------------------------------------------------------

def test_interpolation_midpoint():
    (mid,) = interpolate_viewpoints(ring([0.0, math.pi / 2], elevation=0.0), 1)
    az, el, r = mid.orbit()
    assert az == pytest.approx(math.pi / 4, abs=1e-12)
    assert el == pytest.approx(0.0, abs=1e-12)
    assert r == pytest.approx(3.0, abs=1e-12)


def test_interpolation_zero():
    assert interpolate_viewpoints(ring([0.0, 1.0]), 0) == []


def test_interpolation_even_ring_midpoints():
    base = [2 * math.pi * k / 6 for k in range(6)]
    mids = interpolate_viewpoints(ring(base), 6)
    assert len(mids) == 6
    all_az = sorted([c.orbit()[0] for c in ring(base)] + [c.orbit()[0] for c in mids])
    gaps = [_arc_gap(all_az[i], all_az[(i + 1) % 12]) for i in range(12)]
    assert np.allclose(gaps, 2 * math.pi / 12, atol=1e-9)
    for cam in mids:
        assert cam.orbit()[2] == pytest.approx(3.0)


def test_interpolation_wraps_short_arc():
    (mid,) = interpolate_viewpoints(ring([0.1, 2 * math.pi - 0.1]), 1)
    assert _arc_gap(mid.orbit()[0], 0.0) < 1e-9


def test_interpolation_errors():
    with pytest.raises(BanditError):
        interpolate_viewpoints(ring([0.0]), 1)
    with pytest.raises(BanditError):
        interpolate_viewpoints(ring([0.0, math.pi]), 1)
    with pytest.raises(BanditError):
        interpolate_viewpoints([Camera((3, 0, 0)), Camera((0, 0, 3), target=(0.1, 0, 0))], 1)


@given(st.lists(st.floats(0, 2 * math.pi - 1e-3), min_size=3, max_size=8, unique=True), st.integers(0, 12))
def test_action_space_shape(azimuths, n):
    az = sorted(azimuths)
    if min(np.diff(az + [az[0] + 2 * math.pi])) < 1e-2:
        return
    cams = ring(az)
    space = build_action_space(cams, n)
    assert len(space) == space.m + space.n == len(cams) + n
    assert space.viewpoints[:len(cams)] == cams
    for cam in space.viewpoints:
        assert cam.orbit()[2] == pytest.approx(3.0)


# ---- UCB ------------------------------------------------------------------

def test_fresh_state_all_unexplored():
    st_ = BanditState.fresh(5)
    assert np.all(np.isinf(ucb_values(st_)))
    assert st_.unexplored.all()


def test_ucb_scalar_value():
    s = BanditState(np.array([4, 96]), np.array([0.5, 0.1]), t=100, c=1.0)
    getcontext().prec = 40
    oracle = Decimal("0.5") + (2 * Decimal(100).ln() / 4).sqrt()
    assert ucb_values(s)[0] == pytest.approx(float(oracle), abs=1e-12)
    assert ucb_values(s)[0] == pytest.approx(2.01743, abs=1e-5)


def test_ucb_zero_c_is_means():
    s = BanditState(np.array([3, 5, 2]), np.array([0.2, 0.7, 0.4]), t=10, c=0.0)
    assert np.array_equal(ucb_values(s), s.mean_rewards)


def test_first_pulls_cover_in_order():
    s = BanditState.fresh(7)
    picks = []
    for _ in range(7):
        a = select_action(s)
        picks.append(a)
        update(s, a, 0.3)
    assert picks == list(range(7))
    assert np.all(s.counts >= 1)


def test_dominant_mean_and_ties():
    s = BanditState(np.array([50, 50]), np.array([0.9, 0.1]), t=100, c=0.01)
    assert select_action(s) == 0
    tie = BanditState(np.array([3, 3, 3]), np.array([0.4, 0.4 + 1e-15, 0.4]), t=9, c=1.0)
    assert select_action(tie) == 0


def test_update_examples():
    s = BanditState.fresh(2)
    update(s, 1, 0.7)
    assert s.mean_rewards[1] == 0.7 and s.counts[1] == 1
    s = BanditState.fresh(1)
    update(s, 0, 0.2)
    update(s, 0, 0.4)
    assert s.mean_rewards[0] == pytest.approx(0.3, abs=1e-15)
    s = BanditState.fresh(1)
    for _ in range(1000):
        update(s, 0, 0.123)
    assert abs(s.mean_rewards[0] - 0.123) < 1e-12


def test_update_errors():
    s = BanditState.fresh(2)
    with pytest.raises(BanditError):
        update(s, 2, 0.1)
    with pytest.raises(BanditError):
        update(s, 0, math.nan)
    with pytest.raises(BanditError):
        BanditState.fresh(0)


@given(st.lists(st.tuples(st.integers(0, 4), st.floats(0, 1)), max_size=60))
def test_counts_sum_to_t(history):
    s = BanditState.fresh(5)
    for a, r in history:
        update(s, a, r)
    assert s.counts.sum() == s.t == len(history)


@given(st.lists(st.tuples(st.integers(0, 3), st.floats(0, 1)), min_size=4, max_size=40), st.floats(-5, 5))
def test_select_invariant_to_common_shift(history, shift):
    s = BanditState.fresh(4)
    for a, _ in [(i, 0.0) for i in range(4)]:
        update(s, a, 0.5)
    for a, r in history:
        update(s, a, r)
    shifted = BanditState(s.counts.copy(), s.mean_rewards + shift, s.t, s.c)
    before = (s.counts.copy(), s.mean_rewards.copy(), s.t)
    a1 = select_action(s)
    # pure read
    assert np.array_equal(before[0], s.counts) and np.array_equal(before[1], s.mean_rewards)
    vals = ucb_values(s)
    gap = np.sort(vals)[-1] - np.sort(vals)[-2]
    if gap > 1e-9:
        assert select_action(shifted) == a1


def test_bernoulli_best_arm_fraction():
    fractions = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        sel = make_selector("ucb", 2, c=1.0)
        for _ in range(1000):
            a = sel.select()
            sel.update(a, float(rng.uniform() < (0.9 if a == 0 else 0.1)))
        fractions.append(sel.state.counts[0] / 1000)
    assert np.mean(fractions) > 0.85


# ---- rewards --------------------------------------------------------------

def test_reward_normalizer_examples():
    tr = RewardNormalizer()
    assert reward_from_loss(0.4, tr) == 0.5
    tr = RewardNormalizer(0.1, 0.5)
    assert reward_from_loss(0.3, tr) == pytest.approx(0.5, abs=1e-15)
    assert (tr.lo, tr.hi) == (0.1, 0.5)
    tr = RewardNormalizer(0.1, 0.5)
    assert reward_from_loss(0.9, tr) == 1.0
    assert (tr.lo, tr.hi) == (0.1, 0.9)
    assert reward_from_loss(0.05, tr) == 0.0
    assert tr.lo == 0.05
    with pytest.raises(BanditError):
        reward_from_loss(-1.0, tr)


@given(st.lists(st.floats(0, 1e3), min_size=1, max_size=30))
def test_rewards_in_unit_interval(losses):
    tr = RewardNormalizer()
    for x in losses:
        assert 0.0 <= reward_from_loss(x, tr) <= 1.0
    assert tr.lo == min(losses) and tr.hi == max(losses)


# ---- selectors and log ----------------------------------------------------

def test_selectors():
    seq = make_selector("sequential", 3)
    picks = []
    for _ in range(7):
        a = seq.select()
        picks.append(a)
        seq.update(a, 0.0)
    assert picks == [0, 1, 2, 0, 1, 2, 0]
    r1 = make_selector("random", 5, rng=np.random.default_rng(4))
    r2 = make_selector("random", 5, rng=np.random.default_rng(4))
    assert [r1.select() for _ in range(20)] == [r2.select() for _ in range(20)]
    with pytest.raises(BanditError):
        make_selector("thompson", 3)


def test_bandit_log_csv(tmp_path):
    sel = make_selector("ucb", 2)
    log = BanditLog()
    for step in range(3):
        a = sel.select()
        sel.update(a, 0.25 * step)
        log.record(step, a, 0.01 * step, 0.25 * step, sel)
    log.write(tmp_path / "b.csv")
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "step,action,raw_loss,reward,count,mean_reward,ucb"
    assert len(lines) == 4
    assert lines[1].startswith("0,0,0,0,1,0,")
