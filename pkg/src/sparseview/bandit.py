"""UCB viewpoint selection over an orbit action space."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .camera import Camera

TWO_PI = 2.0 * math.pi


class BanditError(ValueError):
    pass


def _angle_gap(a, b):
    """Counter-clockwise azimuth distance from a to b in [0, 2pi)."""
    return (b - a) % TWO_PI


def _lerp_orbit(ca: Camera, cb: Camera, frac: float, gap: float) -> Camera:
    az_a, el_a, r_a = ca.orbit()
    _, el_b, r_b = cb.orbit()
    az = az_a + frac * gap
    el = el_a + frac * (el_b - el_a)
    r = r_a + frac * (r_b - r_a)
    return Camera.from_orbit(az, el, r, target=ca.target, up=ca.up, fov_y=ca.fov_y,
                             width=ca.width, height=ca.height)


def interpolate_viewpoints(sparse: list[Camera], n: int) -> list[Camera]:
    """``n`` in-between orbit cameras.

    Azimuth moves along the arc between angularly adjacent inputs; elevation
    and radius are linear along it. Two inputs use their shorter arc; three
    or more use the cyclic neighbour arcs, each new camera going to the arc
    with the widest current spacing (ties to the lowest arc).
    """
    if len(sparse) < 2:
        raise BanditError("need at least two sparse cameras to interpolate")
    if n < 0:
        raise BanditError("n must be >= 0")
    targets = {c.target for c in sparse}
    if len(targets) != 1:
        raise BanditError("sparse cameras must share a look-at target")
    if n == 0:
        return []
    cams = sorted(sparse, key=lambda c: c.orbit()[0])
    az = [c.orbit()[0] for c in cams]
    if len(cams) == 2:
        g = _angle_gap(az[0], az[1])
        if abs(g - math.pi) < 1e-9:
            raise BanditError("antipodal camera pair has no unique interpolation arc")
        arcs = [(cams[0], cams[1], g)] if g < math.pi else [(cams[1], cams[0], TWO_PI - g)]
    else:
        arcs = [(cams[i], cams[(i + 1) % len(cams)], _angle_gap(az[i], az[(i + 1) % len(cams)]))
                for i in range(len(cams))]
        for a, b, g in arcs:
            if g < 1e-12:
                raise BanditError("coincident sparse cameras")
    per_arc = [0] * len(arcs)
    for _ in range(n):
        spacing = [g / (k + 1) for (_, _, g), k in zip(arcs, per_arc)]
        per_arc[int(np.argmax(spacing))] += 1
    out = []
    for (a, b, g), k in zip(arcs, per_arc):
        for j in range(1, k + 1):
            out.append(_lerp_orbit(a, b, j / (k + 1), g))
    return out


@dataclass
class ActionSpace:
    viewpoints: list
    m: int
    n: int

    def __post_init__(self):
        if len(self.viewpoints) != self.m + self.n or len(self.viewpoints) < 1:
            raise BanditError("action space size must equal m + n >= 1")

    def __len__(self):
        return len(self.viewpoints)


def build_action_space(sparse: list[Camera], n: int) -> ActionSpace:
    extra = interpolate_viewpoints(sparse, n) if n else []
    return ActionSpace(list(sparse) + extra, len(sparse), len(extra))


@dataclass
class BanditState:
    counts: np.ndarray
    mean_rewards: np.ndarray
    t: int = 0
    c: float = 1.0

    @classmethod
    def fresh(cls, n_actions: int, c: float = 1.0) -> BanditState:
        if n_actions < 1:
            raise BanditError("empty action space")
        if c < 0:
            raise BanditError("exploration constant must be >= 0")
        return cls(np.zeros(n_actions, dtype=np.int64), np.zeros(n_actions), 0, c)

    @property
    def unexplored(self) -> np.ndarray:
        return self.counts == 0

    def __len__(self):
        return len(self.counts)


def ucb_values(state: BanditState) -> np.ndarray:
    """mean + c sqrt(2 ln t / N_a); unexplored arms get +inf."""
    vals = np.full(len(state), np.inf)
    seen = ~state.unexplored
    if seen.any():
        bonus = state.c * np.sqrt(2.0 * math.log(max(state.t, 1)) / state.counts[seen])
        vals[seen] = state.mean_rewards[seen] + bonus
    return vals


def select_action(state: BanditState, rtol: float = 1e-12) -> int:
    if len(state) == 0:
        raise BanditError("empty action space")
    unexplored = np.flatnonzero(state.unexplored)
    if unexplored.size:
        return int(unexplored[0])
    vals = ucb_values(state)
    best = vals.max()
    return int(np.flatnonzero(vals >= best - rtol * max(1.0, abs(best)))[0])


def update(state: BanditState, action: int, reward: float) -> BanditState:
    if not 0 <= action < len(state):
        raise BanditError(f"action {action} out of range [0, {len(state)})")
    if not math.isfinite(reward):
        raise BanditError(f"non-finite reward {reward}")
    state.counts[action] += 1
    state.t += 1
    n = state.counts[action]
    state.mean_rewards[action] += (reward - state.mean_rewards[action]) / n
    return state


@dataclass
class RewardNormalizer:
    """Running min/max of observed losses."""

    lo: float = math.inf
    hi: float = -math.inf

    def observe(self, loss: float):
        self.lo = min(self.lo, loss)
        self.hi = max(self.hi, loss)


def reward_from_loss(loss: float, tracker: RewardNormalizer) -> float:
    """Min-max normalized loss in [0, 1] after extending the tracker."""
    if loss < 0 or not math.isfinite(loss):
        raise BanditError(f"loss must be finite and >= 0, got {loss}")
    tracker.observe(loss)
    span = tracker.hi - tracker.lo
    if span <= 0:
        return 0.5
    return min(max((loss - tracker.lo) / span, 0.0), 1.0)


class UCBSelector:
    kind = "ucb"

    def __init__(self, n_actions, c=1.0, rng=None):
        self.state = BanditState.fresh(n_actions, c)

    def select(self) -> int:
        return select_action(self.state)

    def update(self, action, reward):
        update(self.state, action, reward)

    def ucb(self, action) -> float:
        return float(ucb_values(self.state)[action])


class RandomSelector(UCBSelector):
    kind = "random"

    def __init__(self, n_actions, c=1.0, rng=None):
        super().__init__(n_actions, c)
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def select(self) -> int:
        return int(self.rng.integers(len(self.state)))


class SequentialSelector(UCBSelector):
    kind = "sequential"

    def select(self) -> int:
        return self.state.t % len(self.state)


SELECTORS = {"ucb": UCBSelector, "random": RandomSelector, "sequential": SequentialSelector}


def make_selector(kind: str, n_actions: int, c: float = 1.0, rng=None):
    try:
        cls = SELECTORS[kind]
    except KeyError:
        raise BanditError(f"unknown selection strategy {kind!r}; expected one of {sorted(SELECTORS)}") from None
    return cls(n_actions, c, rng)


@dataclass
class BanditLog:
    rows: list = field(default_factory=list)

    HEADER = ("step", "action", "raw_loss", "reward", "count", "mean_reward", "ucb")

    def record(self, step, action, raw_loss, reward, selector):
        st = selector.state
        self.rows.append((step, action, raw_loss, reward, int(st.counts[action]),
                          float(st.mean_rewards[action]), selector.ucb(action)))

    def write(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.HEADER)
            for row in self.rows:
                w.writerow([row[0], row[1]] + [_fmt(x) for x in row[2:4]] + [row[4]] +
                           [_fmt(x) for x in row[5:]])


def _fmt(x) -> str:
    return "inf" if x == math.inf else f"{x:.9g}"
