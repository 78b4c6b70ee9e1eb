"""Desk-scale CMDP instances: trap grids with a health counter and random CMDPs."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, asdict

import numpy as np

from .cmdp import TabularCMDP
from .critic import TransitionBatch

# up, right, down, left as (dx, dy)
MOVES = ((0, 1), (1, 0), (0, -1), (-1, 0))


class UnreachableGoalError(ValueError):
    pass


@dataclass(frozen=True)
class TrapGridSpec:
    """Grid world where trap cells drain a health counter.

    Cells are ``(x, y)`` with ``0 <= x < width`` and ``0 <= y < height``.
    Every step that ends inside a trap costs one unit of health; reaching
    zero health is a catastrophic failure.
    """

    width: int = 8
    height: int = 8
    start: tuple = (0, 0)
    goal: tuple = (7, 7)
    traps: tuple = ()
    health_max: int = 25
    step_reward: float = -0.01
    goal_reward: float = 1.0
    slip_prob: float = 0.1
    chi: float = 0.05
    gamma: float = 0.99

    def __post_init__(self):
        traps = tuple(sorted({(int(x), int(y)) for x, y in self.traps}))
        object.__setattr__(self, "traps", traps)
        object.__setattr__(self, "start", tuple(int(v) for v in self.start))
        object.__setattr__(self, "goal", tuple(int(v) for v in self.goal))
        if self.width < 1 or self.height < 1:
            raise ValueError("grid must be at least 1x1")
        for name, cell in (("start", self.start), ("goal", self.goal), *(("trap", t) for t in traps)):
            if not (0 <= cell[0] < self.width and 0 <= cell[1] < self.height):
                raise ValueError(f"{name} cell {cell} lies outside the grid")
        if self.goal in traps:
            raise ValueError("goal cell cannot be a trap")
        if self.start in traps or self.start == self.goal:
            raise ValueError("start must be a free, non-goal cell")
        if self.health_max < 1:
            raise ValueError("health_max must be >= 1")
        if not 0.0 <= self.slip_prob <= 0.5:
            raise ValueError("slip_prob must lie in [0, 0.5]")

    def to_dict(self):
        d = asdict(self)
        d["traps"] = [list(t) for t in self.traps]
        d["start"] = list(self.start)
        d["goal"] = list(self.goal)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["traps"] = tuple(tuple(t) for t in d.get("traps", ()))
        for key in ("start", "goal"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def default_trap_grid_spec(**overrides):
    """The 8x8 benchmark layout used by the experiment harness.

    A one-cell-thick trap wall at ``x = 4`` covers rows 0-5 between the
    start (bottom-left) and the goal (bottom-right).  Crossing it costs one
    unit of health, so with ``health_max=2`` a straight crossing survives
    unless a slip lands on a second trap cell; the trap-free detour over
    the top of the wall is 12 steps longer.
    """
    params = dict(
        width=8,
        height=8,
        start=(0, 0),
        goal=(7, 0),
        traps=tuple((4, y) for y in range(6)),
        health_max=2,
        slip_prob=0.1,
        chi=0.05,
        gamma=0.99,
    )
    params.update(overrides)
    return TrapGridSpec(**params)


@dataclass(frozen=True)
class GridLayout:
    """Index map between grid cells / health levels and MDP states."""

    spec: TrapGridSpec
    cells: tuple = field(init=False)
    failure: int = field(init=False)
    goal: int = field(init=False)

    def __post_init__(self):
        cells = tuple(
            (x, y)
            for y in range(self.spec.height)
            for x in range(self.spec.width)
            if (x, y) != self.spec.goal
        )
        object.__setattr__(self, "cells", cells)
        n = len(cells) * self.spec.health_max
        object.__setattr__(self, "failure", n)
        object.__setattr__(self, "goal", n + 1)

    @property
    def n_states(self):
        return self.goal + 1

    def index(self, cell, health):
        return self.cells.index(tuple(cell)) * self.spec.health_max + (health - 1)

    def decode(self, state):
        if state == self.failure:
            return "failure"
        if state == self.goal:
            return "goal"
        cell = self.cells[state // self.spec.health_max]
        return cell, state % self.spec.health_max + 1


def _move(spec, cell, direction):
    dx, dy = MOVES[direction]
    x, y = cell[0] + dx, cell[1] + dy
    if 0 <= x < spec.width and 0 <= y < spec.height:
        return (x, y)
    return cell


def _build(spec, graded):
    layout = GridLayout(spec)
    n_s, n_a = layout.n_states, len(MOVES)
    H = spec.health_max
    traps = set(spec.traps)
    P = np.zeros((n_s, n_a, n_s))
    R = np.zeros((n_s, n_a))
    C = np.zeros(n_s)
    for ci, cell in enumerate(layout.cells):
        for h in range(1, H + 1):
            s = ci * H + (h - 1)
            for a in range(n_a):
                outcomes = [(a, 1.0 - spec.slip_prob)]
                if spec.slip_prob > 0:
                    outcomes += [((a + 1) % 4, spec.slip_prob / 2), ((a + 3) % 4, spec.slip_prob / 2)]
                reward = spec.step_reward
                for direction, p in outcomes:
                    nxt = _move(spec, cell, direction)
                    if nxt == spec.goal:
                        t = layout.goal
                        reward += p * spec.goal_reward
                    elif nxt in traps:
                        t = layout.failure if h == 1 else layout.index(nxt, h - 1)
                    else:
                        t = layout.index(nxt, h)
                    P[s, a, t] += p
                R[s, a] = reward
            # (trap, H) is unreachable: entering a trap always costs health
            if graded and cell in traps and h < H:
                C[s] = 1.0 / H
    for t in (layout.failure, layout.goal):
        P[t, :, t] = 1.0
    C[layout.failure] = 1.0 / H if graded else 1.0
    mu = np.zeros(n_s)
    mu[layout.index(spec.start, H)] = 1.0
    mdp = TabularCMDP(
        transition=P,
        reward=R,
        constraint=C,
        gamma=spec.gamma,
        mu=mu,
        chi=spec.chi,
        terminal_failure=frozenset({layout.failure}),
        terminal_goal=frozenset({layout.goal}),
    )
    if not reachable_states(mdp)[layout.goal]:
        raise UnreachableGoalError("goal is unreachable from the start state")
    return mdp


def build_trap_grid(spec):
    """Trap grid with a binary failure signal (C = 1 only on the failure state)."""
    return _build(spec, graded=False)


def build_continuous_signal_grid(spec):
    """Trap grid whose signal is ``1/health_max`` for every step spent in a trap.

    The failure state carries the last ``1/health_max`` installment, so the
    signal summed over any episode is at most 1 and equals 1 exactly on
    failure.  With ``health_max == 1`` this is the binary grid.
    """
    return _build(spec, graded=True)


def grid_layout(spec):
    return GridLayout(spec)


def reachable_states(mdp):
    """States reachable from the support of ``mu`` under some action sequence."""
    adj = mdp.transition.sum(axis=1) > 0
    seen = mdp.mu > 0
    queue = deque(np.flatnonzero(seen))
    while queue:
        s = queue.popleft()
        for t in np.flatnonzero(adj[s] & ~seen):
            seen[t] = True
            queue.append(t)
    return seen


def _cell_distance(spec, allow_traps):
    dist = {spec.start: 0}
    queue = deque([spec.start])
    traps = set(spec.traps)
    while queue:
        cell = queue.popleft()
        if cell == spec.goal:
            return dist[cell]
        for d in range(4):
            nxt = _move(spec, cell, d)
            if nxt in dist or (not allow_traps and nxt in traps):
                continue
            dist[nxt] = dist[cell] + 1
            queue.append(nxt)
    return None


def shortest_path_is_unsafe(spec):
    """True when every shortest start-goal route crosses a trap and a safe detour exists."""
    direct = _cell_distance(spec, allow_traps=True)
    safe = _cell_distance(spec, allow_traps=False)
    return direct is not None and safe is not None and direct < safe


@dataclass
class SeedDataset:
    """Offline transitions labelled with the ground-truth safety signal."""

    batch: TransitionBatch

    @property
    def count(self):
        return len(self.batch)


def generate_seed_dataset(mdp, n, rng):
    """Sample ``n`` transitions from a uniform behaviour policy over reachable states."""
    if n < 1:
        raise ValueError("seed dataset size must be >= 1")
    live = np.flatnonzero(reachable_states(mdp) & ~mdp.terminal_mask)
    s = live[rng.integers(live.size, size=n)]
    a = rng.integers(mdp.n_actions, size=n)
    cum = mdp.cumulative_transition[s, a]
    s_next = (cum < rng.random(n)[:, None]).sum(axis=1)
    return SeedDataset(
        TransitionBatch(
            s=s,
            a=a,
            s_next=s_next,
            r=mdp.reward[s, a],
            c=mdp.constraint[s_next],
            done=mdp.terminal_mask[s_next],
        )
    )


def random_cmdp(n_states, n_actions, rng, gamma=0.9, n_failure=0, n_goal=0, chi=0.05, branching=None):
    """Random CMDP with Dirichlet transitions and uniform rewards.

    The last ``n_failure + n_goal`` states are absorbing (failures first).
    ``mu`` is uniform over the remaining states.
    """
    n_term = n_failure + n_goal
    if n_states - n_term < 1:
        raise ValueError("need at least one non-terminal state")
    P = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states - n_term):
        for a in range(n_actions):
            if branching is None:
                P[s, a] = rng.dirichlet(np.ones(n_states))
            else:
                support = rng.choice(n_states, size=branching, replace=False)
                P[s, a, support] = rng.dirichlet(np.ones(branching))
    fail = list(range(n_states - n_term, n_states - n_goal))
    goal = list(range(n_states - n_goal, n_states))
    for t in fail + goal:
        P[t, :, t] = 1.0
    C = np.zeros(n_states)
    C[fail] = 1.0
    R = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    R[fail + goal] = 0.0
    mu = np.zeros(n_states)
    mu[: n_states - n_term] = 1.0 / (n_states - n_term)
    return TabularCMDP(
        transition=P,
        reward=R,
        constraint=C,
        gamma=gamma,
        mu=mu,
        chi=chi,
        terminal_failure=frozenset(fail),
        terminal_goal=frozenset(goal),
    )
