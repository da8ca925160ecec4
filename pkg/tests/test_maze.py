from collections import deque

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bimpala import maze as mz


def _passage_count(m):
    return int(np.sum(~m.walls))


class TestGenerate:
    def test_deterministic(self):
        a, b = mz.generate_maze(42), mz.generate_maze(42)
        assert a == b
        assert not np.array_equal(a.walls, mz.generate_maze(43).walls)

    def test_borders_and_start(self):
        m = mz.generate_maze(3)
        assert m.walls[0].all() and m.walls[-1].all() and m.walls[:, 0].all() and m.walls[:, -1].all()
        assert m.mouse == (1, 1) and m.is_open(m.cheese)

    def test_fixed_cheese(self):
        for s in range(10):
            assert mz.generate_maze(s, (13, 13)).cheese == (13, 13)

    def test_even_cell_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            mz.generate_maze(0, (2, 13))

    @given(st.integers(0, 2**40))
    def test_perfect_maze_is_a_tree(self, seed):
        m = mz.generate_maze(seed)
        cells = set(m.open_cells())
        edges = sum(
            1 for (r, c) in cells for dr, dc in ((1, 0), (0, 1)) if (r + dr, c + dc) in cells
        )
        assert edges == len(cells) - 1  # connected (checked below) + |E| = |V| - 1
        assert np.all(mz.distances_to(m, m.mouse)[~m.walls] >= 0)
        # every lattice cell is a passage: 49 cells + 48 carved edges
        assert _passage_count(m) == 2 * 48 + 1


class TestObservation:
    def test_channels(self):
        m = mz.generate_maze(5)
        o = mz.render_observation(m)
        assert o.shape == (3, 16, 16)
        assert o[0].sum() >= 56 and o[1].sum() == 1 and o[2].sum() == 1
        assert o[0, 15].all() and o[0, :, 15].all()
        assert set(np.unique(o)) <= {0.0, 1.0}

    def test_cheese_removed_differs_in_one_entry(self):
        m = mz.generate_maze(5)
        diff = mz.render_observation(m) != mz.render_observation(m, with_cheese=False)
        assert diff.sum() == 1 and diff[2].sum() == 1


def _corridor(length):
    walls = np.ones((15, 15), dtype=bool)
    walls[1, 1 : 1 + length] = False
    return mz.Maze(walls=walls, mouse=(1, 1), cheese=(1, length))


class TestOracle:
    def test_right_when_adjacent(self):
        m = _corridor(2)
        assert mz.bfs_optimal_action(m) == mz.RIGHT

    def test_corridor_length_is_manhattan(self):
        m = _corridor(9)
        st_ = mz.reset(m)
        actions = []
        while not st_.done:
            a = mz.bfs_optimal_action(st_.maze)
            actions.append(a)
            st_, _ = mz.step(st_, a)
        assert len(actions) == 8 and st_.success

    @given(st.integers(0, 2**40))
    def test_distance_drops_by_one(self, seed):
        m = mz.generate_maze(seed)
        d = mz.distances_to(m, m.cheese)
        for cell in m.open_cells()[:20]:
            if cell == m.cheese:
                continue
            nxt = mz.move(m, cell, mz.bfs_optimal_action(m.with_mouse(cell)))
            assert d[nxt] == d[cell] - 1

    def test_tie_order(self):
        # open square: up and left both shorten the path, up wins
        walls = np.ones((15, 15), dtype=bool)
        walls[1:4, 1:4] = False
        m = mz.Maze(walls=walls, mouse=(3, 3), cheese=(1, 1))
        assert mz.bfs_optimal_action(m) == mz.UP

    def test_oracle_solves_minimally(self):
        for s in range(20):
            m = mz.generate_maze(s)
            d = mz.distances_to(m, m.cheese)[m.mouse]
            assert len(mz.optimal_path(m)) == d


class TestStep:
    def test_wall_bump_counts(self):
        m = mz.generate_maze(0)
        s0 = mz.reset(m)
        s1, r = mz.step(s0, mz.UP)  # row 0 is wall
        assert s1.maze.mouse == (1, 1) and s1.steps_taken == 1 and r == 0

    def test_reach_cheese(self):
        m = _corridor(2)
        s, r = mz.step(mz.reset(m), mz.RIGHT)
        assert s.done and r == 1.0 and s.return_so_far == 1.0

    def test_finished_episode_raises(self):
        s, _ = mz.step(mz.reset(_corridor(2)), mz.RIGHT)
        with pytest.raises(RuntimeError):
            mz.step(s, mz.LEFT)

    def test_random_policy_hits_cap(self):
        r = np.random.default_rng(0)
        for seed in range(100):
            s = mz.reset(mz.generate_maze(seed), step_cap=100)
            while not s.done:
                s, _ = mz.step(s, int(r.integers(4)))
            assert s.steps_taken <= 100
            assert s.return_so_far in (0.0, 1.0)


def test_fixture_roundtrip():
    m = mz.generate_maze(99)
    line = mz.to_fixture(m)
    assert mz.from_fixture(line) == m
    assert line.split()[0] == "99"


def test_training_states_are_labelled_by_oracle():
    obs, acts = mz.sample_training_states(11, 16, np.random.default_rng(0), path_fraction=0.5)
    m = mz.generate_maze(11)
    for o, a in zip(obs, acts):
        mouse = tuple(int(v) for v in np.argwhere(o[1] > 0)[0])
        assert a == mz.bfs_optimal_action(m.with_mouse(mouse))
