"""Trajectory container IO, synthetic play generator, batching."""

import numpy as np
import pytest

from causaltraj import data
from causaltraj.data import (
    CATEGORY_BALL,
    CATEGORY_TEAM_A,
    CATEGORY_TEAM_B,
    ForkingSet,
    TrajectorySet,
    classify_branch,
    epoch_batches,
    read_sidecar,
    read_trajectories,
    synth_forking_play,
    write_sidecar,
    write_trajectories,
)
from causaltraj.errors import DataError, TrajectoryFormatError


def small_set(rng, S=3, Tlen=6, N=4):
    pos = rng.uniform(0.0, 50.0, (S, Tlen, N, 2)).astype(np.float32)
    cats = np.array([0] + [1] * (N - 2) + [2], dtype=np.uint8)
    return TrajectorySet(pos, cats, 5.0)


class TestContainer:
    def test_round_trip_bitwise(self, tmp_path):
        ts = small_set(np.random.default_rng(0))
        p = tmp_path / "t.ctrj"
        write_trajectories(p, ts)
        back = read_trajectories(p)
        assert np.array_equal(back.positions, ts.positions)
        assert np.array_equal(back.categories, ts.categories)
        assert back.frame_rate == 5.0
        assert (back.count, back.frames, back.num_agents) == (3, 6, 4)

    def test_bad_magic_offset_zero(self, tmp_path):
        p = tmp_path / "bad.ctrj"
        p.write_bytes(b"XXXXX" + b"\x00" * 40)
        with pytest.raises(TrajectoryFormatError) as e:
            read_trajectories(p)
        assert e.value.offset == 0

    def test_truncation_reports_offset(self, tmp_path):
        ts = small_set(np.random.default_rng(1))
        p = tmp_path / "t.ctrj"
        write_trajectories(p, ts)
        raw = p.read_bytes()
        for cut in (6, 15, 20, len(raw) - 3):
            p.write_bytes(raw[:cut])
            with pytest.raises(TrajectoryFormatError) as e:
                read_trajectories(p)
            assert e.value.offset is not None, cut

    def test_trailing_bytes_rejected(self, tmp_path):
        ts = small_set(np.random.default_rng(2))
        p = tmp_path / "t.ctrj"
        write_trajectories(p, ts)
        p.write_bytes(p.read_bytes() + b"\x00\x00\x00\x00")
        with pytest.raises(TrajectoryFormatError):
            read_trajectories(p)

    def test_bad_category_byte_in_file(self, tmp_path):
        ts = small_set(np.random.default_rng(3))
        p = tmp_path / "t.ctrj"
        write_trajectories(p, ts)
        raw = bytearray(p.read_bytes())
        raw[5 + 12] = 7                              # first category byte
        p.write_bytes(bytes(raw))
        with pytest.raises(TrajectoryFormatError):
            read_trajectories(p)

    def test_set_validation(self):
        rng = np.random.default_rng(4)
        with pytest.raises(DataError):
            TrajectorySet(rng.normal(size=(2, 3, 4)), np.zeros(4, np.uint8), 5.0)
        with pytest.raises(DataError):
            TrajectorySet(rng.normal(size=(2, 3, 4, 2)), np.zeros(3, np.uint8), 5.0)
        bad = rng.normal(size=(2, 3, 4, 2))
        bad[0, 0, 0, 0] = np.nan
        with pytest.raises(DataError):
            TrajectorySet(bad, np.zeros(4, np.uint8), 5.0)

    def test_agent_major_layout(self):
        ts = small_set(np.random.default_rng(5))
        am = ts.agent_major()
        assert am.shape == (3, 4, 6, 2)
        assert np.array_equal(am[1, 2, 3], ts.positions[1, 3, 2])

    def test_describe(self):
        ts = small_set(np.random.default_rng(6))
        d = ts.describe()
        assert d["categories"][0] == "ball"
        assert d["count"] == 3


class TestSidecar:
    def test_round_trip(self, tmp_path):
        p = tmp_path / "t.meta"
        write_sidecar(p, {"seed": 7, "kind": "synth", "note": "a=b"})
        back = read_sidecar(p)
        assert back == {"seed": "7", "kind": "synth", "note": "a=b"}

    def test_ignores_blank_and_junk_lines(self, tmp_path):
        p = tmp_path / "t.meta"
        p.write_text("a=1\n\nnot a pair\nb=2\n")
        assert read_sidecar(p) == {"a": "1", "b": "2"}


@pytest.fixture(scope="module")
def fs() -> ForkingSet:
    return synth_forking_play(64, frames=24, players=4, seed=7)


class TestSynthForkingPlay:
    def test_shapes_and_roster(self, fs):
        ts = fs.trajectories
        assert ts.positions.shape == (64, 24, 5, 2)
        assert ts.categories[0] == CATEGORY_BALL
        assert set(ts.categories[1:]) == {CATEGORY_TEAM_A, CATEGORY_TEAM_B}
        assert ts.frame_rate == 5.0
        assert fs.fork_frame == 12

    def test_deterministic_per_seed(self):
        a = synth_forking_play(8, seed=3)
        b = synth_forking_play(8, seed=3)
        c = synth_forking_play(8, seed=4)
        assert np.array_equal(a.trajectories.positions, b.trajectories.positions)
        assert np.array_equal(a.branch, b.branch)
        assert not np.array_equal(a.trajectories.positions, c.trajectories.positions)

    def test_stays_on_court(self, fs):
        pos = fs.trajectories.positions
        assert pos[..., 0].min() >= 0.0 and pos[..., 0].max() <= data.COURT_X
        assert pos[..., 1].min() >= 0.0 and pos[..., 1].max() <= data.COURT_Y

    def test_players_advance_in_x(self, fs):
        pos = fs.trajectories.positions
        dx = pos[:, -1, 1:, 0] - pos[:, 0, 1:, 0]
        assert (dx > 5.0).all()

    def test_branch_balance(self, fs):
        frac = fs.branch.mean()
        assert 0.3 < frac < 0.7

    def test_branch_matches_drift(self, fs):
        pos = fs.trajectories.positions
        hits = sum(
            classify_branch(pos[s], start_frame=fs.fork_frame) == fs.branch[s]
            for s in range(64)
        )
        assert hits == 64

    def test_context_hides_branch(self, fs):
        # before the fork the two groups of scenarios are statistically alike:
        # classifying from pre-fork drift should be near chance
        pos = fs.trajectories.positions
        pre = pos[:, : fs.fork_frame]
        guesses = np.array([classify_branch(pre[s]) for s in range(64)])
        agree = (guesses == fs.branch).mean()
        assert 0.25 < agree < 0.75

    def test_turn_rotates_post_fork_heading(self, fs):
        # post-ramp steps should run at about +/- turn_deg off the x axis
        pos = fs.trajectories.positions.astype(np.float64)
        steps = pos[:, 16:, 1:, :] - pos[:, 15:-1, 1:, :]
        ang = np.degrees(np.arctan2(steps[..., 1], steps[..., 0])).mean(axis=(1, 2))
        expect = np.where(fs.branch == 0, fs.turn_deg, -fs.turn_deg)
        assert np.abs(ang - expect).mean() < 8.0

    def test_ball_rides_carrier_and_passes_once(self):
        # with zero turn the play is clean enough to locate the pass window:
        # ball equals one player's track, then blends, then equals another's
        fs = synth_forking_play(6, frames=24, players=3, seed=11)
        pos = fs.trajectories.positions.astype(np.float64)
        for s in range(6):
            ball = pos[s, :, 0]
            players = pos[s, :, 1:]
            d = np.linalg.norm(players - ball[:, None], axis=-1)
            on_player = (d < 1e-4).any(axis=-1)
            changes = np.flatnonzero(on_player[1:] != on_player[:-1])
            assert on_player[0] and on_player[-1]
            assert len(changes) == 2              # leaves c0 once, lands on c1 once
            gap = changes[1] - changes[0]
            assert gap <= 5

    def test_pass_midpoint_between_carriers(self):
        fs = synth_forking_play(8, frames=24, players=4, seed=13)
        pos = fs.trajectories.positions.astype(np.float64)
        for s in range(8):
            ball = pos[s, :, 0]
            players = pos[s, :, 1:]
            d = np.linalg.norm(players - ball[:, None], axis=-1)
            carried = d.min(axis=-1) < 1e-4
            window = np.flatnonzero(~carried)
            if len(window) == 0:
                continue
            c0 = int(d[window[0] - 1].argmin())
            c1 = int(d[window[-1] + 1].argmin())
            mid = window[len(window) // 2]
            assert abs(d[mid, c0] - d[mid, c1]) < 1e-3

    def test_input_validation(self):
        with pytest.raises(DataError):
            synth_forking_play(4, players=1)
        with pytest.raises(DataError):
            synth_forking_play(4, frames=6)


class TestEpochBatches:
    def test_deterministic_and_epoch_varying(self):
        ts = small_set(np.random.default_rng(8), S=10)
        a = [b[0] for b in epoch_batches(ts, 3, seed=1, epoch=0)]
        b = [b[0] for b in epoch_batches(ts, 3, seed=1, epoch=0)]
        c = [b[0] for b in epoch_batches(ts, 3, seed=1, epoch=1)]
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert not all(np.array_equal(x, y) for x, y in zip(a, c))

    def test_covers_every_scenario_once(self):
        ts = small_set(np.random.default_rng(9), S=10)
        seen = np.concatenate(
            [pos for pos, _ in epoch_batches(ts, 4, seed=2, epoch=3)], axis=0
        )
        assert seen.shape[0] == 10
        want = np.sort(ts.agent_major(), axis=None)
        assert np.array_equal(np.sort(seen, axis=None), want)

    def test_batch_sizes(self):
        ts = small_set(np.random.default_rng(10), S=10)
        sizes = [pos.shape[0] for pos, _ in epoch_batches(ts, 4, seed=0, epoch=0)]
        assert sizes == [4, 4, 2]

    def test_layout_and_categories(self):
        ts = small_set(np.random.default_rng(11))
        pos, cats = next(epoch_batches(ts, 2, seed=0, epoch=0))
        assert pos.shape[1:] == (4, 6, 2)
        assert cats.dtype == np.int64
        assert np.array_equal(cats, ts.categories)

    def test_rejects_bad_batch_size(self):
        ts = small_set(np.random.default_rng(12))
        with pytest.raises(DataError):
            next(epoch_batches(ts, 0, seed=0, epoch=0))
