import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grn import online as O
from grn.dsp import SignalLengthError
from grn.model import GRN, GrnConfig, ProtocolError

TINY = GrnConfig(n_groups=1)


def test_fuse_unit_vectors():
    p = np.eye(3)[[0, 0, 1, 1, 2]]
    fused, cmd = O.fuse_probabilities(p)
    np.testing.assert_allclose(fused, [0.4, 0.4, 0.2], atol=1e-15)
    assert cmd == 0


def test_fuse_identical_rows():
    row = np.array([0.2, 0.5, 0.3])
    fused, cmd = O.fuse_probabilities(np.tile(row, (5, 1)))
    np.testing.assert_allclose(fused, row, atol=1e-15)
    assert cmd == 1


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_fused_is_a_distribution(seed):
    p = np.random.default_rng(seed).dirichlet(np.ones(3), size=5)
    fused, cmd = O.fuse_probabilities(p)
    assert abs(fused.sum() - 1.0) <= 1e-9
    assert cmd == int(np.argmax(fused))


@pytest.fixture(scope="module")
def tiny_model():
    rng = np.random.default_rng(0)
    model = GRN(TINY, seed=1)
    x = rng.normal(size=(3, 5, 5, 750))
    model.freeze_statistics(x, [0, 1, 2])
    return model, model.prototypes(x, [0, 1, 2])


def test_fuse_command_matches_brute_force(tiny_model):
    model, protos = tiny_model
    samples = np.random.default_rng(1).normal(size=(5, 5, 1250))
    decision = O.fuse_command(O.Acquisition(samples), model, protos)
    rows = []
    for offset_s in (0.0, 0.5, 1.0, 1.5, 2.0):
        start = int(offset_s * 250)
        rows.append(model.predict(samples[None, :, :, start : start + 750], protos).probs[0])
    rows = np.array(rows)
    assert np.array_equal(decision.window_probs, rows)
    assert np.array_equal(decision.fused, (rows[0] + rows[1] + rows[2] + rows[3] + rows[4]) / 5)
    assert decision.cmd == int(np.argmax(decision.fused))
    assert np.max(np.abs(decision.window_probs.sum(axis=1) - 1)) <= 1e-9


def test_acquisition_length():
    with pytest.raises(SignalLengthError):
        O.Acquisition(np.zeros((25, 1249)))
    assert O.Acquisition(np.zeros((25, 1250))).samples.shape == (5, 5, 1250)


# -- state machine -------------------------------------------------------------


def run(*events):
    s = O.TaskState()
    for e in events:
        s = s.step(e)
    return s


def test_forward_sequence():
    assert run("upper-arm").state == O.REACHED
    assert run("upper-arm", "hand").state == O.GRASPED
    s = run("upper-arm", "hand", "forearm")
    assert s.success and s.terminal and not s.failed


def test_blink_restores_previous_state():
    s = run("upper-arm", "blink")
    assert s.state == O.INIT and not s.failed and s.history == ()


def test_blink_on_empty_history_is_noop():
    assert run("blink") == O.TaskState()


def test_nod_resets_with_failure():
    for prefix in ((), ("upper-arm",), ("upper-arm", "hand")):
        s = run(*prefix, "nod")
        assert s.state == O.INIT and s.failed and s.terminal


def test_wrong_move_needs_undo():
    s = run("hand")
    assert s.state == O.INIT and s.wrong_moves == 1
    assert run("hand", "upper-arm").state == O.INIT  # still blocked
    s = run("hand", "blink", "upper-arm")
    assert s.state == O.REACHED and s.wrong_moves == 0


def test_events_after_terminal_raise():
    with pytest.raises(ProtocolError):
        run("upper-arm", "hand", "forearm", "blink")
    with pytest.raises(ProtocolError):
        run("nod", "upper-arm")
    with pytest.raises(ProtocolError):
        run("kick")


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(["upper-arm", "forearm", "hand", "blink"]), max_size=30))
def test_history_depth_tracks_forward_moves(events):
    s = O.TaskState()
    forward = undone = 0
    for e in events:
        if s.terminal:
            break
        before = s
        s = s.step(e)
        if len(s.history) > len(before.history):
            forward += 1
        if e == "blink" and not before.wrong_moves and before.history:
            undone += 1
        assert s.wrong_moves >= 0
    assert len(s.history) == forward - undone


# -- sessions ------------------------------------------------------------------


def test_perfect_session_is_19_seconds():
    stats, records = O.run_session(O.perfect_script(10)["tasks"], O.oracle_decoder)
    assert stats.success_rate == 1.0
    assert stats.commands_mean == 3.0 and stats.commands_std == 0.0
    assert stats.time_mean_s == pytest.approx(19.0, abs=1e-12)
    assert stats.total_time_s == pytest.approx(190.0, abs=1e-9)
    assert all(r.commands >= 3 for r in records)


def test_all_wrong_then_nod_fails_every_task():
    steps = [{"command": "forearm"}] * 3 + [{"event": "nod"}]
    stats, records = O.run_session([{"steps": steps}] * 10)
    assert stats.success_rate == 0.0
    assert np.isnan(stats.commands_mean)
    assert stats.to_dict()["commands_mean"] is None
    assert all(r.commands == 3 and r.events == 1 for r in records)


def test_clock_is_sum_of_costs():
    timing = O.Timing(acquisition_s=4.0, actuation_s=1.0, blink_s=0.5, nod_s=2.0)
    steps = [{"command": "hand"}, {"event": "blink"}, {"command": "upper-arm"},
             {"command": "hand"}, {"command": "forearm"}]
    rec = O.run_task(steps, None, timing)
    assert rec.success and rec.commands == 4 and rec.events == 1
    assert rec.control_time_s == pytest.approx(4 * 5.0 + 0.5)
    clocks = [c for _, _, c in rec.trace]
    assert clocks == sorted(clocks)


def test_unfinished_script_is_a_failure():
    rec = O.run_task([{"command": "upper-arm"}], None)
    assert not rec.success


def test_recovered_task_counts_extra_commands():
    steps = [{"command": "upper-arm"}, {"command": "forearm"}, {"event": "blink"},
             {"command": "hand"}, {"command": "forearm"}]
    stats, _ = O.run_session([{"steps": steps}])
    assert stats.success_rate == 1.0 and stats.commands_mean == 4.0


def test_model_decoder(tiny_model):
    model, protos = tiny_model
    rng = np.random.default_rng(2)
    dec = O.ModelDecoder(model, protos, lambda step: O.Acquisition(rng.normal(size=(25, 1250))))
    out = dec({"intent": "hand"})
    assert out in O.SUBPARTS and len(dec.decisions) == 1


def test_load_script(tmp_path):
    path = tmp_path / "s.json"
    path.write_text(json.dumps(O.perfect_script(2)))
    assert len(O.load_script(path)["tasks"]) == 2
    path.write_text(json.dumps({"tasks": [{"nope": 1}]}))
    with pytest.raises(ValueError):
        O.load_script(path)
