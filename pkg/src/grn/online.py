"""Online decoding replay: window fusion, the drinking-task state machine, session stats."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .dsp import SignalLengthError, sliding_windows
from .model import GRN, ProtocolError

SUBPARTS = ("upper-arm", "forearm", "hand")

INIT, REACHED, GRASPED, DRINKING = "Init", "Reached", "Grasped", "Drinking"
# state -> (sub-part command that advances it, next state)
ADVANCE = {INIT: ("upper-arm", REACHED), REACHED: ("hand", GRASPED), GRASPED: ("forearm", DRINKING)}
BLINK, NOD = "blink", "nod"

FS = 250.0
ACQ_SAMPLES = 1250
N_WINDOWS = 5


@dataclass
class Acquisition:
    """Five seconds of preprocessed grid samples, ``(5, 5, 1250)``."""

    samples: np.ndarray
    intent: str | None = None

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim == 2 and x.shape[0] == 25:
            x = x.reshape(5, 5, -1)
        if x.shape[:2] != (5, 5):
            raise ValueError(f"acquisition must be 25 channels x time, got {x.shape}")
        if x.shape[-1] != ACQ_SAMPLES:
            raise SignalLengthError(f"acquisition must hold {ACQ_SAMPLES} samples (5 s), got {x.shape[-1]}")
        self.samples = x


@dataclass
class CommandDecision:
    window_probs: np.ndarray  # (5, K)
    fused: np.ndarray  # (K,)
    cmd: int
    duration_s: float = 0.0


def fuse_probabilities(window_probs) -> tuple[np.ndarray, int]:
    """Mean of the per-window class distributions and its argmax (ties to lowest id)."""
    p = np.asarray(window_probs, dtype=np.float64)
    fused = p.sum(axis=0) / p.shape[0]
    return fused, int(np.argmax(fused))


def fuse_command(acquisition, model: GRN, prototypes, duration_s=0.0) -> CommandDecision:
    """Decode the five 3 s windows (0.5 s stride) of one acquisition and fuse them."""
    samples = acquisition.samples if isinstance(acquisition, Acquisition) else np.asarray(acquisition)
    if samples.shape[-1] < ACQ_SAMPLES:
        raise SignalLengthError(f"acquisition shorter than 5 s: {samples.shape[-1]} samples")
    windows = sliding_windows(samples, fs=FS, window_s=3.0, stride_s=0.5, count=N_WINDOWS)
    # one predict per window keeps results independent of BLAS batch blocking
    probs = np.stack([model.predict(w[None], prototypes).probs[0] for w in windows])
    fused, cmd = fuse_probabilities(probs)
    return CommandDecision(probs, fused, cmd, duration_s)


# -- task state machine --------------------------------------------------------


@dataclass(frozen=True)
class TaskState:
    """Drinking-task progress.

    ``history`` holds the states left by forward moves (for blink restore);
    ``wrong_moves`` counts mis-decoded moves still to be undone.
    """

    state: str = INIT
    history: tuple[str, ...] = ()
    wrong_moves: int = 0
    failed: bool = False

    @property
    def success(self) -> bool:
        return self.state == DRINKING

    @property
    def terminal(self) -> bool:
        return self.success or self.failed

    def step(self, event: str) -> "TaskState":
        """Apply a sub-part command, ``"blink"`` (undo) or ``"nod"`` (reset, failure)."""
        if self.terminal:
            raise ProtocolError(f"task already finished ({'success' if self.success else 'failed'}); got {event!r}")
        if event == NOD:
            return TaskState(INIT, (), 0, True)
        if event == BLINK:
            if self.wrong_moves:
                return replace(self, wrong_moves=self.wrong_moves - 1)
            if not self.history:
                return self  # nothing to undo
            return replace(self, state=self.history[-1], history=self.history[:-1])
        if event not in SUBPARTS:
            raise ProtocolError(f"unknown command or event {event!r}")
        expected, nxt = ADVANCE[self.state]
        if event == expected and not self.wrong_moves:
            return replace(self, state=nxt, history=self.history + (self.state,))
        return replace(self, wrong_moves=self.wrong_moves + 1)


# -- sessions ------------------------------------------------------------------


@dataclass(frozen=True)
class Timing:
    """Simulated seconds per command cycle and per scripted event."""

    acquisition_s: float = 5.0
    actuation_s: float = 4.0 / 3.0
    blink_s: float = 4.0 / 3.0
    nod_s: float = 4.0 / 3.0

    @property
    def cycle_s(self) -> float:
        return self.acquisition_s + self.actuation_s


@dataclass
class TaskRecord:
    success: bool
    commands: int
    control_time_s: float
    events: int
    trace: list = field(default_factory=list)


@dataclass
class SessionStats:
    """Success rate over all tasks; commands and time over successful tasks."""

    n_tasks: int
    success_rate: float
    commands_mean: float
    commands_std: float
    time_mean_s: float
    time_std_s: float
    total_time_s: float

    def to_dict(self) -> dict:
        """Plain dict; undefined statistics (no successful task) become ``None``."""
        return {k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in asdict(self).items()}


def summarize(records: list[TaskRecord]) -> SessionStats:
    won = [r for r in records if r.success]
    cmds = np.array([r.commands for r in won], dtype=float)
    times = np.array([r.control_time_s for r in won], dtype=float)
    nan = float("nan")
    return SessionStats(
        n_tasks=len(records),
        success_rate=len(won) / len(records) if records else nan,
        commands_mean=float(cmds.mean()) if len(won) else nan,
        commands_std=float(cmds.std()) if len(won) else nan,
        time_mean_s=float(times.mean()) if len(won) else nan,
        time_std_s=float(times.std()) if len(won) else nan,
        total_time_s=float(sum(r.control_time_s for r in records)),
    )


def run_task(steps, decoder, timing: Timing = Timing()) -> TaskRecord:
    """Play one task script until success, failure or the end of the script.

    Steps are dicts: ``{"event": "blink" | "nod"}``, ``{"command": sub-part}``
    (already decided), or anything else, which ``decoder(step)`` turns into a
    sub-part name. A script that runs out counts as a failure.
    """
    state = TaskState()
    clock = 0.0
    commands = events = 0
    trace = []
    for step in steps:
        if state.terminal:
            break
        if "event" in step:
            event = step["event"]
            if event not in (BLINK, NOD):
                raise ProtocolError(f"unknown event {event!r}")
            clock += timing.blink_s if event == BLINK else timing.nod_s
            events += 1
        else:
            event = step["command"] if "command" in step else decoder(step)
            clock += timing.cycle_s
            commands += 1
        state = state.step(event)
        trace.append((event, state.state, clock))
    return TaskRecord(state.success, commands, clock, events, trace)


def run_session(tasks, decoder=None, timing: Timing = Timing()) -> tuple[SessionStats, list[TaskRecord]]:
    records = [run_task(t["steps"] if isinstance(t, dict) else t, decoder, timing) for t in tasks]
    return summarize(records), records


def oracle_decoder(step) -> str:
    """Perfect decoding: the acquisition's ground-truth intent."""
    return step["intent"]


class ModelDecoder:
    """Decodes acquisition steps with a trained model via window fusion.

    ``source(step)`` must return an :class:`Acquisition`.
    """

    def __init__(self, model: GRN, prototypes, source, subparts=SUBPARTS):
        self.model = model
        self.prototypes = prototypes
        self.source = source
        self.subparts = tuple(subparts)
        self.decisions: list[CommandDecision] = []

    def __call__(self, step) -> str:
        decision = fuse_command(self.source(step), self.model, self.prototypes)
        self.decisions.append(decision)
        return self.subparts[decision.cmd]


def load_script(path) -> dict:
    """Session script: ``{"tasks": [{"steps": [...]}, ...], "timing": {...}}``."""
    script = json.loads(Path(path).read_text())
    if not isinstance(script.get("tasks"), list):
        raise ValueError(f"{path}: session script needs a 'tasks' list")
    for i, task in enumerate(script["tasks"]):
        if not isinstance(task, dict) or not isinstance(task.get("steps"), list):
            raise ValueError(f"{path}: task {i} needs a 'steps' list")
    return script


def perfect_script(n_tasks=10) -> dict:
    """Every task decoded right first time: reach, grasp, twist."""
    steps = [{"intent": part} for part in ("upper-arm", "hand", "forearm")]
    return {"tasks": [{"steps": list(steps)} for _ in range(n_tasks)]}
