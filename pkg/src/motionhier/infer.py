"""Rollout engine.

Runs a trained PolicySet in the simulator under four querying modes:

- ``async``      step t acts on the motion inferred at step t-1 while
                 predicting the motion for step t+1 (step 0 bootstraps
                 with one synchronous motion query);
- ``fixed_freq`` the motion query runs every H steps and the result is
                 held in between;
- ``sync``       motion query then action query every step;
- ``oracle_z``   the conditioning motion comes from labeling the scripted
                 expert's action at the current state (ground-truth
                 condition).

Language-motion corrections arrive through an ordered queue and are
drained at step boundaries only, so a (seed, event log) pair replays a
trace bit-exactly.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataio
from .core import ActionVector, MotionHierError, Observation, TaskDescription, seeded_rng
from .labeler import LabelConfig, MotionParseError, label_action, parse_motion
from .model import PolicySet
from . import sim

MODES = ("async", "fixed_freq", "sync", "oracle_z")
TRACE_MAGIC = "MHTR"
TRACE_VERSION = 1


class RolloutError(MotionHierError):
    pass


@dataclass(frozen=True)
class RolloutConfig:
    mode: str = "async"
    H: int = 5
    max_steps: int = 120
    correction_source: str = "none"  # none | live | scripted
    label_config: LabelConfig | None = None  # required for oracle_z

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.H < 1:
            raise ValueError("H must be >= 1")
        if self.mode == "oracle_z" and self.label_config is None:
            raise ValueError("oracle_z mode requires a label_config (expert motion source)")

    def to_json(self):
        return {
            "mode": self.mode,
            "H": self.H,
            "max_steps": self.max_steps,
            "correction_source": self.correction_source,
        }


@dataclass(frozen=True)
class TraceStep:
    step_index: int
    obs: Observation
    z_used: str | int | None       # motion conditioning the action at this step
    z_predicted_next: str | int | None  # motion-head output emitted this step
    action: ActionVector
    corrected: bool
    stage: int


@dataclass
class RolloutTrace:
    task: TaskDescription
    config: RolloutConfig
    seed: int | None
    steps: list[TraceStep] = field(default_factory=list)
    success: bool = False
    final_stage: int = 0
    model_hash: str = ""
    events: list = field(default_factory=list)  # applied correction events

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def corrected_steps(self) -> list[TraceStep]:
        return [s for s in self.steps if s.corrected]


class CorrectionQueue:
    """Thread-safe ordered event queue; the rollout loop drains it at each
    step boundary.  Events are dicts or CorrectionEvent-likes with
    ``step_index``, ``motion`` (canonical string; ignored for resume) and
    ``kind`` in {intervene, update, resume}."""

    def __init__(self):
        self._lock = threading.Lock()
        self._events = []

    def inject(self, ev) -> dict:
        """Validate and enqueue; returns an acknowledgement dict."""
        kind = getattr(ev, "kind", None) or ev.get("kind")
        if kind not in ("intervene", "update", "resume"):
            return {"ok": False, "error": f"unknown event kind {kind!r}"}
        if kind != "resume":
            motion = getattr(ev, "motion", None)
            if motion is None and isinstance(ev, dict):
                motion = ev.get("motion")
            text = motion.canonical if hasattr(motion, "canonical") else motion
            try:
                parse_motion(text)
            except MotionParseError as e:
                return {"ok": False, "error": str(e), "suggestions": list(e.suggestions)}
        with self._lock:
            self._events.append(ev)
        return {"ok": True, "kind": kind}

    def drain(self) -> list:
        with self._lock:
            evs, self._events = self._events, []
        return evs


def inject_correction(queue: CorrectionQueue, ev) -> dict:
    return queue.inject(ev)


def _event_fields(ev):
    if isinstance(ev, dict):
        kind, motion, step_index = ev.get("kind"), ev.get("motion"), ev.get("step_index")
    else:
        kind, motion, step_index = ev.kind, ev.motion, ev.step_index
    if motion is not None and not hasattr(motion, "canonical"):
        motion = parse_motion(motion)
    return kind, motion, step_index


def _argmax_motion(p: PolicySet, obs: Observation, g: TaskDescription):
    probs = p.forward_h(obs, g) if p.variant != "joint" else p.forward_joint(obs, g)[0]
    i = int(np.argmax(probs))
    return i if p.variant == "cluster" else p.vocab.motions[i]


def _oracle_motion(p: PolicySet, task, world, stage, cfg: RolloutConfig):
    action, stage = sim.expert_policy(task, world, min_stage=stage)
    if p.variant == "cluster":
        return int(p.cluster.assign(action.to_array()[None, :])[0]), stage
    z = label_action(action, cfg.label_config)
    if p.variant == "onehot" and z.canonical not in p.vocab.motions:
        # Table variants cannot condition on unseen motions; substitute the
        # nearest vocabulary motion in the compositional feature space.
        from .model import nearest_vocab_motion

        return nearest_vocab_motion(p.vocab, z), stage
    return z.canonical, stage


def rollout(
    p: PolicySet,
    task: TaskDescription,
    world: sim.WorldState,
    cfg: RolloutConfig,
    events: CorrectionQueue | None = None,
    seed: int | None = None,
    on_step=None,
) -> RolloutTrace:
    """Run one episode.  ``events`` supplies live/scripted corrections;
    ``on_step(trace_step, world)`` is called after each step (used by the
    server to stream state).  The PolicySet is read-only throughout."""
    if p.binspec.bins != 256:
        raise RolloutError(f"model/codec mismatch: expected 256 bins, got {p.binspec.bins}")
    spec = sim.task_spec(task.task_id)
    trace = RolloutTrace(task=task, config=cfg, seed=seed, model_hash=p.config_hash())
    pending_z = None   # async: motion emitted at t-1, consumed at t
    held_z = None      # fixed_freq: last queried motion
    active_correction = None
    expert_stage = 0
    stage = 0
    for t in range(cfg.max_steps):
        obs = sim.observe(world, spec, t)
        if events is not None:
            for ev in events.drain():
                kind, motion, step_index = _event_fields(ev)
                if kind == "resume":
                    active_correction = None
                else:
                    active_correction = motion
                trace.events.append(
                    {"step_index": t, "kind": kind,
                     "motion": None if motion is None else motion.canonical}
                )
        # Motion prediction emitted this step (next-step motion under the
        # async training target); also serves as the sync-mode query.
        z_pred = None if p.variant == "flat" else _argmax_motion(p, obs, g=task)
        corrected = False
        if active_correction is not None:
            if p.variant == "cluster":
                raise RolloutError(
                    "language-motion corrections require a string-vocabulary variant"
                )
            z_used = active_correction.canonical
            corrected = True
        elif p.variant == "flat":
            z_used = None
        elif cfg.mode == "sync":
            z_used = z_pred
        elif cfg.mode == "async":
            z_used = pending_z if t > 0 else z_pred  # step-0 sync bootstrap
        elif cfg.mode == "fixed_freq":
            if t % cfg.H == 0:
                held_z = z_pred
            z_used = held_z
        else:  # oracle_z
            z_used, expert_stage = _oracle_motion(p, task, world, expert_stage, cfg)
        action = p.predict_action(obs, task, z_used if p.variant != "flat" else 0)
        pending_z = z_pred
        # Stage bookkeeping mirrors the expert's monotone scan.
        while stage < len(spec.stages) and spec.stages[stage].done(world):
            stage += 1
        ts = TraceStep(
            step_index=t,
            obs=obs,
            z_used=z_used,
            z_predicted_next=z_pred,
            action=action,
            corrected=corrected,
            stage=stage,
        )
        trace.steps.append(ts)
        world = sim.step(world, action)
        if on_step is not None:
            on_step(ts, world)
        if action.terminate or spec.success(world):
            break
    trace.success = bool(spec.success(world))
    while stage < len(spec.stages) and spec.stages[stage].done(world):
        stage += 1
    trace.final_stage = stage
    return trace


def run_episode(
    p: PolicySet,
    task_id: str,
    seed: int,
    cfg: RolloutConfig,
    events: CorrectionQueue | None = None,
    randomization: float = 1.0,
    on_step=None,
) -> RolloutTrace:
    """Seeded episode wrapper: the world is built from the seed, so the
    (seed, event log) pair in the returned trace suffices for replay."""
    task = sim.make_task(task_id)
    world = sim.reset(task, seeded_rng(seed), randomization)
    return rollout(p, task, world, cfg, events=events, seed=seed, on_step=on_step)


def replay_episode(p: PolicySet, trace: RolloutTrace) -> RolloutTrace:
    """Re-run a seeded trace, re-applying its recorded correction events at
    the recorded step boundaries."""
    if trace.seed is None:
        raise RolloutError("trace has no seed; cannot replay")
    by_step = {}
    for ev in trace.events:
        by_step.setdefault(ev["step_index"], []).append(ev)

    class _Replay(CorrectionQueue):
        def __init__(self, schedule):
            super().__init__()
            self.schedule = schedule
            self.t = 0

        def drain(self):
            evs = self.schedule.get(self.t, [])
            self.t += 1
            return evs

    return run_episode(p, trace.task.task_id, trace.seed, trace.config, events=_Replay(by_step))


# ---------------------------------------------------------------------------
# Trace persistence (append-only records; canonical JSON like dataio)


def _z_to_json(z):
    return z


def _step_to_json(s: TraceStep):
    return {
        "step_index": s.step_index,
        "obs": dataio._obs_to_json(s.obs),
        "z_used": _z_to_json(s.z_used),
        "z_predicted_next": _z_to_json(s.z_predicted_next),
        "action": dataio._action_to_json(s.action),
        "corrected": s.corrected,
        "stage": s.stage,
    }


def serialize_trace(trace: RolloutTrace) -> str:
    header = dataio._dumps(
        {
            "magic": TRACE_MAGIC,
            "version": TRACE_VERSION,
            "task": {
                "task_id": trace.task.task_id,
                "text": trace.task.text,
                "params": dict(sorted(trace.task.params.items())),
            },
            "config": trace.config.to_json(),
            "seed": trace.seed,
            "model_hash": trace.model_hash,
        }
    )
    lines = [header]
    lines.extend(dataio._dumps(_step_to_json(s)) for s in trace.steps)
    lines.append(
        dataio._dumps(
            {
                "outcome": {
                    "success": trace.success,
                    "final_stage": trace.final_stage,
                    "steps": len(trace.steps),
                },
                "events": trace.events,
            }
        )
    )
    return "\n".join(lines) + "\n"


def save_trace(trace: RolloutTrace, path) -> None:
    Path(path).write_text(serialize_trace(trace), encoding="utf-8")


def load_trace(path, label_config: LabelConfig | None = None) -> RolloutTrace:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise RolloutError(f"{path}: empty trace file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise RolloutError(f"{path}: bad trace header: {e}") from e
    if header.get("magic") != TRACE_MAGIC:
        raise RolloutError(f"{path}: bad magic {header.get('magic')!r}")
    if header.get("version") != TRACE_VERSION:
        raise RolloutError(
            f"{path}: version mismatch: found {header.get('version')}, "
            f"expected {TRACE_VERSION}"
        )
    cfg_json = header["config"]
    if cfg_json["mode"] == "oracle_z" and label_config is None:
        label_config = LabelConfig()
    cfg = RolloutConfig(
        mode=cfg_json["mode"],
        H=cfg_json["H"],
        max_steps=cfg_json["max_steps"],
        correction_source=cfg_json["correction_source"],
        label_config=label_config,
    )
    task = TaskDescription(
        task_id=header["task"]["task_id"],
        text=header["task"]["text"],
        params=dict(header["task"]["params"]),
    )
    trace = RolloutTrace(task=task, config=cfg, seed=header["seed"], model_hash=header["model_hash"])
    footer = json.loads(lines[-1])
    if "outcome" not in footer:
        raise RolloutError(f"{path}: truncated trace (no outcome record)")
    for line in lines[1:-1]:
        d = json.loads(line)
        trace.steps.append(
            TraceStep(
                step_index=d["step_index"],
                obs=dataio._obs_from_json(d["obs"]),
                z_used=d["z_used"],
                z_predicted_next=d["z_predicted_next"],
                action=dataio._action_from_json(d["action"]),
                corrected=d["corrected"],
                stage=d["stage"],
            )
        )
    trace.success = footer["outcome"]["success"]
    trace.final_stage = footer["outcome"]["final_stage"]
    trace.events = footer["events"]
    return trace
