"""Correction sessions.

A session wraps a rollout with an event source ("corrector") that can
intervene with language-motion corrections, is requeried every R steps
while intervening, and resumes the policy when satisfied.  The scripted
corrector automates this: it intervenes when the task stage stalls,
supplies the labeler's motion for the scripted expert's action, and
resumes once the stage advances.  Successful corrected episodes are
assembled into a correction dataset of motion-query training samples.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

from .core import ActionVector, MotionHierError, Observation, TaskDescription, seeded_rng
from .infer import CorrectionQueue, RolloutConfig, RolloutTrace, rollout, save_trace
from .labeler import LabelConfig, LanguageMotion, label_action, parse_motion
from .model import PolicySet
from . import sim


class CorrectionError(MotionHierError):
    pass


@dataclass(frozen=True)
class CorrectionEvent:
    step_index: int
    motion: LanguageMotion | None  # None for resume
    source: str = "human"          # human | scripted
    kind: str = "intervene"        # intervene | update | resume

    def __post_init__(self):
        if self.kind not in ("intervene", "update", "resume"):
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.kind != "resume" and self.motion is None:
            raise ValueError(f"{self.kind} event requires a motion")


@dataclass
class SessionConfig:
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    requery_period: int = 5   # R: corrector requeried every R steps while intervening
    stall_steps: int = 6      # S: scripted trigger fires after S steps without stage progress

    def __post_init__(self):
        if self.requery_period < 1:
            raise ValueError("requery_period must be >= 1")


class ScriptedCorrector:
    """Automated corrector: intervenes on stage stall with the labeler's
    motion for the expert's action, updates it at each requery, resumes
    once the stalled stage has been passed.  ``stall_steps=None`` (or a
    huge value) never intervenes."""

    def __init__(
        self,
        task: TaskDescription,
        label_config: LabelConfig | None = None,
        vocab=None,
    ):
        self.task = task
        self.label_config = label_config or LabelConfig()
        self.vocab = vocab  # when set, corrections snap to this vocabulary
        self._expert_stage = 0

    def expert_motion(self, world) -> LanguageMotion:
        action, self._expert_stage = sim.expert_policy(
            self.task, world, min_stage=self._expert_stage
        )
        z = label_action(action, self.label_config)
        if self.vocab is not None and z.canonical not in self.vocab.motions:
            from .model import nearest_vocab_motion

            z = parse_motion(nearest_vocab_motion(self.vocab, z))
        return z

    def intervene(self, world, stage: int) -> LanguageMotion:
        return self.expert_motion(world)

    def requery(self, world, stage: int, stalled_stage: int):
        """Returns ("resume", None) once the stall has cleared, else
        ("update", fresh motion)."""
        if stage > stalled_stage:
            return ("resume", None)
        return ("update", self.expert_motion(world))


class ResumingCorrector:
    """Never intervenes; a session with it equals a plain rollout."""

    def intervene(self, world, stage):
        return None

    def requery(self, world, stage, stalled_stage):
        return ("resume", None)


def run_session(
    p: PolicySet,
    task_id: str,
    seed: int,
    cfg: SessionConfig,
    corrector,
) -> tuple[RolloutTrace, list[CorrectionEvent]]:
    """One correction session.  The corrector is consulted after each step:
    while idle it may trigger an intervention (scripted trigger: stage
    stalled for S steps); while intervening it is requeried every R steps
    and answers update/keep/resume.  Events enter the rollout's ordered
    queue and apply at the next step boundary."""
    task = sim.make_task(task_id)
    world0 = sim.reset(task, seeded_rng(seed))
    queue = CorrectionQueue()
    events: list[CorrectionEvent] = []
    state = {
        "intervening": False,
        "stalled_stage": -1,
        "last_stage": -1,
        "stall": 0,
        "since_requery": 0,
    }

    def push(ev: CorrectionEvent):
        events.append(ev)
        queue.inject(ev)

    def on_step(ts, world):
        stage = ts.stage
        if not state["intervening"]:
            if stage == state["last_stage"]:
                state["stall"] += 1
            else:
                state["stall"] = 0
            state["last_stage"] = stage
            if state["stall"] >= cfg.stall_steps:
                motion = corrector.intervene(world, stage)
                if motion is not None:
                    state.update(intervening=True, stalled_stage=stage, since_requery=0)
                    push(CorrectionEvent(ts.step_index + 1, motion, "scripted", "intervene"))
        else:
            state["since_requery"] += 1
            # Recompute the live stage (the trace stage lags one step).
            spec = sim.task_spec(task_id)
            live = max(stage, state["last_stage"])
            while live < len(spec.stages) and spec.stages[live].done(world):
                live += 1
            state["last_stage"] = live
            if state["since_requery"] >= cfg.requery_period:
                state["since_requery"] = 0
                verdict, motion = corrector.requery(world, live, state["stalled_stage"])
                if verdict == "resume":
                    state.update(intervening=False, stall=0)
                    push(CorrectionEvent(ts.step_index + 1, None, "scripted", "resume"))
                elif verdict == "update":
                    push(CorrectionEvent(ts.step_index + 1, motion, "scripted", "update"))
                # "keep": no event; the active correction persists

    trace = rollout(p, task, world0, cfg.rollout, events=queue, seed=seed, on_step=on_step)
    return trace, events


# ---------------------------------------------------------------------------
# Correction dataset assembly


@dataclass
class CorrectionDataset:
    """Success-filtered corrected episodes; corrected steps become
    motion-query samples (with the executed action retained for the
    optional intervene-action training mode)."""

    episodes: list[tuple[TaskDescription, RolloutTrace]] = field(default_factory=list)

    def __len__(self):
        return len(self.episodes)

    @property
    def n_corrected_steps(self) -> int:
        return sum(len(t.corrected_steps) for _, t in self.episodes)

    def motion_samples(
        self,
    ) -> list[tuple[Observation, TaskDescription, LanguageMotion, ActionVector]]:
        out = []
        for task, trace in self.episodes:
            for s in trace.corrected_steps:
                # Match the async training convention: the motion head at
                # obs_{t-1} should emit the motion executed at step t, so a
                # correction at step t supervises the preceding observation.
                prev = trace.steps[s.step_index - 1] if s.step_index > 0 else s
                out.append((prev.obs, task, parse_motion(s.z_used), s.action))
        return out


def build_correction_dataset(sessions) -> CorrectionDataset:
    """sessions: iterable of (task, trace) or traces.  Keeps only
    successful episodes that contain at least one corrected step."""
    ds = CorrectionDataset()
    total = 0
    for item in sessions:
        task, trace = item if isinstance(item, tuple) else (item.task, item)
        total += 1
        if trace.success and trace.corrected_steps:
            ds.episodes.append((task, trace))
    if total and not ds.episodes:
        warnings.warn("no successful corrected episodes; correction dataset is empty")
    return ds


def save_session(trace: RolloutTrace, events, path) -> None:
    """Persist a correction episode: the trace file plus an events sidecar."""
    save_trace(trace, path)
    sidecar = [
        {
            "step_index": e.step_index,
            "motion": None if e.motion is None else e.motion.canonical,
            "source": e.source,
            "kind": e.kind,
        }
        for e in events
    ]
    Path(str(path) + ".events.json").write_text(
        json.dumps(sidecar, sort_keys=True, separators=(",", ":")) + "\n",
        encoding="utf-8",
    )


# ---------------------------------------------------------------------------
# Fault injection (correction-learning experiments)


def inject_motion_fault(p: PolicySet, substring: str, penalty: float = 30.0) -> PolicySet:
    """Copy of ``p`` whose motion-head bias suppresses every vocabulary
    motion containing ``substring`` — a systematic high-level fault that
    leaves the action head untouched."""
    import numpy as np

    if p.variant == "flat":
        raise CorrectionError("flat variant has no motion head to fault")
    ids = [i for i, m in enumerate(p.vocab.motions) if substring in m]
    if not ids:
        raise CorrectionError(f"no vocabulary motion contains {substring!r}")
    params = {k: v.copy() for k, v in p.params.items()}
    params["bh"][np.array(ids)] -= penalty
    return PolicySet(
        variant=p.variant,
        vocab=p.vocab,
        binspec=p.binspec,
        task_ids=p.task_ids,
        seed=p.seed,
        cluster=p.cluster,
        params=params,
        meta={**p.meta, "fault": {"substring": substring, "penalty": penalty}},
        hidden=p.hidden,
        d_task=p.d_task,
        d_motion=p.d_motion,
    )
