"""Correction sessions: stall trigger, requery cadence, dataset assembly,
fault injection."""

import json

import numpy as np
import pytest

from motionhier.correction import (
    CorrectionDataset,
    CorrectionError,
    CorrectionEvent,
    ResumingCorrector,
    ScriptedCorrector,
    SessionConfig,
    build_correction_dataset,
    inject_motion_fault,
    run_session,
    save_session,
)
from motionhier.infer import RolloutConfig, load_trace, run_episode, serialize_trace
from motionhier.labeler import parse_motion
from motionhier.sim import make_task


def test_event_validation():
    with pytest.raises(ValueError):
        CorrectionEvent(0, None, kind="intervene")
    with pytest.raises(ValueError):
        CorrectionEvent(0, parse_motion("stop"), kind="undo")
    CorrectionEvent(0, None, kind="resume")


def test_session_config_validation():
    with pytest.raises(ValueError):
        SessionConfig(requery_period=0)


def test_noop_corrector_equals_plain_rollout(tiny_policy):
    cfg = SessionConfig(rollout=RolloutConfig(mode="async", max_steps=40))
    trace, events = run_session(tiny_policy, "pick", 5, cfg, ResumingCorrector())
    assert events == []
    plain = run_episode(tiny_policy, "pick", 5, cfg.rollout)
    assert serialize_trace(trace) == serialize_trace(plain)


def test_scripted_corrector_triggers_on_stall(tiny_policy, label_config):
    """The weak tiny policy stalls; the corrector must step in with
    parseable expert motions and the trace must mark corrected steps."""
    cfg = SessionConfig(
        rollout=RolloutConfig(mode="async", max_steps=60, correction_source="scripted"),
        requery_period=1,
        stall_steps=3,
    )
    corr = ScriptedCorrector(make_task("pick"), label_config, vocab=tiny_policy.vocab)
    trace, events = run_session(tiny_policy, "pick", 11, cfg, corr)
    assert events, "expected at least one intervention from a weak policy"
    assert events[0].kind == "intervene"
    assert events[0].source == "scripted"
    for e in events:
        if e.motion is not None:
            assert e.motion.canonical in tiny_policy.vocab.motions
    assert trace.corrected_steps
    # the first intervention applies the step after the stall trigger
    first = events[0].step_index
    assert any(s.step_index == first and s.corrected for s in trace.steps)


def test_requery_cadence(tiny_policy, label_config):
    """While intervening, the corrector is consulted every R steps: events
    after the first are spaced >= R apart."""
    for period in (1, 3):
        cfg = SessionConfig(
            rollout=RolloutConfig(mode="async", max_steps=60,
                                  correction_source="scripted"),
            requery_period=period,
            stall_steps=3,
        )
        corr = ScriptedCorrector(
            make_task("pick"), label_config, vocab=tiny_policy.vocab
        )
        _, events = run_session(tiny_policy, "pick", 11, cfg, corr)
        followups = [e for e in events if e.kind in ("update", "resume")]
        for a, b in zip(events, events[1:]):
            if a.kind != "resume" and b.kind in ("update", "resume"):
                assert b.step_index - a.step_index >= period
        if period == 1 and followups:
            assert any(b.step_index - a.step_index == 1
                       for a, b in zip(events, events[1:]))


def test_never_stalling_threshold_never_intervenes(tiny_policy, label_config):
    cfg = SessionConfig(
        rollout=RolloutConfig(mode="async", max_steps=40,
                              correction_source="scripted"),
        stall_steps=10**9,
    )
    corr = ScriptedCorrector(make_task("pick"), label_config, vocab=tiny_policy.vocab)
    trace, events = run_session(tiny_policy, "pick", 11, cfg, corr)
    assert events == []
    assert not trace.corrected_steps


def test_session_deterministic(tiny_policy, label_config):
    cfg = SessionConfig(
        rollout=RolloutConfig(mode="async", max_steps=50,
                              correction_source="scripted"),
        requery_period=1,
        stall_steps=3,
    )
    runs = [
        run_session(
            tiny_policy, "pick", 11, cfg,
            ScriptedCorrector(make_task("pick"), label_config,
                              vocab=tiny_policy.vocab),
        )
        for _ in range(2)
    ]
    assert serialize_trace(runs[0][0]) == serialize_trace(runs[1][0])
    assert runs[0][1] == runs[1][1]


# ---------------------------------------------------------------------------
# Dataset assembly


def test_build_correction_dataset_filters(tiny_policy, label_config):
    cfg = SessionConfig(
        rollout=RolloutConfig(mode="async", max_steps=60,
                              correction_source="scripted"),
        requery_period=1,
        stall_steps=3,
    )
    sessions = []
    for seed in range(6):
        corr = ScriptedCorrector(make_task("pick"), label_config,
                                 vocab=tiny_policy.vocab)
        trace, _ = run_session(tiny_policy, "pick", seed, cfg, corr)
        sessions.append((trace.task, trace))
    ds = build_correction_dataset(sessions)
    for _, trace in ds.episodes:
        assert trace.success and trace.corrected_steps
    if len(ds):
        samples = ds.motion_samples()
        assert len(samples) == ds.n_corrected_steps
        for obs, task, motion, action in samples:
            assert motion.canonical in tiny_policy.vocab.motions


def test_build_correction_dataset_warns_when_empty(tiny_policy):
    plain = run_episode(tiny_policy, "pick", 0,
                        RolloutConfig(mode="async", max_steps=10))
    with pytest.warns(UserWarning, match="no successful corrected"):
        ds = build_correction_dataset([plain])
    assert len(ds) == 0
    assert CorrectionDataset().n_corrected_steps == 0


def test_save_session_sidecar(tiny_policy, label_config, tmp_path):
    cfg = SessionConfig(
        rollout=RolloutConfig(mode="async", max_steps=60,
                              correction_source="scripted"),
        requery_period=1,
        stall_steps=3,
    )
    corr = ScriptedCorrector(make_task("pick"), label_config,
                             vocab=tiny_policy.vocab)
    trace, events = run_session(tiny_policy, "pick", 11, cfg, corr)
    path = tmp_path / "sess.mhtr"
    save_session(trace, events, path)
    back = load_trace(path)
    assert serialize_trace(back) == serialize_trace(trace)
    sidecar = json.loads((tmp_path / "sess.mhtr.events.json").read_text())
    assert len(sidecar) == len(events)
    assert sidecar[0]["kind"] == "intervene"


# ---------------------------------------------------------------------------
# Fault injection


def test_inject_motion_fault_suppresses_matches(tiny_policy):
    targets = [m for m in tiny_policy.vocab.motions if "up" in m]
    assert targets
    faulted = inject_motion_fault(tiny_policy, "up", penalty=1000.0)
    # original untouched
    assert not np.array_equal(faulted.params["bh"], tiny_policy.params["bh"])
    for k in tiny_policy.params:
        if k != "bh":
            assert np.array_equal(faulted.params[k], tiny_policy.params[k])
    # faulted argmax never lands on a suppressed motion
    trace = run_episode(faulted, "pick", 3, RolloutConfig(mode="async", max_steps=40))
    for s in trace.steps:
        assert "up" not in (s.z_predicted_next or "")


def test_inject_motion_fault_errors(tiny_policy, tiny_vocab, tiny_binspec):
    from motionhier.model import PolicySet
    from motionhier.sim import DEFAULT_SUITE

    flat = PolicySet("flat", tiny_vocab, tiny_binspec, DEFAULT_SUITE)
    with pytest.raises(CorrectionError):
        inject_motion_fault(flat, "up")
    with pytest.raises(CorrectionError):
        inject_motion_fault(tiny_policy, "no such substring anywhere")
