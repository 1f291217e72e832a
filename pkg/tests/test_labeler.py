"""Labeler: anchored examples, grammar round-trip, and a brute-force
reference implementation cross-checked on a large random action corpus."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from motionhier.core import ActionVector, N_DIMS, seeded_rng
from motionhier.labeler import (
    DIM_WORDS,
    GROUP_OF_DIM,
    LabelConfig,
    LanguageMotion,
    MotionParseError,
    label_action,
    label_dataset,
    motion_counts,
    parse_motion,
    render_motion,
    stop_motion,
    terminate_motion,
    vocabulary_report,
)

CFG = LabelConfig()  # default scales/thresholds


# ---------------------------------------------------------------------------
# Anchored examples


def _label(vals, cfg=CFG):
    return label_action(ActionVector.from_array(np.array(vals, float)), cfg)


def test_single_dominant_axis():
    a = [0.04, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
    assert _label(a).canonical == "move arm forward"


def test_negative_axis_words():
    a = [0.0, 0.0, -0.04, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
    assert _label(a).canonical == "move arm down"
    a = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -0.9]
    assert _label(a).canonical == "open gripper"


def test_two_terms_same_group_share_clause():
    a = [0.04, 0.0, 0.03, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
    assert _label(a).canonical == "move arm forward and up"


def test_two_groups_ordered_by_magnitude():
    # gripper (|0.9| normalized by 1.0) beats z (0.03/0.05 = 0.6)
    a = [0.0, 0.0, 0.03, 0.0, 0.0, 0.0, 0.0, 0.0, 0.9]
    assert _label(a).canonical == "close gripper and move arm up"
    # and the other way around when z dominates
    a = [0.0, 0.0, 0.05, 0.0, 0.0, 0.0, 0.0, 0.0, 0.55]
    assert _label(a).canonical == "move arm up and close gripper"


def test_rotation_words():
    a = [0.0, 0.0, 0.0, 0.0, 0.0, 0.15, 0.0, 0.0, 0.0]
    assert _label(a).canonical == "rotate arm clockwise"
    a = [0.0, 0.0, 0.0, -0.15, 0.0, 0.0, 0.0, 0.0, 0.0]
    assert _label(a).canonical == "rotate arm left"


def test_below_threshold_is_stop():
    a = [0.01, 0.01, 0.0, 0.05, 0.0, 0.0, 0.0, 0.0, 0.2]
    assert _label(a).canonical == "stop"
    assert _label([0.0] * N_DIMS).canonical == "stop"


def test_terminate_flag_wins():
    z = label_action(ActionVector.terminate_action(), CFG)
    assert z.canonical == "terminate"


def test_threshold_boundary_is_inclusive():
    # |a/scale| == threshold exactly -> the dim survives.
    a = [0.025, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]  # 0.025/0.05 = 0.5
    assert _label(a).canonical == "move arm forward"
    a = [np.nextafter(0.025, 0.0), 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
    assert _label(a).canonical == "stop"


def test_at_most_two_terms_per_group_and_two_groups():
    a = [0.05, 0.04, 0.03, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
    assert _label(a).canonical == "move arm forward and left"
    a = [0.05, 0.0, 0.0, 0.2, 0.0, 0.0, 0.0, 0.0, 0.9]
    # three surviving groups; only the strongest two are kept
    z = _label(a)
    groups = {GROUP_OF_DIM[d] for d in z.dims()}
    assert len(groups) == 2


def test_tie_breaks_on_axis_order():
    a = [0.04, -0.04, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
    assert _label(a).canonical == "move arm forward and right"


# ---------------------------------------------------------------------------
# Grammar round-trip


def test_parse_render_examples():
    for s in (
        "stop",
        "terminate",
        "move arm forward",
        "move arm up and backward",
        "close gripper and move arm down",
        "rotate arm clockwise and left",
        "move arm left and rotate arm up",
    ):
        assert render_motion(parse_motion(s)) == s


def test_parse_rejects_garbage():
    for s in ("", "move arm sideways", "arm forward", "move arm forward and and up",
              "close gripper and close gripper", "frobnicate"):
        with pytest.raises(MotionParseError):
            parse_motion(s)


def test_parse_rejects_noncanonical_order():
    # same terms, but re-rendering merges the repeated verb -> not canonical
    with pytest.raises(MotionParseError):
        parse_motion("move arm forward and move arm up")


def test_parse_suggestions_are_close():
    with pytest.raises(MotionParseError) as e:
        parse_motion("move arm forwrad")
    assert any("forward" in s for s in e.value.suggestions)


@st.composite
def motions(draw):
    """Random valid LanguageMotions respecting the term/group limits."""
    if draw(st.booleans()) and draw(st.integers(0, 9)) == 0:
        return draw(st.sampled_from([stop_motion(), terminate_motion()]))
    groups = draw(st.lists(
        st.sampled_from(["pos", "rot", "base", "grip"]),
        min_size=1, max_size=2, unique=True))
    group_dims = {"pos": (0, 1, 2), "rot": (3, 4, 5), "base": (6, 7), "grip": (8,)}
    terms = []
    for g in groups:
        dims = draw(st.lists(st.sampled_from(group_dims[g]),
                             min_size=1, max_size=2, unique=True))
        for d in dims:
            terms.append((d, draw(st.sampled_from([-1, 1]))))
    return LanguageMotion(terms=tuple(terms))


@given(motions())
def test_parse_is_inverse_of_render(z):
    assert parse_motion(render_motion(z)) == z


# ---------------------------------------------------------------------------
# Brute-force reference cross-check

GROUP_DIMS = {"pos": (0, 1, 2), "rot": (3, 4, 5), "base": (6, 7), "grip": (8,)}


def reference_label(vals, cfg):
    """Straight-line reimplementation of the labeling contract."""
    norm = [vals[d] / cfg.scales[d] for d in range(N_DIMS)]
    kept = {}
    for g, dims in GROUP_DIMS.items():
        survivors = [d for d in dims if abs(norm[d]) >= cfg.thresholds[g]]
        survivors = sorted(survivors, key=lambda d: (-abs(norm[d]), d))
        if survivors:
            kept[g] = survivors[: cfg.max_terms_per_group]
    if not kept:
        return "stop"
    order = sorted(
        kept, key=lambda g: (-max(abs(norm[d]) for d in kept[g]), min(kept[g]))
    )[: cfg.max_groups]
    terms = [(d, 1 if norm[d] > 0 else -1) for g in order for d in kept[g]]
    return render_motion(LanguageMotion(terms=tuple(terms)))


def test_reference_agreement_large_corpus():
    """10^5 random actions: labeler output must match the reference exactly."""
    rng = seeded_rng(7)
    n = 100_000
    scales = np.asarray(CFG.scales)
    # Mix of magnitudes so thresholds are exercised from both sides,
    # including exact zeros and values right at the cutoff.
    vals = rng.uniform(-2.0, 2.0, size=(n, N_DIMS)) * scales
    vals[rng.random((n, N_DIMS)) < 0.3] = 0.0
    boundary = rng.random((n, N_DIMS)) < 0.05
    vals[boundary] = (scales * 0.5 * np.sign(rng.standard_normal((n, N_DIMS))))[boundary]
    vals[:, 8] = np.clip(vals[:, 8], -1.0, 1.0)
    mismatches = 0
    for row in vals:
        got = label_action(ActionVector.from_array(row), CFG).canonical
        want = reference_label(row, CFG)
        if got != want:
            mismatches += 1
            if mismatches <= 3:
                print("mismatch", row, got, want)
    assert mismatches == 0


def test_reference_agreement_dataset_scales(tiny_dataset, label_config):
    rng = seeded_rng(11)
    scales = np.asarray(label_config.scales)
    vals = rng.uniform(-2.0, 2.0, size=(5_000, N_DIMS)) * scales
    vals[:, 8] = np.clip(vals[:, 8], -1.0, 1.0)
    for row in vals:
        assert (label_action(ActionVector.from_array(row), label_config).canonical
                == reference_label(row, label_config))


# ---------------------------------------------------------------------------
# Config + dataset labeling


def test_label_config_validation():
    with pytest.raises(ValueError):
        LabelConfig(scales=(1.0,) * 5)
    with pytest.raises(ValueError):
        LabelConfig(scales=(0.0,) + (1.0,) * 8)
    with pytest.raises(ValueError):
        LabelConfig(thresholds={"pos": -1.0, "rot": 0.5, "base": 0.5, "grip": 0.5})


def test_from_dataset_keeps_defaults_for_constant_dims(tiny_dataset):
    cfg = LabelConfig.from_dataset(tiny_dataset)
    actions = tiny_dataset.actions_array()
    std = actions.std(axis=0)
    for i in range(N_DIMS):
        assert cfg.scales[i] > 0
        if std[i] > 1e-12:
            assert cfg.scales[i] == pytest.approx(std[i])


def test_label_dataset_counts_and_structure(tiny_dataset, label_config):
    labeled, vocab = label_dataset(tiny_dataset, label_config)
    assert labeled.n_steps() == tiny_dataset.n_steps()
    assert sum(vocab.values()) == tiny_dataset.n_steps()
    assert motion_counts(labeled) == vocab
    for traj in labeled:
        for s in traj.steps:
            assert s.motion is not None
            # every label re-parses to itself
            assert parse_motion(s.motion.canonical) == s.motion


def test_vocabulary_report_is_sorted(tiny_labeled):
    report = vocabulary_report(motion_counts(tiny_labeled))
    lines = [l for l in report.splitlines()[2:] if l.strip()]
    counts = [int(l.rsplit(None, 1)[1]) for l in lines]
    assert counts == sorted(counts, reverse=True)
