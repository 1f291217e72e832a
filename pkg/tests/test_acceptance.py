"""Acceptance suite: end-to-end checks over the default dataset and
full-size trained checkpoints, with tolerances stated inline.

The heavyweight artifacts (the 4-task x 200-episode labeled dataset and
six trained checkpoints) are built once per module; set
MOTIONHIER_TEST_CACHE to a directory to reuse them across pytest
invocations during development.
"""

import os
from pathlib import Path

import numpy as np
import pytest

from motionhier.codec import BinSpec, detokenize_array, fit_binspec, tokenize_array
from motionhier.core import ActionVector, N_DIMS, seeded_rng
from motionhier.correction import (
    ScriptedCorrector,
    SessionConfig,
    build_correction_dataset,
    inject_motion_fault,
    run_session,
)
from motionhier.dataio import load_dataset, save_dataset
from motionhier.evalharness import (
    contextuality_stats,
    eval_mse,
    eval_success,
    split_dataset,
    wilson_interval,
)
from motionhier.infer import (
    CorrectionQueue,
    RolloutConfig,
    load_trace,
    replay_episode,
    run_episode,
    save_trace,
    serialize_trace,
)
from motionhier.labeler import (
    LabelConfig,
    label_action,
    label_dataset,
    motion_counts,
    parse_motion,
    render_motion,
)
from motionhier.model import MotionVocab, PolicySet
from motionhier.service import RolloutServer
from motionhier.sim import DEFAULT_SUITE, generate_dataset, make_task
from motionhier.train import (
    TrainConfig,
    grad_check,
    prepare_samples,
    train,
    train_from_corrections,
)

from test_service import LineClient

TRAIN_CFG = dict(epochs=80, lr=0.15, warmup_steps=400, batch_size=64)


def _cache_dir():
    path = os.environ.get("MOTIONHIER_TEST_CACHE")
    if path:
        Path(path).mkdir(parents=True, exist_ok=True)
        return Path(path)
    return None


# ---------------------------------------------------------------------------
# Session artifacts


@pytest.fixture(scope="module")
def default_labeled():
    """The default dataset: 4 tasks x 200 episodes, noise 0.05, seed 0."""
    cache = _cache_dir()
    path = cache / "default_labeled.mhds" if cache else None
    if path and path.exists():
        return load_dataset(path)
    raw = generate_dataset(DEFAULT_SUITE, episodes_per_task=200, noise=0.05, seed=0)
    labeled, _ = label_dataset(raw, LabelConfig.from_dataset(raw))
    if path:
        save_dataset(labeled, path)
    return labeled


@pytest.fixture(scope="module")
def splits(default_labeled):
    return split_dataset(default_labeled, val_every=5)


@pytest.fixture(scope="module")
def models(default_labeled, splits):
    """rt_h and flat checkpoints for seeds 0..2, trained on the train
    split with a shared vocabulary/binspec."""
    train_d, _ = splits
    vocab = MotionVocab.from_counts(motion_counts(default_labeled))
    binspec = fit_binspec(train_d)
    cache = _cache_dir()
    out = {}
    for variant in ("rt_h", "flat"):
        for seed in (0, 1, 2):
            path = cache / f"acc_{variant}_s{seed}.npz" if cache else None
            if path and path.exists():
                out[(variant, seed)] = PolicySet.load(path)
                continue
            p = PolicySet(variant, vocab, binspec, DEFAULT_SUITE, seed=seed)
            p, _ = train(p, train_d, TrainConfig(seed=seed, **TRAIN_CFG))
            if path:
                p.save(path)
            out[(variant, seed)] = p
    return out


@pytest.fixture(scope="module")
def rt_h(models):
    return models[("rt_h", 0)]


@pytest.fixture(scope="module")
def big_labeled():
    """Larger dataset (4 tasks x 400 episodes) for the correction study: the
    base model must be competent enough that session interventions isolate
    the injected fault rather than pre-existing weaknesses."""
    cache = _cache_dir()
    path = cache / "big_labeled.mhds" if cache else None
    if path and path.exists():
        return load_dataset(path)
    raw = generate_dataset(DEFAULT_SUITE, episodes_per_task=400, noise=0.05, seed=0)
    labeled, _ = label_dataset(raw, LabelConfig.from_dataset(raw))
    if path:
        save_dataset(labeled, path)
    return labeled


@pytest.fixture(scope="module")
def rt_h_big(big_labeled):
    cache = _cache_dir()
    path = cache / "acc_rt_h_big_s0.npz" if cache else None
    if path and path.exists():
        return PolicySet.load(path)
    vocab = MotionVocab.from_counts(motion_counts(big_labeled))
    p = PolicySet("rt_h", vocab, fit_binspec(big_labeled), DEFAULT_SUITE, seed=0)
    p, _ = train(p, big_labeled, TrainConfig(seed=0, **TRAIN_CFG))
    if path:
        p.save(path)
    return p


# ---------------------------------------------------------------------------
# 1. Labeler: anchored examples + property suites (exact, no tolerance)


def test_labeler_anchored_examples():
    cfg = LabelConfig()
    # dominant +x translation with the gripper closing above threshold
    a = ActionVector(dpos=(0.05, 0.0, 0.0), dgrip=0.8)
    assert label_action(a, cfg).canonical == "move arm forward and close gripper"
    # zero action -> stop
    assert label_action(ActionVector(), cfg).canonical == "stop"
    # +z dominant, +y secondary, everything else below threshold
    a = ActionVector(dpos=(0.0, 0.03, 0.05))
    assert label_action(a, cfg).canonical == "move arm up and left"


def _random_actions(n, seed):
    rng = seeded_rng(seed)
    scales = np.asarray(LabelConfig().scales)
    vals = rng.uniform(-2.0, 2.0, size=(n, N_DIMS)) * scales
    vals[rng.random((n, N_DIMS)) < 0.25] = 0.0
    vals[:, 8] = np.clip(vals[:, 8], -1.0, 1.0)
    return vals


def test_labeler_property_suite_100k():
    """Over 10^5 random actions: sign symmetry, magnitude ordering, scale
    covariance, and grammar bijection, all exact."""
    cfg = LabelConfig()
    scales = np.asarray(cfg.scales)
    doubled = LabelConfig(scales=tuple(s * 2.0 for s in scales))
    for row in _random_actions(100_000, seed=13):
        z = label_action(ActionVector.from_array(row), cfg)
        # grammar bijection: parse inverts render
        assert parse_motion(render_motion(z)) == z
        # sign symmetry: negating the action flips every term's sign
        neg = label_action(ActionVector.from_array(-row), cfg)
        if z.special is None:
            assert neg.terms == tuple((d, -s) for d, s in z.terms)
        else:
            assert neg.special == z.special
        # magnitude ordering: the leading term is the overall dominant dim
        if z.special is None:
            mags = np.abs(row / scales)
            assert mags[z.terms[0][0]] == mags[[d for d, _ in z.terms]].max()
        # scale covariance: scaling the action and the scales together
        # leaves the label unchanged (skip rows where 2x would leave the
        # gripper's valid range)
        if abs(row[8]) <= 0.5:
            assert label_action(ActionVector.from_array(row * 2.0), doubled) == z


def test_labeler_vocabulary_size(default_labeled):
    """The default dataset yields >= 50 distinct motions."""
    assert len(motion_counts(default_labeled)) >= 50


# ---------------------------------------------------------------------------
# 2. Codec: round trip, idempotence, monotonicity, boundary tokens


def test_codec_acceptance_100k(default_labeled):
    b = fit_binspec(default_labeled)
    lo, hi = np.asarray(b.lo), np.asarray(b.hi)
    rng = seeded_rng(3)
    vals = rng.uniform(lo, hi, size=(100_000, N_DIMS))
    toks = tokenize_array(vals, b)
    back = detokenize_array(toks, b)
    width = (hi - lo) / b.bins
    # round trip within half a bin width per dim
    assert np.all(np.abs(back - vals) <= 0.5 * width + 1e-12)
    # idempotence: re-tokenizing the decoded values is the identity
    assert np.array_equal(tokenize_array(back, b), toks)
    # monotonicity along every dim, sweeping past both edges
    grid = np.zeros((4096, N_DIMS))
    for d in range(N_DIMS):
        grid[:, d] = np.linspace(lo[d] - 0.01, hi[d] + 0.01, 4096)
    assert np.all(np.diff(tokenize_array(grid, b), axis=0) >= 0)
    # exact boundary tokens on dyadic bounds: lo -> 0, hi -> 255, 0 -> 128
    dy = BinSpec(lo=(-1.0,) * N_DIMS, hi=(1.0,) * N_DIMS)
    edge = np.array([[-1.0] * N_DIMS, [1.0] * N_DIMS, [0.0] * N_DIMS])
    t = tokenize_array(edge, dy)
    assert np.all(t[0] == 0) and np.all(t[1] == 255) and np.all(t[2] == 128)


# ---------------------------------------------------------------------------
# 3. Gradients: analytic vs central differences, <= 1e-4, 3 seeds


def test_gradient_check_three_seeds(tiny_labeled, tiny_vocab, tiny_binspec):
    for seed in (0, 1, 2):
        p = PolicySet("rt_h", tiny_vocab, tiny_binspec, DEFAULT_SUITE,
                      seed=seed, hidden=12, d_task=4, d_motion=6)
        s = prepare_samples(tiny_labeled, p)
        batch = s.subset(seeded_rng(seed).choice(len(s), 24, replace=False))
        err = grad_check(p, batch, max_coords_per_param=12, seed=seed)
        assert err <= 1e-4, f"seed {seed}: max relative error {err}"


# ---------------------------------------------------------------------------
# 4. Validation MSE ordering: gt_z <= rt_h(e2e) <= flat over 3 seeds


def test_mse_ordering(models, splits):
    _, val_d = splits
    gt, e2e, flat = [], [], []
    for seed in (0, 1, 2):
        gt.append(eval_mse(models[("rt_h", seed)], val_d, "gt_z").mse)
        e2e.append(eval_mse(models[("rt_h", seed)], val_d, "e2e").mse)
        flat.append(eval_mse(models[("flat", seed)], val_d, "e2e").mse)
    print(f"\nMSE gt_z={gt}\nMSE rt_h(e2e)={e2e}\nMSE flat={flat}")
    assert np.mean(gt) <= np.mean(e2e) <= np.mean(flat)
    # each gap positive in at least 2 of 3 seeds, paired by seed
    assert sum(e > g for g, e in zip(gt, e2e)) >= 2
    assert sum(f > e for e, f in zip(e2e, flat)) >= 2


# ---------------------------------------------------------------------------
# 5. Oracle-motion ceiling: >= 90% per task and >= e2e, 50 paired seeds


def test_oracle_ceiling(rt_h, default_labeled):
    label_cfg = LabelConfig.from_dataset(default_labeled)
    oracle = eval_success(
        rt_h, DEFAULT_SUITE, trials_per_task=50,
        cfg=RolloutConfig(mode="oracle_z", max_steps=120, label_config=label_cfg),
        seed=0,
    )
    e2e = eval_success(
        rt_h, DEFAULT_SUITE, trials_per_task=50,
        cfg=RolloutConfig(mode="async", max_steps=120), seed=0,
    )
    for task_id in DEFAULT_SUITE:
        o, e = oracle.tasks[task_id], e2e.tasks[task_id]
        print(f"\n{task_id}: oracle {o.s}/{o.n} wilson={o.wilson}, e2e {e.s}/{e.n}")
        assert o.rate >= 0.90, f"{task_id}: oracle_z rate {o.rate} < 0.90"
        assert o.rate >= e.rate, f"{task_id}: oracle_z below e2e"


# ---------------------------------------------------------------------------
# 6. Correction learning: fault recovery >= +20pp, head_l untouched


def test_correction_learning_recovers_fault(rt_h_big, big_labeled):
    """Fault the motion head (suppress 'close gripper' motions), collect 30
    scripted correction episodes per task, retrain motion-query-only with
    the 50:1 upweighting, and require >= +20pp aggregate success across the
    affected tasks.  head_l must be bitwise unchanged by every
    correction-bearing (motion) batch."""
    train_d, _ = split_dataset(big_labeled, val_every=5)
    label_cfg = LabelConfig.from_dataset(big_labeled)
    faulted = inject_motion_fault(rt_h_big, "close gripper", penalty=10.0)

    scfg = SessionConfig(
        rollout=RolloutConfig(mode="async", max_steps=150,
                              correction_source="scripted"),
        requery_period=1,
        stall_steps=3,
    )
    sessions = []
    for ti, task_id in enumerate(DEFAULT_SUITE):
        for ep in range(30):
            corrector = ScriptedCorrector(make_task(task_id), label_cfg,
                                          vocab=faulted.vocab)
            trace, _ = run_session(faulted, task_id,
                                   7_000_000 + ti * 10_000 + ep, scfg, corrector)
            sessions.append((trace.task, trace))
    ds = build_correction_dataset(sessions)
    assert ds.n_corrected_steps > 0

    retrain_p = inject_motion_fault(rt_h_big, "close gripper", penalty=10.0)
    state = {
        "Wl": retrain_p.params["Wl"].copy(),
        "bl": retrain_p.params["bl"].copy(),
        "motion_steps": 0,
    }

    def cb(kind, is_corr, grads):
        if kind == "motion":
            state["motion_steps"] += 1
            assert "Wl" not in grads and "bl" not in grads
            assert np.array_equal(retrain_p.params["Wl"], state["Wl"])
            assert np.array_equal(retrain_p.params["bl"], state["bl"])
        else:
            state["Wl"] = retrain_p.params["Wl"].copy()
            state["bl"] = retrain_p.params["bl"].copy()

    retrained, _ = train_from_corrections(
        retrain_p, train_d, ds,
        TrainConfig(epochs=6, lr=0.08, warmup_steps=100, seed=0),
        step_callback=cb,
    )
    assert state["motion_steps"] > 0

    cfg = RolloutConfig(mode="async", max_steps=120)
    before = eval_success(faulted, DEFAULT_SUITE, trials_per_task=30,
                          cfg=cfg, seed=1)
    after = eval_success(retrained, DEFAULT_SUITE, trials_per_task=30,
                         cfg=cfg, seed=1)
    for task_id in DEFAULT_SUITE:
        b, a = before.tasks[task_id], after.tasks[task_id]
        print(f"\n{task_id}: faulted {b.s}/{b.n} wilson={b.wilson} -> "
              f"retrained {a.s}/{a.n} wilson={a.wilson}")
    gain = after.overall - before.overall
    print(f"aggregate: {before.overall:.3f} -> {after.overall:.3f} ({gain:+.3f})")
    assert gain >= 0.20, f"aggregate gain {gain:.3f} < 0.20"


# ---------------------------------------------------------------------------
# 7. Wilson intervals: exhaustive vs extended-precision closed form


def test_wilson_exhaustive_to_1000():
    """All 0 <= s <= n <= 1000 against an 80-bit long-double closed form at
    1e-9 absolute; s=0 pins the lower bound to 0 and s=n pins the upper
    bound to 1 (to float round-off)."""
    z = np.longdouble("1.96")
    for n in range(1, 1001):
        s = np.arange(n + 1, dtype=np.longdouble)
        nn = np.longdouble(n)
        phat = s / nn
        z2 = z * z
        denom = 1 + z2 / nn
        center = phat + z2 / (2 * nn)
        half = z * np.sqrt(phat * (1 - phat) / nn + z2 / (4 * nn * nn))
        want_lo = ((center - half) / denom).astype(float)
        want_hi = ((center + half) / denom).astype(float)
        got = np.array([wilson_interval(int(k), n) for k in range(n + 1)])
        assert np.max(np.abs(got[:, 0] - want_lo)) < 1e-9
        assert np.max(np.abs(got[:, 1] - want_hi)) < 1e-9
        assert abs(got[0, 0]) < 1e-12
        assert abs(got[n, 1] - 1.0) < 1e-12


# ---------------------------------------------------------------------------
# 8. Async contract + bit-exact replay on the full-size model


def test_async_contract_on_trained_model(rt_h):
    trace = run_episode(rt_h, "pick", 41, RolloutConfig(mode="async", max_steps=120))
    assert trace.steps[0].z_used == trace.steps[0].z_predicted_next
    for prev, cur in zip(trace.steps, trace.steps[1:]):
        assert cur.z_used == prev.z_predicted_next


def test_fixed_freq_h1_equals_sync_trained(rt_h):
    # identical step-for-step behavior; the trace headers differ only in
    # the recorded config, so compare the step content
    a = run_episode(rt_h, "pick", 41,
                    RolloutConfig(mode="fixed_freq", H=1, max_steps=120))
    b = run_episode(rt_h, "pick", 41, RolloutConfig(mode="sync", max_steps=120))
    assert a.success == b.success and a.final_stage == b.final_stage
    assert len(a.steps) == len(b.steps)
    for sa, sb in zip(a.steps, b.steps):
        assert sa.z_used == sb.z_used
        assert sa.z_predicted_next == sb.z_predicted_next
        assert sa.action == sb.action


def test_replay_bit_exact_offline(rt_h, tmp_path):
    q = CorrectionQueue()

    def on_step(ts, world):
        if ts.step_index == 5:
            q.inject({"kind": "intervene", "motion": "move arm down"})
        if ts.step_index == 9:
            q.inject({"kind": "resume"})

    cfg = RolloutConfig(mode="async", max_steps=60, correction_source="live")
    trace = run_episode(rt_h, "pick", 17, cfg, events=q, on_step=on_step)
    assert trace.corrected_steps
    path = tmp_path / "acc.mhtr"
    save_trace(trace, path)
    again = replay_episode(rt_h, load_trace(path))
    assert serialize_trace(again) == serialize_trace(trace)


def test_replay_bit_exact_through_server(rt_h, tmp_path):
    srv = RolloutServer(rt_h, tasks=DEFAULT_SUITE, trace_dir=tmp_path,
                        step_delay=0.0, max_steps=60).start()
    try:
        c = LineClient(srv.address)
        c.send(type="start", task="pick", seed=23)
        assert c.recv()["type"] == "hello"
        sent_corr = sent_resume = False
        while True:
            msg = c.recv()
            assert msg is not None
            if msg["type"] == "done":
                done = msg
                break
            if msg["type"] != "state":
                continue
            if msg["step"] == 4 and not sent_corr:
                sent_corr = True
                c.send(type="correction", motion="move arm up")
            if msg["corrected"] and not sent_resume:
                sent_resume = True
                c.send(type="resume")
        c.send(type="save")
        for _ in range(10):
            msg = c.recv()
            if msg["type"] == "ack" and msg["of"] == "save":
                path = msg["path"]
                break
        else:
            raise AssertionError("no save ack")
        c.close()
        trace = load_trace(path)
        assert trace.corrected_steps
        again = replay_episode(rt_h, trace)
        assert serialize_trace(again) == serialize_trace(trace)
        assert again.success == done["success"]
    finally:
        srv.stop()


# ---------------------------------------------------------------------------
# 9. Contextuality: dominant dim dominates, off-dims stay contextual


def test_contextuality_on_default_dataset(default_labeled):
    cfg = LabelConfig.from_dataset(default_labeled)
    scales = np.asarray(cfg.scales)
    table = contextuality_stats(default_labeled)
    assert table
    for motion, row in table.items():
        dom = row["dominant_dim"]
        mean = np.abs(np.array(row["mean"])) / scales
        std = np.array(row["std"])
        assert mean[dom] == max(mean), (
            f"{motion} (n={row['n']}): dominant dim {dom} lacks the largest "
            f"normalized mean magnitude"
        )
        assert any(std[d] > 0 for d in range(N_DIMS) if d != dom), (
            f"{motion} (n={row['n']}): no contextual variance off the "
            f"dominant dim"
        )
