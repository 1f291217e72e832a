"""Supervised training for the policy variants.

Cross-entropy on both queries with a 50/50 batch mix, asynchronous
one-step-ahead motion targets, plain SGD with warmup-then-sqrt-decay,
finite-difference gradient verification, and intervention-weighted
retraining from language-motion corrections (correction samples seen
roughly 50x as often as demonstration samples).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .codec import tokenize_array
from .core import Dataset, MotionHierError, N_DIMS, seeded_rng
from .model import (
    MOTION_FEATURES,
    N_TOKENS,
    OBS_FEATURES,
    PolicySet,
    featurize_observation,
    motion_features,
)


class TrainError(MotionHierError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-2
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    warmup_steps: int = 100
    # relative draw weights for (motion, action, correction-motion) batches
    query_mix: tuple[float, float, float] = (1.0, 1.0, 0.0)
    async_targets: bool = True
    correction_upweight: float = 50.0
    intervene_action: bool = False  # also train the action query on corrections

    def __post_init__(self):
        if any(w < 0 for w in self.query_mix) or sum(self.query_mix) <= 0:
            raise ValueError("query mix weights must be nonnegative with positive sum")

    def lr_at(self, step: int) -> float:
        """Linear warmup to ``lr`` then square-root decay."""
        t = max(step, 1)
        w = max(self.warmup_steps, 1)
        return self.lr * min(t / w, math.sqrt(w / t))


@dataclass
class SampleSet:
    """Flattened per-step training arrays for one dataset."""

    feats: np.ndarray        # (n, OBS_FEATURES)
    task_idx: np.ndarray     # (n,)
    motion_id: np.ndarray    # (n,) current-step motion id
    next_motion_id: np.ndarray  # (n,) successor motion id, -1 at episode end
    tokens: np.ndarray       # (n, 9)
    term: np.ndarray         # (n,) terminate flags as floats
    weight: np.ndarray = None  # (n,) per-sample weights (default 1)

    def __post_init__(self):
        if self.weight is None:
            self.weight = np.ones(len(self.feats))

    def __len__(self):
        return len(self.feats)

    def subset(self, idx) -> "SampleSet":
        return SampleSet(
            feats=self.feats[idx],
            task_idx=self.task_idx[idx],
            motion_id=self.motion_id[idx],
            next_motion_id=self.next_motion_id[idx],
            tokens=self.tokens[idx],
            term=self.term[idx],
            weight=self.weight[idx],
        )


def prepare_samples(d: Dataset, p: PolicySet) -> SampleSet:
    """Featurize a labeled dataset against a model's vocab/codec/tasks."""
    if not d.trajectories:
        raise TrainError("empty dataset")
    feats, task_idx, motion_id, next_id, actions, term = [], [], [], [], [], []
    for traj in d.trajectories:
        ti = p.task_index(traj.task)
        if p.variant == "cluster":
            acts = np.stack([s.action.to_array() for s in traj.steps])
            mids = p.cluster.assign(acts)
        else:
            for s in traj.steps:
                if s.motion is None:
                    raise TrainError("dataset is not labeled (step without motion)")
            mids = np.array(
                [p.vocab.index(s.motion.canonical) for s in traj.steps], dtype=np.int64
            )
        for t, s in enumerate(traj.steps):
            feats.append(featurize_observation(s.obs))
            task_idx.append(ti)
            motion_id.append(mids[t])
            next_id.append(mids[t + 1] if t + 1 < len(traj.steps) else -1)
            actions.append(s.action.to_array())
            term.append(1.0 if s.action.terminate else 0.0)
    return SampleSet(
        feats=np.stack(feats),
        task_idx=np.array(task_idx, dtype=np.int64),
        motion_id=np.array(motion_id, dtype=np.int64),
        next_motion_id=np.array(next_id, dtype=np.int64),
        tokens=tokenize_array(np.stack(actions), p.binspec),
        term=np.array(term),
    )


# ---------------------------------------------------------------------------
# Loss + analytic gradients (manual backprop through the small MLP)


def _loss_and_grads(p: PolicySet, batch: SampleSet, query: str):
    """Weighted mean loss and gradients for one query type.

    ``query`` is "motion" (CE over motion ids against next_motion_id) or
    "action" (per-dim token CE + terminate BCE, teacher-forced on
    motion_id).  Gradients are returned only for parameters the query
    touches; notably head_l (Wl/bl) never appears for motion queries.
    """
    P = p.params
    n = len(batch)
    w = batch.weight / batch.weight.sum()
    encoder_cond = p.variant in ("rt_h", "cluster", "onehot")

    # ---- forward
    E = P["task_emb"][batch.task_idx]
    parts = [batch.feats, E]
    if encoder_cond:
        slot = np.zeros((n, p.d_motion))
        if query == "action":
            slot = p._motion_embedding(batch.motion_id)
        parts.append(slot)
    x = np.concatenate(parts, axis=1)
    a1 = x @ P["W1"] + P["b1"]
    h1 = np.tanh(a1)
    a2 = h1 @ P["W2"] + P["b2"]
    h2 = np.tanh(a2)

    grads = {}
    if query == "motion":
        targets = batch.next_motion_id
        if (targets < 0).any():
            raise TrainError("motion batch contains samples without a target")
        logits = h2 @ P["Wh"] + P["bh"]
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = float(-(w * logp[np.arange(n), targets]).sum())
        dlogits = np.exp(logp)
        dlogits[np.arange(n), targets] -= 1.0
        dlogits *= w[:, None]
        grads["Wh"] = h2.T @ dlogits
        grads["bh"] = dlogits.sum(axis=0)
        dh2 = dlogits @ P["Wh"].T
    else:
        if p.variant == "joint":
            memb = p._motion_embedding(batch.motion_id)
            inp = np.concatenate([h2, memb], axis=1)
        else:
            inp = h2
        out = inp @ P["Wl"] + P["bl"]
        tok = out[:, : N_DIMS * N_TOKENS].reshape(n, N_DIMS, N_TOKENS)
        zt = tok - tok.max(axis=2, keepdims=True)
        logp = zt - np.log(np.exp(zt).sum(axis=2, keepdims=True))
        picked = np.take_along_axis(logp, batch.tokens[:, :, None], axis=2)[:, :, 0]
        term_logit = out[:, -1]
        term_p = 1.0 / (1.0 + np.exp(-term_logit))
        eps = 1e-12
        bce = -(
            batch.term * np.log(term_p + eps)
            + (1.0 - batch.term) * np.log(1.0 - term_p + eps)
        )
        loss = float((w * (-picked.sum(axis=1) + bce)).sum())
        dtok = np.exp(logp)
        np.put_along_axis(
            dtok,
            batch.tokens[:, :, None],
            np.take_along_axis(dtok, batch.tokens[:, :, None], axis=2) - 1.0,
            axis=2,
        )
        dtok *= w[:, None, None]
        dout = np.empty_like(out)
        dout[:, : N_DIMS * N_TOKENS] = dtok.reshape(n, -1)
        dout[:, -1] = (term_p - batch.term) * w
        grads["Wl"] = inp.T @ dout
        grads["bl"] = dout.sum(axis=0)
        dinp = dout @ P["Wl"].T
        if p.variant == "joint":
            dh2 = dinp[:, : p.hidden]
            dmemb = dinp[:, p.hidden :]
            _accumulate_motion_grads(p, batch.motion_id, dmemb, grads)
        else:
            dh2 = dinp

    # ---- shared encoder backward
    da2 = dh2 * (1.0 - h2 * h2)
    grads["W2"] = h1.T @ da2
    grads["b2"] = da2.sum(axis=0)
    dh1 = da2 @ P["W2"].T
    da1 = dh1 * (1.0 - h1 * h1)
    grads["W1"] = x.T @ da1
    grads["b1"] = da1.sum(axis=0)
    dx = da1 @ P["W1"].T
    dE = dx[:, OBS_FEATURES : OBS_FEATURES + p.d_task]
    gte = np.zeros_like(P["task_emb"])
    np.add.at(gte, batch.task_idx, dE)
    grads["task_emb"] = gte
    if encoder_cond and query == "action":
        dslot = dx[:, OBS_FEATURES + p.d_task :]
        _accumulate_motion_grads(p, batch.motion_id, dslot, grads)
    return loss, grads


def _accumulate_motion_grads(p, motion_ids, demb, grads):
    if p.variant in ("rt_h", "joint"):
        phi = p.motion_feature_matrix()[motion_ids]
        grads["Wm"] = grads.get("Wm", np.zeros_like(p.params["Wm"])) + phi.T @ demb
    else:
        g = grads.get("motion_table", np.zeros_like(p.params["motion_table"]))
        np.add.at(g, motion_ids, demb)
        grads["motion_table"] = g


def _sgd_step(p: PolicySet, grads: dict, lr: float) -> None:
    for k, g in grads.items():
        p.params[k] -= lr * g


# ---------------------------------------------------------------------------
# Training loops


def _motion_pool(samples: SampleSet, cfg: TrainConfig) -> np.ndarray:
    """Indices eligible as motion-query samples (async drops episode ends)."""
    if cfg.async_targets:
        return np.flatnonzero(samples.next_motion_id >= 0)
    # sync targets: predict the current motion
    return np.arange(len(samples))


def _motion_view(samples: SampleSet, cfg: TrainConfig) -> SampleSet:
    """When async targets are off, the target is the current motion."""
    if cfg.async_targets:
        return samples
    return SampleSet(
        feats=samples.feats,
        task_idx=samples.task_idx,
        motion_id=samples.motion_id,
        next_motion_id=samples.motion_id,
        tokens=samples.tokens,
        term=samples.term,
        weight=samples.weight,
    )


def train(p: PolicySet, d: Dataset, cfg: TrainConfig | None = None):
    """SGD over the 50/50 motion/action batch mix.  Returns (p, curves)
    where curves is a per-epoch list of {"motion": ..., "action": ...}
    mean losses.  Mutates and returns the same PolicySet."""
    cfg = cfg or TrainConfig()
    samples = prepare_samples(d, p)
    mview = _motion_view(samples, cfg)
    mpool = _motion_pool(samples, cfg)
    rng = seeded_rng(cfg.seed)
    n = len(samples)
    curves = []
    step = 0
    for epoch in range(cfg.epochs):
        plan = _epoch_plan(rng, n, len(mpool), cfg, p.variant)
        a_order = rng.permutation(n)
        m_order = mpool[rng.permutation(len(mpool))] if len(mpool) else mpool
        a_pos = m_pos = 0
        losses = {"motion": [], "action": []}
        for kind in plan:
            if kind == "action":
                idx = a_order[a_pos : a_pos + cfg.batch_size]
                a_pos += len(idx)
                loss, grads = _loss_and_grads(p, samples.subset(idx), "action")
            else:
                idx = m_order[m_pos : m_pos + cfg.batch_size]
                m_pos += len(idx)
                loss, grads = _loss_and_grads(p, mview.subset(idx), "motion")
            if not math.isfinite(loss):
                raise TrainError(
                    f"non-finite loss at epoch {epoch} step {step} ({kind} query)"
                )
            step += 1
            _sgd_step(p, grads, cfg.lr_at(step))
            losses[kind].append(loss)
        curves.append(
            {
                "epoch": epoch,
                "motion": float(np.mean(losses["motion"])) if losses["motion"] else 0.0,
                "action": float(np.mean(losses["action"])) if losses["action"] else 0.0,
            }
        )
    p.meta["trained"] = True
    p.meta["epochs"] = int(p.meta.get("epochs", 0)) + cfg.epochs
    return p, curves


def _epoch_plan(rng, n_action, n_motion, cfg: TrainConfig, variant: str):
    """Shuffled batch-kind sequence giving each query its epoch's worth of
    batches (equal rates when both pools are nonempty)."""
    n_ab = math.ceil(n_action / cfg.batch_size)
    n_mb = math.ceil(n_motion / cfg.batch_size) if variant != "flat" else 0
    plan = ["action"] * n_ab + ["motion"] * n_mb
    rng.shuffle(plan)
    return plan


# ---------------------------------------------------------------------------
# Gradient verification


def grad_check(
    p: PolicySet,
    batch: SampleSet,
    epsilon: float = 1e-5,
    max_coords_per_param: int = 30,
    seed: int = 0,
) -> float:
    """Max relative error between analytic gradients and central finite
    differences over sampled coordinates, across both query types."""
    rng = seeded_rng(seed)
    queries = ["action"] if p.variant == "flat" else ["motion", "action"]
    worst = 0.0
    for query in queries:
        b = batch
        if query == "motion":
            b = batch.subset(np.flatnonzero(batch.next_motion_id >= 0))
        _, grads = _loss_and_grads(p, b, query)
        for name, g in grads.items():
            flat = p.params[name].reshape(-1)
            gflat = g.reshape(-1)
            k = min(max_coords_per_param, flat.size)
            coords = rng.choice(flat.size, size=k, replace=False)
            for c in coords:
                orig = flat[c]
                flat[c] = orig + epsilon
                lo_hi = _loss_and_grads(p, b, query)[0]
                flat[c] = orig - epsilon
                lo_lo = _loss_and_grads(p, b, query)[0]
                flat[c] = orig
                fd = (lo_hi - lo_lo) / (2.0 * epsilon)
                denom = max(abs(fd) + abs(gflat[c]), 1e-6)
                worst = max(worst, abs(fd - gflat[c]) / denom)
    return worst


# ---------------------------------------------------------------------------
# Correction retraining


def train_from_corrections(
    p: PolicySet,
    demos: Dataset,
    corrections,
    cfg: TrainConfig | None = None,
    step_callback=None,
):
    """Co-train demo motion + demo action + correction motion queries, with
    each correction sample drawn ~``correction_upweight`` times as often as
    a demo sample.  In the default mode correction steps never feed the
    action query, so correction batches leave head_l untouched; set
    ``cfg.intervene_action`` to add correction action queries at equal
    rate.  ``step_callback(kind, is_correction, grads)`` is invoked after
    each optimizer step for instrumentation.  Returns (p, curves)."""
    import warnings

    cfg = cfg or TrainConfig(epochs=10)
    corr = corrections.motion_samples() if hasattr(corrections, "motion_samples") else corrections
    if not corr:
        warnings.warn("no correction samples; returning the model unchanged")
        return p, []
    demo = prepare_samples(demos, p)
    dview = _motion_view(demo, cfg)
    mpool = _motion_pool(demo, cfg)

    cs = _correction_samples(p, corr)
    # Per-sample draw weight such that each correction sample is seen
    # ~upweight times as often as each demo motion sample.
    per_corr = cfg.correction_upweight
    mixed_idx_demo = mpool
    probs = np.concatenate(
        [np.ones(len(mixed_idx_demo)), np.full(len(cs), per_corr)]
    )
    probs /= probs.sum()
    n_mixed = len(mixed_idx_demo) + len(cs)

    rng = seeded_rng(cfg.seed)
    curves = []
    step = 0
    for epoch in range(cfg.epochs):
        n_mb = math.ceil(n_mixed / cfg.batch_size)
        n_ab = math.ceil(len(demo) / cfg.batch_size)
        plan = ["motion"] * n_mb + ["action"] * n_ab
        rng.shuffle(plan)
        a_order = rng.permutation(len(demo))
        a_pos = 0
        losses = {"motion": [], "action": []}
        for kind in plan:
            if kind == "motion":
                draw = rng.choice(n_mixed, size=cfg.batch_size, p=probs)
                batch, is_corr = _mixed_motion_batch(dview, mixed_idx_demo, cs, draw)
                loss, grads = _loss_and_grads(p, batch, "motion")
            else:
                idx = a_order[a_pos : a_pos + cfg.batch_size]
                a_pos += len(idx)
                if cfg.intervene_action and len(cs.action_set):
                    batch = _concat_samples(
                        demo.subset(idx), _action_draw(cs, rng, len(idx))
                    )
                    is_corr = True
                else:
                    batch, is_corr = demo.subset(idx), False
                loss, grads = _loss_and_grads(p, batch, "action")
            if not math.isfinite(loss):
                raise TrainError(f"non-finite loss at epoch {epoch} ({kind} query)")
            step += 1
            _sgd_step(p, grads, cfg.lr_at(step))
            if step_callback is not None:
                step_callback(kind, is_corr, grads)
            losses[kind].append(loss)
        curves.append(
            {
                "epoch": epoch,
                "motion": float(np.mean(losses["motion"])),
                "action": float(np.mean(losses["action"])) if losses["action"] else 0.0,
            }
        )
    p.meta["correction_trained"] = True
    return p, curves


@dataclass
class _CorrSamples:
    feats: np.ndarray
    task_idx: np.ndarray
    motion_id: np.ndarray
    action_set: SampleSet | None = None

    def __len__(self):
        return len(self.feats)


def _correction_samples(p: PolicySet, corr) -> _CorrSamples:
    """corr: iterable of (Observation, TaskDescription, LanguageMotion[,
    ActionVector]) tuples."""
    feats, tis, mids = [], [], []
    act_feats, act_tis, act_mids, act_tok, act_term = [], [], [], [], []
    for item in corr:
        obs, task, motion = item[0], item[1], item[2]
        feats.append(featurize_observation(obs))
        tis.append(p.task_index(task))
        mid = p.motion_id(motion if p.variant == "cluster" else motion.canonical)
        mids.append(mid)
        if len(item) > 3 and item[3] is not None:
            act_feats.append(feats[-1])
            act_tis.append(tis[-1])
            act_mids.append(mid)
            act_tok.append(item[3].to_array())
            act_term.append(1.0 if item[3].terminate else 0.0)
    action_set = None
    if act_feats:
        action_set = SampleSet(
            feats=np.stack(act_feats),
            task_idx=np.array(act_tis, dtype=np.int64),
            motion_id=np.array(act_mids, dtype=np.int64),
            next_motion_id=np.full(len(act_feats), -1, dtype=np.int64),
            tokens=tokenize_array(np.stack(act_tok), p.binspec),
            term=np.array(act_term),
        )
    return _CorrSamples(
        feats=np.stack(feats),
        task_idx=np.array(tis, dtype=np.int64),
        motion_id=np.array(mids, dtype=np.int64),
        action_set=action_set,
    )


def _mixed_motion_batch(demo_view: SampleSet, demo_idx, cs: _CorrSamples, draw):
    """Assemble a motion batch from mixed demo/correction draws; the
    correction target is the corrected motion itself."""
    n_demo = len(demo_idx)
    from_demo = draw[draw < n_demo]
    from_corr = draw[draw >= n_demo] - n_demo
    parts_feats, parts_ti, parts_target = [], [], []
    if len(from_demo):
        sub = demo_view.subset(demo_idx[from_demo])
        parts_feats.append(sub.feats)
        parts_ti.append(sub.task_idx)
        parts_target.append(sub.next_motion_id)
    if len(from_corr):
        parts_feats.append(cs.feats[from_corr])
        parts_ti.append(cs.task_idx[from_corr])
        parts_target.append(cs.motion_id[from_corr])
    n = sum(len(f) for f in parts_feats)
    batch = SampleSet(
        feats=np.concatenate(parts_feats),
        task_idx=np.concatenate(parts_ti),
        motion_id=np.concatenate(parts_target),
        next_motion_id=np.concatenate(parts_target),
        tokens=np.zeros((n, N_DIMS), dtype=np.int64),
        term=np.zeros(n),
    )
    return batch, bool(len(from_corr))


def _action_draw(cs: _CorrSamples, rng, k: int) -> SampleSet:
    idx = rng.choice(len(cs.action_set), size=min(k, len(cs.action_set)))
    return cs.action_set.subset(idx)


def _concat_samples(a: SampleSet, b: SampleSet) -> SampleSet:
    return SampleSet(
        feats=np.concatenate([a.feats, b.feats]),
        task_idx=np.concatenate([a.task_idx, b.task_idx]),
        motion_id=np.concatenate([a.motion_id, b.motion_id]),
        next_motion_id=np.concatenate([a.next_motion_id, b.next_motion_id]),
        tokens=np.concatenate([a.tokens, b.tokens]),
        term=np.concatenate([a.term, b.term]),
        weight=np.concatenate([a.weight, b.weight]),
    )
