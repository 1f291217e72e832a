"""Metrics and experiment drivers.

Validation action MSE under e2e / ground-truth-motion conditioning,
rollout success rates with Wilson 95% intervals and per-stage cumulative
counts, per-motion contextuality statistics, and the variant-grid
experiment driver (text + CSV reports).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .codec import detokenize_array
from .core import Dataset, MotionHierError
from .infer import RolloutConfig, run_episode
from .model import PolicySet
from .train import TrainConfig, prepare_samples
from . import sim


class EvalError(MotionHierError):
    pass


# ---------------------------------------------------------------------------
# Wilson score interval


def wilson_interval(s: int, n: int, z: float = 1.96) -> tuple[float, float]:
    """Closed-form Wilson score interval for s successes in n trials."""
    if n < 1:
        raise EvalError("wilson_interval requires n >= 1")
    if not 0 <= s <= n:
        raise EvalError(f"need 0 <= s <= n, got s={s}, n={n}")
    phat = s / n
    z2 = z * z
    denom = 1.0 + z2 / n
    center = phat + z2 / (2.0 * n)
    half = z * math.sqrt(phat * (1.0 - phat) / n + z2 / (4.0 * n * n))
    return ((center - half) / denom, (center + half) / denom)


# ---------------------------------------------------------------------------
# Validation MSE (Table-I analog)


@dataclass(frozen=True)
class MseEntry:
    variant: str
    condition: str  # e2e | gt_z
    mse: float      # normalized units, x100
    n_steps: int
    checkpoint: str


def _traj_slices(d: Dataset):
    start = 0
    for t in d.trajectories:
        yield slice(start, start + t.length)
        start += t.length


def action_norms(d: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-dim mean/std used to express MSE in normalized units."""
    a = d.actions_array()
    mean = a.mean(axis=0)
    std = a.std(axis=0)
    return mean, np.where(std > 1e-12, std, 1.0)


def eval_mse(p: PolicySet, validation: Dataset, condition: str = "e2e") -> MseEntry:
    """Mean squared error (x100, per-dim normalized) between greedily
    decoded and ground-truth actions over the validation set.

    ``e2e`` conditions each step on the model's own predicted motion with
    the asynchronous shift respected (step t uses the motion emitted at
    step t-1; step 0 uses its own query).  ``gt_z`` conditions on the
    dataset's labeled motion and is defined only for hierarchy variants.
    """
    if condition not in ("e2e", "gt_z"):
        raise EvalError(f"unknown condition {condition!r}")
    if condition == "gt_z" and p.variant == "flat":
        raise EvalError("gt_z condition is undefined for the flat variant")
    samples = prepare_samples(validation, p)
    gt = validation.actions_array()
    if p.variant == "flat":
        cond_ids = np.zeros(len(samples), dtype=np.int64)
    elif condition == "gt_z":
        cond_ids = samples.motion_id
    else:
        logits = p.motion_logits(samples.feats, samples.task_idx)
        pred = logits.argmax(axis=1)
        cond_ids = pred.copy()
        for sl in _traj_slices(validation):
            cond_ids[sl.start + 1 : sl.stop] = pred[sl.start : sl.stop - 1]
            cond_ids[sl.start] = pred[sl.start]
    tok_logits, _ = p.action_logits(samples.feats, samples.task_idx, cond_ids)
    decoded = detokenize_array(tok_logits.argmax(axis=2), p.binspec)
    _, std = action_norms(validation)
    err = (decoded - gt) / std
    return MseEntry(
        variant=p.variant,
        condition=condition,
        mse=float((err**2).mean() * 100.0),
        n_steps=len(samples),
        checkpoint=p.config_hash(),
    )


def quantization_floor(validation: Dataset, binspec) -> float:
    """Mean squared half-bin error (x100, normalized) — the codec-imposed
    lower bound on any model's MSE against its own training targets."""
    from .codec import tokenize_array

    gt = validation.actions_array()
    decoded = detokenize_array(tokenize_array(gt, binspec), binspec)
    _, std = action_norms(validation)
    return float((((decoded - gt) / std) ** 2).mean() * 100.0)


# ---------------------------------------------------------------------------
# Success evaluation


@dataclass
class TaskSuccess:
    task_id: str
    n: int
    s: int
    staged: list[int]  # cumulative count reaching >= stage i+1
    wilson: tuple[float, float]

    @property
    def rate(self) -> float:
        return self.s / self.n


@dataclass
class SuccessReport:
    variant: str
    mode: str
    tasks: dict[str, TaskSuccess] = field(default_factory=dict)

    @property
    def overall(self) -> float:
        n = sum(t.n for t in self.tasks.values())
        s = sum(t.s for t in self.tasks.values())
        return s / n if n else 0.0


def paired_seed(seed: int, task_idx: int, trial: int) -> int:
    """Deterministic per-trial seed, identical across variants/modes so
    comparisons share initial states."""
    return seed * 1_000_000 + task_idx * 10_000 + trial


def eval_success(
    p: PolicySet,
    tasks,
    trials_per_task: int,
    cfg: RolloutConfig,
    seed: int = 0,
) -> SuccessReport:
    report = SuccessReport(variant=p.variant, mode=cfg.mode)
    for ti, task_id in enumerate(tasks):
        n_stages = len(sim.task_spec(task_id).stages)
        staged = [0] * n_stages
        s = 0
        for trial in range(trials_per_task):
            trace = run_episode(p, task_id, paired_seed(seed, ti, trial), cfg)
            for k in range(trace.final_stage):
                if k < n_stages:
                    staged[k] += 1
            s += trace.success
        report.tasks[task_id] = TaskSuccess(
            task_id=task_id,
            n=trials_per_task,
            s=s,
            staged=staged,
            wilson=wilson_interval(s, trials_per_task),
        )
    return report


# ---------------------------------------------------------------------------
# Contextuality statistics


def contextuality_stats(d: Dataset) -> dict:
    """Per-dim action mean/std for each single-term motion in the labeled
    dataset; the motion's own axis is flagged as the dominant dim."""
    groups: dict[str, list] = {}
    dominant: dict[str, int] = {}
    for traj in d.trajectories:
        for step in traj.steps:
            z = step.motion
            if z is None:
                raise EvalError("contextuality_stats needs a labeled dataset")
            if z.special is not None or len(z.terms) != 1:
                continue
            groups.setdefault(z.canonical, []).append(step.action.to_array())
            dominant[z.canonical] = z.terms[0][0]
    table = {}
    for motion, actions in sorted(groups.items()):
        a = np.stack(actions)
        table[motion] = {
            "n": len(a),
            "mean": a.mean(axis=0).tolist(),
            "std": a.std(axis=0).tolist(),
            "dominant_dim": dominant[motion],
        }
    return table


# ---------------------------------------------------------------------------
# Dataset splitting and the variant grid


def split_dataset(d: Dataset, val_every: int = 5) -> tuple[Dataset, Dataset]:
    """Deterministic per-task round-robin split: every ``val_every``-th
    trajectory of each task goes to validation."""
    counters: dict[str, int] = {}
    train_t, val_t = [], []
    for traj in d.trajectories:
        k = counters.get(traj.task.task_id, 0)
        counters[traj.task.task_id] = k + 1
        (val_t if k % val_every == val_every - 1 else train_t).append(traj)
    if not train_t or not val_t:
        raise EvalError("split produced an empty side; need more trajectories")
    return Dataset(trajectories=tuple(train_t)), Dataset(trajectories=tuple(val_t))


def run_variant_grid(
    labeled: Dataset,
    variants,
    seeds,
    train_cfg: TrainConfig | None = None,
    success_trials: int = 0,
    rollout_cfg: RolloutConfig | None = None,
    tasks=None,
    cluster_k: int = 32,
    progress=None,
):
    """Train each (variant, seed) cell on the train split and evaluate MSE
    (and optionally rollout success) on shared validation data / paired
    seeds.  Returns a list of row dicts, deterministic in (variant, seed)
    order."""
    from .codec import fit_binspec
    from .labeler import motion_counts
    from .model import MotionVocab, cluster_fit
    from .train import train

    train_cfg = train_cfg or TrainConfig()
    train_d, val_d = split_dataset(labeled)
    # Vocabulary over the full dataset so validation-only motions still
    # have ids (their rows just never receive gradient).
    vocab = MotionVocab.from_counts(motion_counts(labeled))
    binspec = fit_binspec(train_d)
    task_ids = tuple(tasks) if tasks else tuple(
        dict.fromkeys(t.task.task_id for t in labeled.trajectories)
    )
    rows = []
    for variant in variants:
        for seed in seeds:
            if progress:
                progress(f"training {variant} seed {seed}")
            cluster = (
                cluster_fit(train_d, cluster_k, seed) if variant == "cluster" else None
            )
            cfg = TrainConfig(
                lr=train_cfg.lr,
                batch_size=train_cfg.batch_size,
                epochs=train_cfg.epochs,
                seed=seed,
                warmup_steps=train_cfg.warmup_steps,
                async_targets=train_cfg.async_targets,
            )
            p = PolicySet(variant, vocab, binspec, task_ids, seed=seed, cluster=cluster)
            p, curves = train(p, train_d, cfg)
            row = {
                "variant": variant,
                "seed": seed,
                "mse_e2e": eval_mse(p, val_d, "e2e").mse,
                "mse_gt_z": (
                    eval_mse(p, val_d, "gt_z").mse if variant != "flat" else None
                ),
                "final_loss": curves[-1]["motion"] + curves[-1]["action"],
                "checkpoint": p.config_hash(),
            }
            if success_trials:
                rep = eval_success(
                    p, task_ids, success_trials, rollout_cfg or RolloutConfig(), seed=0
                )
                row["success"] = rep.overall
            rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Report rendering


def format_table(rows, columns=None) -> str:
    """Aligned text table from a list of dicts."""
    if not rows:
        return "(empty)\n"
    columns = columns or list(rows[0])
    def fmt(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.3f}"
        return str(v)
    cells = [[fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    lines = [
        "  ".join(c.ljust(w) for c, w in zip(columns, widths)),
        "  ".join("-" * w for w in widths),
    ]
    lines.extend("  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in cells)
    return "\n".join(lines) + "\n"


def write_csv(rows, path, columns=None) -> None:
    if not rows:
        raise EvalError("no rows to write")
    columns = columns or list(rows[0])
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def success_report_rows(report: SuccessReport):
    rows = []
    for t in report.tasks.values():
        rows.append(
            {
                "variant": report.variant,
                "mode": report.mode,
                "task": t.task_id,
                "n": t.n,
                "s": t.s,
                "rate": t.rate,
                "wilson_lo": t.wilson[0],
                "wilson_hi": t.wilson[1],
                "staged": "/".join(map(str, t.staged)),
            }
        )
    return rows


def contextuality_rows(table: dict):
    from .core import DIM_NAMES

    rows = []
    for motion, row in table.items():
        d = row["dominant_dim"]
        rows.append(
            {
                "motion": motion,
                "n": row["n"],
                "dominant": DIM_NAMES[d],
                "dominant_mean": row["mean"][d],
                "dominant_std": row["std"][d],
                "max_other_std": max(
                    s for i, s in enumerate(row["std"]) if i != d
                ),
            }
        )
    return rows
