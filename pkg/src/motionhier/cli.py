"""Command-line interface.

Subcommands: simgen, label, train, eval {mse,success,context,grid},
rollout, serve, correct, correct-train.  Every command that writes an
output also writes a ``<output>.manifest.json`` recording the arguments,
seeds, and versions that produced it.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .core import MotionHierError


def _manifest(out_path, command: str, args: dict, extra: dict | None = None):
    payload = {
        "command": command,
        "args": {k: v for k, v in sorted(args.items()) if not k.startswith("_")},
        "versions": {"motionhier": __version__, "numpy": np.__version__},
    }
    if extra:
        payload.update(extra)
    Path(str(out_path) + ".manifest.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2, default=str) + "\n",
        encoding="utf-8",
    )


def _tasks(arg: str):
    from .sim import DEFAULT_SUITE

    return DEFAULT_SUITE if arg == "default" else tuple(arg.split(","))


# ---------------------------------------------------------------------------
# Subcommands


def cmd_simgen(args):
    from .dataio import save_dataset
    from .labeler import label_dataset
    from .sim import generate_dataset

    d = generate_dataset(
        tasks=_tasks(args.tasks),
        episodes_per_task=args.episodes,
        noise=args.noise,
        seed=args.seed,
    )
    if args.label:
        d, vocab = label_dataset(d)
        print(f"labeled with {len(vocab)} distinct motions")
    save_dataset(d, args.out)
    _manifest(args.out, "simgen", vars(args), {"trajectories": len(d), "steps": d.n_steps()})
    print(f"wrote {len(d)} trajectories ({d.n_steps()} steps) to {args.out}")


def cmd_label(args):
    from .dataio import load_dataset, save_dataset
    from .labeler import label_dataset, vocabulary_report

    d = load_dataset(args.data)
    labeled, vocab = label_dataset(d)
    save_dataset(labeled, args.out)
    _manifest(args.out, "label", vars(args), {"vocabulary_size": len(vocab)})
    print(f"labeled {len(labeled)} trajectories; {len(vocab)} distinct motions")
    if args.report:
        print(vocabulary_report(vocab))


def _train_config(args):
    from .train import TrainConfig

    return TrainConfig(
        lr=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=args.seed,
        warmup_steps=args.warmup,
        async_targets=not args.sync_targets,
    )


def cmd_train(args):
    from .codec import fit_binspec
    from .dataio import load_dataset
    from .labeler import motion_counts
    from .model import MotionVocab, PolicySet, cluster_fit
    from .train import train

    d = load_dataset(args.data)
    vocab = MotionVocab.from_counts(motion_counts(d))
    binspec = fit_binspec(d)
    task_ids = tuple(dict.fromkeys(t.task.task_id for t in d.trajectories))
    cluster = cluster_fit(d, args.cluster_k, args.seed) if args.variant == "cluster" else None
    p = PolicySet(args.variant, vocab, binspec, task_ids, seed=args.seed, cluster=cluster)
    p, curves = train(p, d, _train_config(args))
    p.save(args.out)
    curve_path = str(args.out) + ".losses.csv"
    with open(curve_path, "w") as f:
        f.write("epoch,motion,action\n")
        for c in curves:
            f.write(f"{c['epoch']},{c['motion']!r},{c['action']!r}\n")
    _manifest(
        args.out,
        "train",
        vars(args),
        {"config_hash": p.config_hash(), "n_params": p.n_params(),
         "final_loss": curves[-1]},
    )
    print(
        f"trained {args.variant} ({p.n_params()} params) for {args.epochs} epochs; "
        f"final motion {curves[-1]['motion']:.4f} action {curves[-1]['action']:.4f}; "
        f"saved to {args.out}"
    )


def cmd_eval_mse(args):
    from .dataio import load_dataset
    from .evalharness import eval_mse
    from .model import PolicySet

    p = PolicySet.load(args.ckpt)
    d = load_dataset(args.data)
    conditions = ["e2e", "gt_z"] if args.condition == "both" else [args.condition]
    for cond in conditions:
        e = eval_mse(p, d, cond)
        print(f"{e.variant}  {e.condition}  mse={e.mse:.3f}  (n={e.n_steps})")


def cmd_eval_success(args):
    from .evalharness import eval_success, format_table, success_report_rows, write_csv
    from .infer import RolloutConfig
    from .labeler import LabelConfig
    from .model import PolicySet

    p = PolicySet.load(args.ckpt)
    cfg = RolloutConfig(
        mode=args.mode,
        H=args.horizon,
        max_steps=args.max_steps,
        label_config=LabelConfig() if args.mode == "oracle_z" else None,
    )
    rep = eval_success(p, _tasks(args.tasks), args.trials, cfg, seed=args.seed)
    rows = success_report_rows(rep)
    print(format_table(rows), end="")
    if args.csv:
        write_csv(rows, args.csv)
        _manifest(args.csv, "eval success", vars(args))


def cmd_eval_context(args):
    from .dataio import load_dataset
    from .evalharness import contextuality_rows, contextuality_stats, format_table, write_csv

    table = contextuality_stats(load_dataset(args.data))
    rows = contextuality_rows(table)
    print(format_table(rows), end="")
    if args.csv:
        write_csv(rows, args.csv)
        _manifest(args.csv, "eval context", vars(args))


def cmd_eval_grid(args):
    from .dataio import load_dataset
    from .evalharness import format_table, run_variant_grid, write_csv
    from .train import TrainConfig

    d = load_dataset(args.data)
    rows = run_variant_grid(
        d,
        variants=args.variants.split(","),
        seeds=[int(s) for s in args.seeds.split(",")],
        train_cfg=TrainConfig(
            lr=args.lr, batch_size=args.batch_size, epochs=args.epochs,
            warmup_steps=args.warmup,
        ),
        success_trials=args.trials,
        cluster_k=args.cluster_k,
        progress=lambda m: print(f"[grid] {m}", file=sys.stderr),
    )
    print(format_table(rows), end="")
    if args.csv:
        write_csv(rows, args.csv)
        _manifest(args.csv, "eval grid", vars(args))


def cmd_rollout(args):
    from .infer import RolloutConfig, load_trace, replay_episode, run_episode, save_trace, serialize_trace
    from .labeler import LabelConfig
    from .model import PolicySet

    p = PolicySet.load(args.ckpt)
    if args.replay:
        trace = load_trace(args.replay)
        again = replay_episode(p, trace)
        same = serialize_trace(trace) == serialize_trace(again)
        print(f"replay of {args.replay}: success={again.success} bit_exact={same}")
        if not same:
            raise MotionHierError("replay mismatch")
        return
    cfg = RolloutConfig(
        mode=args.mode,
        H=args.horizon,
        max_steps=args.max_steps,
        label_config=LabelConfig() if args.mode == "oracle_z" else None,
    )
    trace = run_episode(p, args.task, args.seed, cfg)
    print(
        f"{args.task} seed {args.seed} mode {args.mode}: success={trace.success} "
        f"steps={len(trace.steps)} final_stage={trace.final_stage}"
    )
    if args.trace:
        save_trace(trace, args.trace)
        _manifest(args.trace, "rollout", vars(args), {"success": trace.success})


def cmd_serve(args):
    from .model import PolicySet
    from .service import RolloutServer

    p = PolicySet.load(args.ckpt)
    server = RolloutServer(
        p,
        host=args.host,
        port=args.port,
        tasks=_tasks(args.tasks) if args.tasks != "model" else None,
        trace_dir=args.trace_dir,
        step_delay=args.step_delay,
    )
    print(f"serving {p.variant} checkpoint on {server.address[0]}:{server.address[1] or args.port}")
    server.serve_forever()


def _load_faulted(args):
    from .correction import inject_motion_fault
    from .model import PolicySet

    p = PolicySet.load(args.ckpt)
    if args.fault:
        p = inject_motion_fault(p, args.fault, penalty=args.fault_penalty)
        print(f"injected motion fault: suppress motions containing {args.fault!r}")
    return p


def cmd_correct(args):
    from .correction import ScriptedCorrector, SessionConfig, run_session, save_session
    from .infer import RolloutConfig
    from .sim import make_task

    p = _load_faulted(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scfg = SessionConfig(
        rollout=RolloutConfig(mode=args.mode, max_steps=args.max_steps),
        requery_period=args.requery,
        stall_steps=args.stall,
    )
    kept = total = 0
    for ti, task_id in enumerate(_tasks(args.tasks)):
        for ep in range(args.episodes):
            seed = args.seed * 1_000_000 + ti * 10_000 + ep
            corrector = ScriptedCorrector(make_task(task_id), vocab=p.vocab)
            trace, events = run_session(p, task_id, seed, scfg, corrector)
            total += 1
            if trace.success and trace.corrected_steps:
                kept += 1
                save_session(trace, events, out_dir / f"{task_id}_{seed}.mhtr")
    _manifest(out_dir / "sessions", "correct", vars(args), {"kept": kept, "total": total})
    print(f"kept {kept}/{total} successful corrected episodes in {out_dir}")


def cmd_correct_train(args):
    from .correction import build_correction_dataset
    from .dataio import load_dataset
    from .infer import load_trace
    from .train import TrainConfig, train_from_corrections

    p = _load_faulted(args)
    demos = load_dataset(args.demos)
    traces = [
        load_trace(f) for f in sorted(Path(args.sessions).glob("*.mhtr"))
    ]
    cds = build_correction_dataset(traces)
    cfg = TrainConfig(
        lr=args.lr, batch_size=args.batch_size, epochs=args.epochs,
        seed=args.seed, warmup_steps=args.warmup,
        intervene_action=args.intervene_action,
    )
    p, curves = train_from_corrections(p, demos, cds, cfg)
    p.save(args.out)
    _manifest(
        args.out,
        "correct-train",
        vars(args),
        {"config_hash": p.config_hash(), "correction_episodes": len(cds),
         "correction_steps": cds.n_corrected_steps},
    )
    print(
        f"retrained on {len(cds)} correction episodes "
        f"({cds.n_corrected_steps} corrected steps); saved to {args.out}"
    )


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="motionhier",
        description="Language-motion action hierarchies at desk scale.",
    )
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    sg = sub.add_parser("simgen", help="generate scripted-expert demonstrations")
    sg.add_argument("--tasks", default="default")
    sg.add_argument("--episodes", type=int, default=200)
    sg.add_argument("--noise", type=float, default=0.05)
    sg.add_argument("--seed", type=int, default=0)
    sg.add_argument("--label", action="store_true", help="also label motions")
    sg.add_argument("--out", required=True)
    sg.set_defaults(fn=cmd_simgen)

    lb = sub.add_parser("label", help="label a dataset with language motions")
    lb.add_argument("--data", required=True)
    lb.add_argument("--out", required=True)
    lb.add_argument("--report", action="store_true")
    lb.set_defaults(fn=cmd_label)

    tr = sub.add_parser("train", help="train a policy variant")
    tr.add_argument("--data", required=True)
    tr.add_argument("--variant", default="rt_h",
                    choices=["rt_h", "joint", "flat", "cluster", "onehot"])
    tr.add_argument("--out", required=True)
    tr.add_argument("--epochs", type=int, default=80)
    tr.add_argument("--lr", type=float, default=0.15)
    tr.add_argument("--batch-size", type=int, default=64)
    tr.add_argument("--warmup", type=int, default=400)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--cluster-k", type=int, default=32)
    tr.add_argument("--sync-targets", action="store_true",
                    help="train the motion query on the current step's motion")
    tr.set_defaults(fn=cmd_train)

    ev = sub.add_parser("eval", help="evaluation suites")
    esub = ev.add_subparsers(dest="eval_command", required=True)

    em = esub.add_parser("mse", help="validation action MSE")
    em.add_argument("--ckpt", required=True)
    em.add_argument("--data", required=True)
    em.add_argument("--condition", default="both", choices=["e2e", "gt_z", "both"])
    em.set_defaults(fn=cmd_eval_mse)

    es = esub.add_parser("success", help="rollout success rates")
    es.add_argument("--ckpt", required=True)
    es.add_argument("--tasks", default="default")
    es.add_argument("--trials", type=int, default=50)
    es.add_argument("--mode", default="async",
                    choices=["async", "fixed_freq", "sync", "oracle_z"])
    es.add_argument("--horizon", type=int, default=5)
    es.add_argument("--max-steps", type=int, default=120)
    es.add_argument("--seed", type=int, default=0)
    es.add_argument("--csv")
    es.set_defaults(fn=cmd_eval_success)

    ec = esub.add_parser("context", help="per-motion contextuality statistics")
    ec.add_argument("--data", required=True)
    ec.add_argument("--csv")
    ec.set_defaults(fn=cmd_eval_context)

    eg = esub.add_parser("grid", help="variant grid experiment")
    eg.add_argument("--data", required=True)
    eg.add_argument("--variants", default="rt_h,joint,flat,cluster,onehot")
    eg.add_argument("--seeds", default="0,1,2")
    eg.add_argument("--epochs", type=int, default=80)
    eg.add_argument("--lr", type=float, default=0.15)
    eg.add_argument("--batch-size", type=int, default=64)
    eg.add_argument("--warmup", type=int, default=400)
    eg.add_argument("--trials", type=int, default=0,
                    help="rollout trials per task (0 = MSE only)")
    eg.add_argument("--cluster-k", type=int, default=32)
    eg.add_argument("--csv")
    eg.set_defaults(fn=cmd_eval_grid)

    ro = sub.add_parser("rollout", help="run or replay one episode")
    ro.add_argument("--ckpt", required=True)
    ro.add_argument("--task", default="pick")
    ro.add_argument("--seed", type=int, default=0)
    ro.add_argument("--mode", default="async",
                    choices=["async", "fixed_freq", "sync", "oracle_z"])
    ro.add_argument("--horizon", type=int, default=5)
    ro.add_argument("--max-steps", type=int, default=120)
    ro.add_argument("--trace", help="write the trace to this path")
    ro.add_argument("--replay", help="replay a saved trace and verify bit-exactness")
    ro.set_defaults(fn=cmd_rollout)

    sv = sub.add_parser("serve", help="serve live rollouts for the console")
    sv.add_argument("--ckpt", required=True)
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--port", type=int, default=8765)
    sv.add_argument("--tasks", default="model")
    sv.add_argument("--trace-dir")
    sv.add_argument("--step-delay", type=float, default=0.1)
    sv.set_defaults(fn=cmd_serve)

    co = sub.add_parser("correct", help="collect scripted correction episodes")
    co.add_argument("--ckpt", required=True)
    co.add_argument("--tasks", default="default")
    co.add_argument("--episodes", type=int, default=30)
    co.add_argument("--seed", type=int, default=7)
    co.add_argument("--mode", default="async")
    co.add_argument("--max-steps", type=int, default=150)
    co.add_argument("--requery", type=int, default=1)
    co.add_argument("--stall", type=int, default=3)
    co.add_argument("--fault", help="suppress motions containing this substring first")
    co.add_argument("--fault-penalty", type=float, default=10.0)
    co.add_argument("--out-dir", required=True)
    co.set_defaults(fn=cmd_correct)

    ct = sub.add_parser("correct-train", help="retrain from corrections (50:1)")
    ct.add_argument("--ckpt", required=True)
    ct.add_argument("--demos", required=True)
    ct.add_argument("--sessions", required=True)
    ct.add_argument("--out", required=True)
    ct.add_argument("--epochs", type=int, default=6)
    ct.add_argument("--lr", type=float, default=0.08)
    ct.add_argument("--batch-size", type=int, default=64)
    ct.add_argument("--warmup", type=int, default=100)
    ct.add_argument("--seed", type=int, default=0)
    ct.add_argument("--fault", help="apply the same fault before retraining")
    ct.add_argument("--fault-penalty", type=float, default=10.0)
    ct.add_argument("--intervene-action", action="store_true",
                    help="also train the action query on corrected steps")
    ct.set_defaults(fn=cmd_correct_train)

    return ap


def main(argv=None) -> int:
    warnings.filterwarnings("default")
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except MotionHierError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
