"""On-disk dataset format.

A dataset file is UTF-8 text: a single self-describing JSON header line
(magic bytes, schema version, trajectory count) followed by exactly one
JSON record per trajectory.  All JSON is emitted with sorted keys and
compact separators, and floats use Python's shortest round-trip repr, so
serialization is canonical: equal datasets produce byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

from .core import (
    ActionVector,
    Dataset,
    MotionHierError,
    Observation,
    Step,
    TaskDescription,
    Trajectory,
)

MAGIC = "MHDS"
VERSION = 1


class DatasetFormatError(MotionHierError):
    pass


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _action_to_json(a: ActionVector):
    return {
        "dpos": list(a.dpos),
        "drot": list(a.drot),
        "dbase": list(a.dbase),
        "dgrip": a.dgrip,
        "terminate": a.terminate,
    }


def _action_from_json(d) -> ActionVector:
    return ActionVector(
        dpos=tuple(d["dpos"]),
        drot=tuple(d["drot"]),
        dbase=tuple(d["dbase"]),
        dgrip=d["dgrip"],
        terminate=d["terminate"],
    )


def _obs_to_json(o: Observation):
    return {
        "ee_pose": list(o.ee_pose),
        "grip_state": o.grip_state,
        "object_poses": [[oid, list(pose)] for oid, pose in o.object_poses],
        "articulation": dict(sorted(o.articulation.items())),
        "step_index": o.step_index,
    }


def _obs_from_json(d) -> Observation:
    return Observation(
        ee_pose=tuple(d["ee_pose"]),
        grip_state=d["grip_state"],
        object_poses=tuple((oid, tuple(pose)) for oid, pose in d["object_poses"]),
        articulation=dict(d["articulation"]),
        step_index=d["step_index"],
    )


def _traj_to_json(t: Trajectory):
    return {
        "task": {
            "task_id": t.task.task_id,
            "text": t.task.text,
            "params": dict(sorted(t.task.params.items())),
        },
        "success": t.success,
        "steps": [
            {
                "obs": _obs_to_json(s.obs),
                "action": _action_to_json(s.action),
                "stage": s.stage,
                # Motions round-trip through their canonical string.
                "motion": None if s.motion is None else s.motion.canonical,
            }
            for s in t.steps
        ],
    }


def _traj_from_json(d) -> Trajectory:
    from . import labeler  # deferred: labeler depends on core, not on dataio

    steps = []
    for sd in d["steps"]:
        motion = None if sd["motion"] is None else labeler.parse_motion(sd["motion"])
        steps.append(
            Step(
                obs=_obs_from_json(sd["obs"]),
                action=_action_from_json(sd["action"]),
                stage=sd["stage"],
                motion=motion,
            )
        )
    task = TaskDescription(
        task_id=d["task"]["task_id"],
        text=d["task"]["text"],
        params=dict(d["task"]["params"]),
    )
    return Trajectory(task=task, steps=tuple(steps), success=d["success"])


def serialize_dataset(d: Dataset) -> str:
    """Canonical text serialization (the exact file contents)."""
    header = _dumps({"magic": MAGIC, "version": VERSION, "trajectories": len(d)})
    lines = [header]
    lines.extend(_dumps(_traj_to_json(t)) for t in d.trajectories)
    return "\n".join(lines) + "\n"


def save_dataset(d: Dataset, path) -> None:
    Path(path).write_text(serialize_dataset(d), encoding="utf-8")


def load_dataset(path) -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{path}: bad header: {e}") from e
    if header.get("magic") != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {header.get('magic')!r}")
    if header.get("version") != VERSION:
        raise DatasetFormatError(
            f"{path}: version mismatch: found {header.get('version')}, "
            f"expected {VERSION}"
        )
    count = header["trajectories"]
    records = lines[1:]
    if len(records) < count:
        offset = len(text.encode("utf-8"))
        raise DatasetFormatError(
            f"{path}: truncated: header declares {count} trajectories, "
            f"found {len(records)} records (file ends at byte {offset})"
        )
    trajs = []
    for i, line in enumerate(records[:count]):
        try:
            trajs.append(_traj_from_json(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise DatasetFormatError(f"{path}: record {i}: {e}") from e
    return Dataset(trajectories=tuple(trajs))
