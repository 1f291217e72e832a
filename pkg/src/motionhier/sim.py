"""Deterministic kinematic tabletop simulator.

No dynamics: the end effector integrates commanded deltas under per-step
caps, grasping is a latch within a radius, and a drawer is a prismatic
joint whose extension follows the gripper while its handle is held.

Task suite (desk analogs): pick, move_near, place_upright, pull_napkin,
open_drawer, close_drawer.  Each task ships a scripted stage-based expert
(proportional controller toward stage waypoints).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import (
    ActionVector,
    Dataset,
    MotionHierError,
    Observation,
    Step,
    TaskDescription,
    Trajectory,
)
from .geometry import matrix_to_rotvec, rotation_error, rotvec_to_matrix


class SimError(MotionHierError):
    pass


@dataclass(frozen=True)
class SimConfig:
    """Per-step caps and grasp thresholds (the declared speed limits)."""

    max_dpos: float = 0.05
    max_drot: float = 0.2
    max_grip_rate: float = 0.25
    grasp_radius: float = 0.07
    close_threshold: float = 0.6
    open_threshold: float = 0.4
    workspace_lo: tuple[float, float, float] = (-0.45, -0.45, 0.0)
    workspace_hi: tuple[float, float, float] = (0.45, 0.45, 0.4)


DEFAULT_SIM = SimConfig()


@dataclass
class RigidObject:
    oid: str
    pose: np.ndarray  # 6: position + rotation vector
    rest_z: float = 0.02
    held: bool = False

    def copy(self) -> "RigidObject":
        return RigidObject(self.oid, self.pose.copy(), self.rest_z, self.held)

    @property
    def upright(self) -> bool:
        # Object z-axis within ~10 degrees of world z.
        R = rotvec_to_matrix(self.pose[3:])
        return float(R[2, 2]) > 0.985


@dataclass
class PrismaticJoint:
    name: str
    base_pos: np.ndarray  # handle position at extension 0
    axis: np.ndarray      # unit vector of positive extension
    lo: float
    hi: float
    value: float = 0.0

    def copy(self) -> "PrismaticJoint":
        return PrismaticJoint(
            self.name, self.base_pos.copy(), self.axis.copy(),
            self.lo, self.hi, self.value,
        )

    @property
    def handle_pos(self) -> np.ndarray:
        return self.base_pos + self.axis * self.value


@dataclass
class WorldState:
    ee_pose: np.ndarray  # 6
    grip_state: float
    objects: dict[str, RigidObject]
    joints: dict[str, PrismaticJoint] = field(default_factory=dict)
    held_oid: str | None = None
    held_joint: str | None = None
    grasp_offset: tuple[np.ndarray, np.ndarray] | None = None  # (p, rotvec)
    ever_held: frozenset = frozenset()
    terminated: bool = False
    clamped: bool = False

    def copy(self) -> "WorldState":
        return WorldState(
            ee_pose=self.ee_pose.copy(),
            grip_state=self.grip_state,
            objects={k: o.copy() for k, o in self.objects.items()},
            joints={k: j.copy() for k, j in self.joints.items()},
            held_oid=self.held_oid,
            held_joint=self.held_joint,
            grasp_offset=None if self.grasp_offset is None else (
                self.grasp_offset[0].copy(), self.grasp_offset[1].copy()
            ),
            ever_held=self.ever_held,
            terminated=self.terminated,
            clamped=self.clamped,
        )


def _held_object_pose(s: WorldState) -> np.ndarray:
    """Pose of the held object: ee pose composed with the fixed grasp
    transform, exactly."""
    p_g, r_g = s.grasp_offset
    R_ee = rotvec_to_matrix(s.ee_pose[3:])
    pos = s.ee_pose[:3] + R_ee @ p_g
    rot = matrix_to_rotvec(R_ee @ rotvec_to_matrix(r_g))
    return np.concatenate([pos, rot])


def step(s: WorldState, a: ActionVector, cfg: SimConfig = DEFAULT_SIM) -> WorldState:
    """Advance the world by one action.  Motion beyond the caps or the
    workspace is clamped (and flagged), never an error."""
    ns = s.copy()
    ns.clamped = False
    if ns.terminated:
        return ns
    if a.terminate:
        ns.terminated = True
        return ns

    dpos = np.clip(np.array(a.dpos), -cfg.max_dpos, cfg.max_dpos)
    new_pos = ns.ee_pose[:3] + dpos
    clamped_pos = np.clip(new_pos, cfg.workspace_lo, cfg.workspace_hi)
    if not np.array_equal(new_pos, clamped_pos):
        ns.clamped = True
    ns.ee_pose[:3] = clamped_pos

    drot = np.array(a.drot)
    mag = np.linalg.norm(drot)
    if mag > cfg.max_drot:
        drot = drot * (cfg.max_drot / mag)
        ns.clamped = True
    if mag > 0:
        ns.ee_pose[3:] = matrix_to_rotvec(
            rotvec_to_matrix(drot) @ rotvec_to_matrix(ns.ee_pose[3:])
        )

    prev_grip = ns.grip_state
    ns.grip_state = float(
        np.clip(prev_grip + np.clip(a.dgrip, -1, 1) * cfg.max_grip_rate, 0.0, 1.0)
    )

    # Grasp latch on closing across the threshold.
    if (
        ns.held_oid is None
        and ns.held_joint is None
        and prev_grip < cfg.close_threshold <= ns.grip_state
    ):
        _try_latch(ns, cfg)

    # Release when opened past the threshold.
    if ns.grip_state < cfg.open_threshold:
        if ns.held_oid is not None:
            obj = ns.objects[ns.held_oid]
            obj.held = False
            obj.pose[2] = obj.rest_z  # kinematic drop to rest height
            ns.held_oid = None
            ns.grasp_offset = None
        ns.held_joint = None

    # Held rigid object tracks the gripper exactly.
    if ns.held_oid is not None:
        ns.objects[ns.held_oid].pose = _held_object_pose(ns)

    # Held drawer handle: extension follows the gripper's projection onto
    # the joint axis, clamped to the joint limits.
    if ns.held_joint is not None:
        j = ns.joints[ns.held_joint]
        proj = float(np.dot(ns.ee_pose[:3] - j.base_pos, j.axis))
        j.value = float(np.clip(proj, j.lo, j.hi))

    return ns


def _try_latch(ns: WorldState, cfg: SimConfig) -> None:
    ee_pos = ns.ee_pose[:3]
    best, best_d = None, cfg.grasp_radius
    for oid, obj in ns.objects.items():
        d = float(np.linalg.norm(obj.pose[:3] - ee_pos))
        if d < best_d:
            best, best_d = ("object", oid), d
    for name, j in ns.joints.items():
        d = float(np.linalg.norm(j.handle_pos - ee_pos))
        if d < best_d:
            best, best_d = ("joint", name), d
    if best is None:
        return
    kind, name = best
    if kind == "object":
        obj = ns.objects[name]
        obj.held = True
        ns.held_oid = name
        R_ee = rotvec_to_matrix(ns.ee_pose[3:])
        p_g = R_ee.T @ (obj.pose[:3] - ee_pos)
        r_g = matrix_to_rotvec(R_ee.T @ rotvec_to_matrix(obj.pose[3:]))
        ns.grasp_offset = (p_g, r_g)
        ns.ever_held = ns.ever_held | {name}
    else:
        ns.held_joint = name
        ns.ever_held = ns.ever_held | {name}


# ---------------------------------------------------------------------------
# Task suite


@dataclass(frozen=True)
class Stage:
    name: str
    # waypoint(state) -> (target pos or None, target rotvec or None, grip cmd)
    waypoint: Callable[[WorldState], tuple]
    done: Callable[[WorldState], bool]


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    text: str
    params: dict[str, str]
    observed: tuple[str, ...]  # object ids in observation order
    make_initial: Callable[[np.random.Generator | None, float], WorldState]
    stages: tuple[Stage, ...]
    success: Callable[[WorldState], bool]
    step_budget: int = 250


EE_HOME = np.array([0.0, 0.0, 0.25, 0.0, 0.0, 0.0])
HOVER_Z = 0.12
GRASP_Z = 0.03
LIFT_Z = 0.22
ARRIVE_TOL = 0.02


def _base_world(objects, joints=None) -> WorldState:
    return WorldState(
        ee_pose=EE_HOME.copy(),
        grip_state=0.0,
        objects={o.oid: o for o in objects},
        joints={j.name: j for j in (joints or [])},
    )


def _near_xy(p, q, tol=0.03) -> bool:
    return float(np.linalg.norm(np.asarray(p[:2]) - np.asarray(q[:2]))) < tol


def _above(pos, z) -> np.ndarray:
    return np.array([pos[0], pos[1], z])


def _grasp_stages(oid: str) -> list[Stage]:
    """Approach above the object, descend, close the gripper."""
    return [
        Stage(
            "approach",
            lambda s: (_above(s.objects[oid].pose, HOVER_Z), None, 0.0),
            lambda s: oid in s.ever_held
            or (_near_xy(s.ee_pose, s.objects[oid].pose)
                and s.ee_pose[2] <= HOVER_Z + ARRIVE_TOL),
        ),
        Stage(
            "descend",
            lambda s: (_above(s.objects[oid].pose, GRASP_Z), None, 0.0),
            lambda s: oid in s.ever_held
            or (_near_xy(s.ee_pose, s.objects[oid].pose)
                and s.ee_pose[2] < GRASP_Z + ARRIVE_TOL),
        ),
        Stage(
            "grasp",
            # Keep correcting the small residual toward the grasp point
            # while the gripper closes.
            lambda s: (_above(s.objects[oid].pose, GRASP_Z), None, 1.0),
            lambda s: oid in s.ever_held,
        ),
    ]


def _uniform_xy(rng, lo, hi, scale):
    center = (np.asarray(lo) + np.asarray(hi)) / 2.0
    if rng is None or scale == 0.0:
        return center
    half = (np.asarray(hi) - np.asarray(lo)) / 2.0 * scale
    return center + rng.uniform(-half, half)


def _pick_spec() -> TaskSpec:
    oid = "block"

    def make_initial(rng, scale):
        xy = _uniform_xy(rng, (-0.3, -0.25), (0.3, 0.3), scale)
        obj = RigidObject(oid, np.array([xy[0], xy[1], 0.02, 0.0, 0.0, 0.0]))
        return _base_world([obj])

    stages = _grasp_stages(oid) + [
        Stage(
            "lift",
            lambda s: (_above(s.ee_pose, LIFT_Z), None, 0.0),
            lambda s: oid in s.ever_held and s.objects[oid].pose[2] > LIFT_Z - 0.04,
        ),
    ]
    return TaskSpec(
        task_id="pick",
        text="pick the block",
        params={"object": oid},
        observed=(oid,),
        make_initial=make_initial,
        stages=tuple(stages),
        success=lambda s: s.held_oid == oid and s.objects[oid].pose[2] > 0.15,
    )


def _move_near_spec() -> TaskSpec:
    oid, target = "block", "coaster"

    def make_initial(rng, scale):
        xy = _uniform_xy(rng, (-0.3, -0.2), (-0.05, 0.3), scale)
        txy = _uniform_xy(rng, (0.05, -0.2), (0.3, 0.3), scale)
        return _base_world([
            RigidObject(oid, np.array([xy[0], xy[1], 0.02, 0.0, 0.0, 0.0])),
            RigidObject(target, np.array([txy[0], txy[1], 0.01, 0.0, 0.0, 0.0]),
                        rest_z=0.01),
        ])

    def carried(s):
        return (
            oid in s.ever_held
            and _near_xy(s.objects[oid].pose, s.objects[target].pose, 0.04)
        )

    stages = _grasp_stages(oid) + [
        Stage(
            "carry",
            lambda s: (_above(s.objects[target].pose, HOVER_Z), None, 0.0),
            carried,
        ),
        Stage(
            "release",
            lambda s: (None, None, -1.0),
            lambda s: carried(s) and s.held_oid is None,
        ),
    ]
    return TaskSpec(
        task_id="move_near",
        text="move the block near the coaster",
        params={"object": oid, "target": target},
        observed=(oid, target),
        make_initial=make_initial,
        stages=tuple(stages),
        success=lambda s: (
            s.held_oid is None
            and _near_xy(s.objects[oid].pose, s.objects[target].pose, 0.06)
        ),
    )


def _place_upright_spec() -> TaskSpec:
    oid = "bottle"

    def make_initial(rng, scale):
        xy = _uniform_xy(rng, (-0.25, -0.2), (0.25, 0.3), scale)
        theta = 0.0 if rng is None or scale == 0.0 else rng.uniform(-np.pi, np.pi) * scale
        # Lying on its side: rotated ~90 degrees about a horizontal axis.
        axis = np.array([np.cos(theta), np.sin(theta), 0.0])
        rotvec = axis * (np.pi / 2)
        obj = RigidObject(
            oid, np.concatenate([[xy[0], xy[1], 0.02], rotvec]), rest_z=0.02
        )
        return _base_world([obj])

    def upright_rot_target(s):
        # ee rotation that makes the held object's orientation identity.
        R_obj = rotvec_to_matrix(s.objects[oid].pose[3:])
        R_ee = rotvec_to_matrix(s.ee_pose[3:])
        return matrix_to_rotvec(R_obj.T @ R_ee)

    def righted(s):
        return oid in s.ever_held and s.objects[oid].upright

    stages = _grasp_stages(oid) + [
        Stage(
            "lift",
            lambda s: (_above(s.ee_pose, 0.15), None, 0.0),
            lambda s: righted(s)
            or (oid in s.ever_held and s.objects[oid].pose[2] > 0.11),
        ),
        Stage(
            "rotate",
            # Hold altitude while reorienting.
            lambda s: (_above(s.ee_pose, 0.15), upright_rot_target(s), 0.0),
            righted,
        ),
        Stage(
            "release",
            lambda s: (None, None, -1.0),
            lambda s: righted(s) and s.held_oid is None,
        ),
    ]
    return TaskSpec(
        task_id="place_upright",
        text="place the bottle upright",
        params={"object": oid},
        observed=(oid,),
        make_initial=make_initial,
        stages=tuple(stages),
        success=lambda s: s.held_oid is None and s.objects[oid].upright,
    )


def _pull_napkin_spec() -> TaskSpec:
    oid, disp = "napkin", "dispenser"
    clear_z = 0.18

    def make_initial(rng, scale):
        xy = _uniform_xy(rng, (-0.1, 0.05), (0.25, 0.3), scale)
        return _base_world([
            RigidObject(oid, np.array([xy[0], xy[1], 0.05, 0.0, 0.0, 0.0]),
                        rest_z=0.05),
            RigidObject(disp, np.array([xy[0], xy[1], 0.08, 0.0, 0.0, 0.0]),
                        rest_z=0.08),
        ])

    def extracted_up(s):
        return oid in s.ever_held and s.objects[oid].pose[2] > clear_z - 0.04

    def extracted_back(s):
        return (
            extracted_up(s)
            and s.objects[oid].pose[0] < s.objects[disp].pose[0] - 0.13
        )

    stages = _grasp_stages(oid) + [
        Stage(
            "extract_up",
            lambda s: (_above(s.ee_pose, clear_z), None, 0.0),
            extracted_up,
        ),
        Stage(
            "extract_back",
            lambda s: (
                s.ee_pose[:3] + np.array([-0.2, 0.0, 0.0]), None, 0.0
            ),
            extracted_back,
        ),
    ]
    return TaskSpec(
        task_id="pull_napkin",
        text="pull the napkin out of the dispenser",
        params={"object": oid, "fixture": disp},
        observed=(oid, disp),
        make_initial=make_initial,
        stages=tuple(stages),
        success=extracted_back,
    )


def _drawer_spec(open_drawer: bool) -> TaskSpec:
    joint = "drawer"
    target = 0.18 if open_drawer else 0.02

    def make_initial(rng, scale):
        x = float(_uniform_xy(rng, (0.15, 0.0), (0.3, 0.0), scale)[0])
        if open_drawer:
            value = 0.0
        else:
            value = float(_uniform_xy(rng, (0.15, 0.0), (0.2, 0.0), scale)[0])
        world = _base_world([])
        world.joints[joint] = PrismaticJoint(
            name=joint,
            base_pos=np.array([x, 0.15, 0.06]),
            axis=np.array([0.0, -1.0, 0.0]),
            lo=0.0,
            hi=0.2,
            value=value,
        )
        return world

    def done_pull(s):
        v = s.joints[joint].value
        return abs(v - target) < 0.02 and joint in s.ever_held

    stages = (
        Stage(
            "approach",
            lambda s: (
                _above(s.joints[joint].handle_pos, HOVER_Z), None, 0.0
            ),
            lambda s: joint in s.ever_held
            or (_near_xy(s.ee_pose, s.joints[joint].handle_pos)
                and s.ee_pose[2] <= HOVER_Z + ARRIVE_TOL),
        ),
        Stage(
            "reach_handle",
            lambda s: (s.joints[joint].handle_pos, None, 0.0),
            lambda s: joint in s.ever_held
            or float(np.linalg.norm(s.ee_pose[:3] - s.joints[joint].handle_pos))
            < ARRIVE_TOL,
        ),
        Stage("grasp", lambda s: (None, None, 1.0), lambda s: joint in s.ever_held),
        Stage(
            "pull",
            lambda s: (
                s.joints[joint].base_pos + s.joints[joint].axis * target, None, 0.0
            ),
            done_pull,
        ),
        Stage(
            "release",
            lambda s: (None, None, -1.0),
            lambda s: done_pull(s) and s.held_joint is None,
        ),
    )
    verb = "open" if open_drawer else "close"
    return TaskSpec(
        task_id=f"{verb}_drawer",
        text=f"{verb} the drawer",
        params={"joint": joint},
        observed=(),
        make_initial=make_initial,
        stages=stages,
        success=lambda s: (
            s.held_joint is None and abs(s.joints[joint].value - target) < 0.03
        ),
    )


def _build_registry() -> dict[str, TaskSpec]:
    specs = [
        _pick_spec(),
        _move_near_spec(),
        _place_upright_spec(),
        _pull_napkin_spec(),
        _drawer_spec(open_drawer=True),
        _drawer_spec(open_drawer=False),
    ]
    return {s.task_id: s for s in specs}


TASK_REGISTRY = _build_registry()
DEFAULT_SUITE = ("pick", "move_near", "place_upright", "pull_napkin")


def task_spec(task_id: str) -> TaskSpec:
    try:
        return TASK_REGISTRY[task_id]
    except KeyError:
        raise SimError(
            f"unknown task {task_id!r}; registered: {sorted(TASK_REGISTRY)}"
        ) from None


def make_task(task_id: str) -> TaskDescription:
    spec = task_spec(task_id)
    return TaskDescription(task_id=spec.task_id, text=spec.text, params=spec.params)


def reset(
    task: TaskDescription,
    rng: np.random.Generator | None = None,
    randomization: float = 1.0,
) -> WorldState:
    """Initial world for a task; deterministic given the rng state.
    ``randomization=0`` yields the fixed canonical layout."""
    return task_spec(task.task_id).make_initial(rng, randomization)


def observe(s: WorldState, spec: TaskSpec, step_index: int) -> Observation:
    object_poses = []
    for oid in spec.observed:
        object_poses.append((oid, tuple(float(v) for v in s.objects[oid].pose)))
    for name in sorted(s.joints):
        object_poses.append(
            (f"{name}_handle",
             tuple(float(v) for v in s.joints[name].handle_pos) + (0.0, 0.0, 0.0))
        )
    return Observation(
        ee_pose=tuple(float(v) for v in s.ee_pose),
        grip_state=s.grip_state,
        object_poses=tuple(object_poses),
        articulation={k: float(j.value) for k, j in sorted(s.joints.items())},
        step_index=step_index,
    )


def expert_policy(
    task: TaskDescription,
    s: WorldState,
    cfg: SimConfig = DEFAULT_SIM,
    min_stage: int = 0,
) -> tuple[ActionVector, int]:
    """Proportional controller toward the current stage waypoint.

    Returns the action and the stage index; emits a terminate action once
    every stage predicate holds.  Callers pass the previous step's stage as
    ``min_stage`` so completed stages are never re-entered (stage indices
    stay nondecreasing even when noise momentarily un-satisfies an earlier
    predicate).
    """
    spec = task_spec(task.task_id)
    idx = min_stage
    while idx < len(spec.stages) and spec.stages[idx].done(s):
        idx += 1
    if idx == len(spec.stages):
        return ActionVector.terminate_action(), idx

    pos_target, rot_target, grip_cmd = spec.stages[idx].waypoint(s)
    dpos = np.zeros(3)
    if pos_target is not None:
        dpos = np.clip(np.asarray(pos_target) - s.ee_pose[:3],
                       -cfg.max_dpos, cfg.max_dpos)
    drot = np.zeros(3)
    if rot_target is not None:
        err = rotation_error(np.asarray(rot_target), s.ee_pose[3:])
        mag = float(np.linalg.norm(err))
        if mag > cfg.max_drot:
            err = err * (cfg.max_drot / mag)
        drot = err
    return (
        ActionVector(
            dpos=tuple(float(v) for v in dpos),
            drot=tuple(float(v) for v in drot),
            dgrip=float(grip_cmd),
        ),
        idx,
    )


def _noisy(a: ActionVector, noise: float, rng, cfg: SimConfig) -> ActionVector:
    if noise <= 0 or a.terminate:
        return a
    v = a.to_array()
    v[0:3] += rng.normal(0.0, noise * cfg.max_dpos, 3)
    v[3:6] += rng.normal(0.0, noise * cfg.max_drot, 3)
    v[8] = np.clip(v[8] + rng.normal(0.0, noise * 0.3), -1.0, 1.0)
    return ActionVector.from_array(v)


def run_expert_episode(
    task: TaskDescription,
    rng: np.random.Generator,
    noise: float = 0.0,
    cfg: SimConfig = DEFAULT_SIM,
    randomization: float = 1.0,
) -> Trajectory | None:
    """One scripted-expert episode; None when the step budget runs out or
    the success predicate fails."""
    spec = task_spec(task.task_id)
    s = reset(task, rng, randomization)
    steps = []
    stage = 0
    for t in range(spec.step_budget):
        a, stage = expert_policy(task, s, cfg, min_stage=stage)
        a = _noisy(a, noise, rng, cfg)
        steps.append(Step(obs=observe(s, spec, t), action=a, stage=stage))
        s = step(s, a, cfg)
        if a.terminate:
            if spec.success(s):
                return Trajectory(task=task, steps=tuple(steps), success=True)
            return None
    return None


def generate_dataset(
    tasks: tuple[str, ...] = DEFAULT_SUITE,
    episodes_per_task: int = 50,
    noise: float = 0.05,
    seed: int = 0,
    cfg: SimConfig = DEFAULT_SIM,
    max_retries: int = 3,
) -> Dataset:
    """Successful expert demonstrations for each task, resampling failures.

    Aborts with diagnostics when more than half the attempts for a task
    fail (a broken expert, not bad luck).
    """
    if episodes_per_task < 1:
        raise SimError("episodes_per_task must be >= 1")
    trajs = []
    for ti, task_id in enumerate(tasks):
        task = make_task(task_id)
        attempts = failures = 0
        for ep in range(episodes_per_task):
            traj = None
            for retry in range(max_retries):
                ss = np.random.SeedSequence(
                    entropy=seed, spawn_key=(ti, ep, retry)
                )
                attempts += 1
                traj = run_expert_episode(
                    task, np.random.Generator(np.random.PCG64(ss)), noise, cfg
                )
                if traj is not None:
                    break
                failures += 1
            if traj is None:
                raise SimError(
                    f"expert failed {max_retries} straight attempts on "
                    f"{task_id!r} (episode {ep}, noise {noise})"
                )
            trajs.append(traj)
        if attempts and failures / attempts > 0.5:
            raise SimError(
                f"expert failure rate {failures}/{attempts} on {task_id!r} "
                f"exceeds 50%; expert or task spec is broken"
            )
    return Dataset(trajectories=tuple(trajs))
