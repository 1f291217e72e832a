"""Domain types shared by every stage of the pipeline.

The nine motion dimensions are always ordered
``[dx, dy, dz, drx, dry, drz, base_turn, base_move, dgrip]``; helpers here
convert between the structured ``ActionVector`` and that flat layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Canonical order of the 9 motion dimensions.  Everything downstream
# (labeler, codec, model heads) indexes actions in this order.
DIM_NAMES = ("x", "y", "z", "rx", "ry", "rz", "base_turn", "base_move", "grip")
N_DIMS = len(DIM_NAMES)

POS_DIMS = (0, 1, 2)
ROT_DIMS = (3, 4, 5)
BASE_DIMS = (6, 7)
GRIP_DIM = 8


class MotionHierError(Exception):
    """Base class for errors raised by this package."""


@dataclass(frozen=True)
class ActionVector:
    """One low-level robot action: deltas for all 9 motion dims plus a
    termination flag.  When ``terminate`` is set all motion components
    must be zero."""

    dpos: tuple[float, float, float] = (0.0, 0.0, 0.0)
    drot: tuple[float, float, float] = (0.0, 0.0, 0.0)
    dbase: tuple[float, float] = (0.0, 0.0)
    dgrip: float = 0.0
    terminate: bool = False

    def __post_init__(self):
        vals = (*self.dpos, *self.drot, *self.dbase, self.dgrip)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite action components: {vals}")
        if not -1.0 <= self.dgrip <= 1.0:
            raise ValueError(f"dgrip out of [-1, 1]: {self.dgrip}")
        if self.terminate and any(v != 0.0 for v in vals):
            raise ValueError("terminate actions must have zero motion")

    def to_array(self) -> np.ndarray:
        return np.array(
            [*self.dpos, *self.drot, *self.dbase, self.dgrip], dtype=np.float64
        )

    @staticmethod
    def from_array(v, terminate: bool = False) -> "ActionVector":
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (N_DIMS,):
            raise ValueError(f"expected {N_DIMS} dims, got shape {v.shape}")
        return ActionVector(
            dpos=(float(v[0]), float(v[1]), float(v[2])),
            drot=(float(v[3]), float(v[4]), float(v[5])),
            dbase=(float(v[6]), float(v[7])),
            dgrip=float(v[8]),
            terminate=terminate,
        )

    @staticmethod
    def terminate_action() -> "ActionVector":
        return ActionVector(terminate=True)


@dataclass(frozen=True)
class TaskDescription:
    """High-level task: an identifier into the registered suite, the natural
    language instruction, and named object/target parameters."""

    task_id: str
    text: str
    params: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.text:
            raise ValueError("task text must be nonempty")


@dataclass(frozen=True)
class Observation:
    """Low-dimensional state-vector observation (no images).

    ``ee_pose`` is position (3) + axis-angle orientation (3);
    ``object_poses`` is an ordered list of (object id, 6-real pose);
    ``articulation`` maps joint names to scalar values (drawer extension).
    """

    ee_pose: tuple[float, ...]
    grip_state: float
    object_poses: tuple[tuple[str, tuple[float, ...]], ...]
    articulation: dict[str, float] = field(default_factory=dict)
    step_index: int = 0

    def __post_init__(self):
        if len(self.ee_pose) != 6:
            raise ValueError("ee_pose must have 6 components")
        if not all(math.isfinite(v) for v in self.ee_pose):
            raise ValueError("non-finite ee_pose")
        for oid, pose in self.object_poses:
            if len(pose) != 6 or not all(math.isfinite(v) for v in pose):
                raise ValueError(f"bad pose for object {oid!r}")
        if not 0.0 <= self.grip_state <= 1.0:
            raise ValueError(f"grip_state out of [0, 1]: {self.grip_state}")
        if self.step_index < 0:
            raise ValueError("step_index must be >= 0")


@dataclass(frozen=True)
class Step:
    """One timestep: observation, (optional) motion label, action, and the
    scripted expert's stage index."""

    obs: Observation
    action: ActionVector
    stage: int = 0
    motion: "object | None" = None  # labeler.LanguageMotion once labeled


@dataclass(frozen=True)
class Trajectory:
    task: TaskDescription
    steps: tuple[Step, ...]
    success: bool = True

    def __post_init__(self):
        if len(self.steps) < 1:
            raise ValueError("trajectory must have at least one step")
        stages = [s.stage for s in self.steps]
        if any(b < a for a, b in zip(stages, stages[1:])):
            raise ValueError("stage indices must be nondecreasing")

    @property
    def length(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class Dataset:
    """A list of demonstration trajectories (each carries its task)."""

    trajectories: tuple[Trajectory, ...] = ()

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def n_steps(self) -> int:
        return sum(t.length for t in self.trajectories)

    def actions_array(self) -> np.ndarray:
        """All actions stacked into an (n_steps, 9) array."""
        if not self.trajectories:
            return np.zeros((0, N_DIMS))
        return np.stack(
            [s.action.to_array() for t in self.trajectories for s in t.steps]
        )


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic RNG stream.

    Uses numpy's PCG64 generator, which produces identical streams for a
    given 64-bit seed on every platform numpy supports.
    """
    return np.random.Generator(np.random.PCG64(seed))
