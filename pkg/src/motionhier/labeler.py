"""Automated language-motion labeling.

Each of the 9 action dimensions maps to a pair of direction words; small
dimensions are thresholded away and the survivors are composed into a
short phrase ordered by normalized magnitude, e.g.
"move arm forward and close gripper".
"""

from __future__ import annotations

import difflib
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from .core import ActionVector, Dataset, MotionHierError, N_DIMS

# (positive word, negative word) per dim, in canonical dim order.
DIM_WORDS = (
    ("forward", "backward"),       # x
    ("left", "right"),             # y
    ("up", "down"),                # z
    ("right", "left"),             # rx
    ("up", "down"),                # ry
    ("clockwise", "counterclockwise"),  # rz
    ("left", "right"),             # base turn
    ("forward", "backward"),       # base move
    ("close", "open"),             # gripper
)

# Axis groups: dims within a group share one clause of the rendered string.
GROUPS = {
    "pos": (0, 1, 2),
    "rot": (3, 4, 5),
    "base": (6, 7),
    "grip": (8,),
}
GROUP_OF_DIM = {d: g for g, dims in GROUPS.items() for d in dims}

STOP = "stop"
TERMINATE = "terminate"


class MotionParseError(MotionHierError):
    def __init__(self, message, suggestions=()):
        super().__init__(message)
        self.suggestions = tuple(suggestions)


@dataclass(frozen=True)
class LanguageMotion:
    """A structured language motion: signed-axis terms in magnitude order,
    or one of the specials ("stop", "terminate")."""

    terms: tuple[tuple[int, int], ...] = ()  # (dim index, sign in {+1, -1})
    special: str | None = None

    def __post_init__(self):
        if self.special is not None:
            if self.special not in (STOP, TERMINATE):
                raise ValueError(f"unknown special {self.special!r}")
            if self.terms:
                raise ValueError("special motions carry no terms")
        elif not self.terms:
            raise ValueError("non-special motion needs at least one term")
        for dim, sign in self.terms:
            if not (0 <= dim < N_DIMS and sign in (-1, 1)):
                raise ValueError(f"bad term ({dim}, {sign})")

    @property
    def canonical(self) -> str:
        return render_motion(self)

    def dims(self) -> tuple[int, ...]:
        return tuple(d for d, _ in self.terms)


def stop_motion() -> LanguageMotion:
    return LanguageMotion(special=STOP)


def terminate_motion() -> LanguageMotion:
    return LanguageMotion(special=TERMINATE)


def _default_scales() -> np.ndarray:
    # Tuned to the simulator's per-step caps: positions move up to 0.05
    # units/step, rotations up to 0.2 rad/step, gripper commands are in
    # [-1, 1].  Base dims share the position scale (always zero in sim).
    return np.array([0.05, 0.05, 0.05, 0.2, 0.2, 0.2, 0.05, 0.05, 1.0])


@dataclass(frozen=True)
class LabelConfig:
    """Normalization scales and thresholds for the labeling procedure.

    ``thresholds`` are in normalized units per axis group; a dim survives
    when |value / scale| >= threshold of its group.
    """

    scales: tuple[float, ...] = field(
        default_factory=lambda: tuple(_default_scales())
    )
    thresholds: dict[str, float] = field(
        default_factory=lambda: {"pos": 0.5, "rot": 0.5, "base": 0.5, "grip": 0.5}
    )
    max_terms_per_group: int = 2
    max_groups: int = 2

    def __post_init__(self):
        if len(self.scales) != N_DIMS:
            raise ValueError(f"need {N_DIMS} scales")
        if any(s <= 0 for s in self.scales):
            raise ValueError("scales must be positive")
        if any(t <= 0 for t in self.thresholds.values()):
            raise ValueError("thresholds must be positive")

    @staticmethod
    def from_dataset(d: Dataset, **kwargs) -> "LabelConfig":
        """Scales from per-dim standard deviations of the dataset actions.

        Constant dims keep the built-in default scale so normalization
        stays well defined.
        """
        actions = d.actions_array()
        defaults = _default_scales()
        if len(actions) == 0:
            return LabelConfig(**kwargs)
        std = actions.std(axis=0)
        scales = np.where(std > 1e-12, std, defaults)
        return LabelConfig(scales=tuple(float(s) for s in scales), **kwargs)


def label_action(a: ActionVector, cfg: LabelConfig | None = None) -> LanguageMotion:
    """Label one action with its language motion.

    Normalize each dim by its scale, drop dims below the group threshold,
    keep the strongest terms of the strongest groups, and order everything
    by descending normalized magnitude.  Deterministic and stateless.
    """
    cfg = cfg or LabelConfig()
    if a.terminate:
        return terminate_motion()
    normalized = a.to_array() / np.asarray(cfg.scales)

    surviving: dict[str, list[int]] = {}
    for dim in range(N_DIMS):
        group = GROUP_OF_DIM[dim]
        if abs(normalized[dim]) >= cfg.thresholds[group]:
            surviving.setdefault(group, []).append(dim)
    if not surviving:
        return stop_motion()

    # Ties break on the fixed axis order (ascending dim index), which the
    # secondary sort key provides for free via a stable sort.
    for group, dims in surviving.items():
        dims.sort(key=lambda d: -abs(normalized[d]))
        surviving[group] = dims[: cfg.max_terms_per_group]

    ordered_groups = sorted(
        surviving,
        key=lambda g: (-max(abs(normalized[d]) for d in surviving[g]),
                       min(surviving[g])),
    )[: cfg.max_groups]

    terms = tuple(
        (dim, 1 if normalized[dim] > 0 else -1)
        for group in ordered_groups
        for dim in surviving[group]
    )
    return LanguageMotion(terms=terms)


def _word(dim: int, sign: int) -> str:
    return DIM_WORDS[dim][0 if sign > 0 else 1]


def render_motion(z: LanguageMotion) -> str:
    if z.special is not None:
        return z.special
    clauses = []
    i = 0
    while i < len(z.terms):
        dim, sign = z.terms[i]
        group = GROUP_OF_DIM[dim]
        dims_here = [(dim, sign)]
        while i + 1 < len(z.terms) and GROUP_OF_DIM[z.terms[i + 1][0]] == group:
            i += 1
            dims_here.append(z.terms[i])
        if group == "pos":
            clauses.append("move arm " + " and ".join(_word(d, s) for d, s in dims_here))
        elif group == "rot":
            clauses.append("rotate arm " + " and ".join(_word(d, s) for d, s in dims_here))
        elif group == "grip":
            clauses.append(f"{_word(dim, sign)} gripper")
        else:  # base
            parts = []
            for d, s in dims_here:
                verb = "turn" if d == 6 else "move"
                parts.append(f"{verb} base {_word(d, s)}")
            clauses.append(" and ".join(parts))
        i += 1
    return " and ".join(clauses)


_POS_WORDS = {w: (d, s) for d in (0, 1, 2) for s, w in ((1, DIM_WORDS[d][0]), (-1, DIM_WORDS[d][1]))}
_ROT_WORDS = {w: (d, s) for d in (3, 4, 5) for s, w in ((1, DIM_WORDS[d][0]), (-1, DIM_WORDS[d][1]))}

_KNOWN_CHUNKS = (
    [STOP, TERMINATE, "close gripper", "open gripper"]
    + [f"move arm {w}" for w in _POS_WORDS]
    + [f"rotate arm {w}" for w in _ROT_WORDS]
    + [f"turn base {w}" for w in ("left", "right")]
    + [f"move base {w}" for w in ("forward", "backward")]
)


def _suggest(chunk: str) -> list[str]:
    matches = difflib.get_close_matches(chunk, _KNOWN_CHUNKS, n=3, cutoff=0.3)
    return matches or _KNOWN_CHUNKS[:3]


def parse_motion(s: str) -> LanguageMotion:
    """Inverse of the rendering grammar.

    Raises :class:`MotionParseError` (with nearest-vocabulary suggestions)
    on anything the grammar cannot produce.
    """
    text = s.strip()
    if text == STOP:
        return stop_motion()
    if text == TERMINATE:
        return terminate_motion()
    if not text:
        raise MotionParseError("empty motion string", _suggest(""))

    terms: list[tuple[int, int]] = []
    mode: str | None = None  # current bare-word group: "pos" or "rot"
    for chunk in text.split(" and "):
        chunk = chunk.strip()
        if chunk.startswith("move arm "):
            mode = "pos"
            word = chunk[len("move arm "):]
            term = _POS_WORDS.get(word)
        elif chunk.startswith("rotate arm "):
            mode = "rot"
            word = chunk[len("rotate arm "):]
            term = _ROT_WORDS.get(word)
        elif chunk in ("close gripper", "open gripper"):
            mode = None
            term = (8, 1 if chunk.startswith("close") else -1)
        elif chunk.startswith("turn base "):
            mode = None
            word = chunk[len("turn base "):]
            term = {"left": (6, 1), "right": (6, -1)}.get(word)
        elif chunk.startswith("move base "):
            mode = None
            word = chunk[len("move base "):]
            term = {"forward": (7, 1), "backward": (7, -1)}.get(word)
        elif mode == "pos" and chunk in _POS_WORDS:
            term = _POS_WORDS[chunk]
        elif mode == "rot" and chunk in _ROT_WORDS:
            term = _ROT_WORDS[chunk]
        else:
            raise MotionParseError(
                f"cannot parse {chunk!r} in motion {s!r}; did you mean: "
                + ", ".join(_suggest(chunk)),
                _suggest(chunk),
            )
        if term is None:
            raise MotionParseError(
                f"cannot parse {chunk!r} in motion {s!r}; did you mean: "
                + ", ".join(_suggest(chunk)),
                _suggest(chunk),
            )
        if term[0] in (d for d, _ in terms):
            raise MotionParseError(f"duplicate axis in motion {s!r}")
        terms.append(term)
    z = LanguageMotion(terms=tuple(terms))
    if z.canonical != text:
        # e.g. group split across non-adjacent clauses
        raise MotionParseError(
            f"{s!r} is not a canonical motion (canonical form: {z.canonical!r})"
        )
    return z


def label_dataset(
    d: Dataset, cfg: LabelConfig | None = None
) -> tuple[Dataset, Counter]:
    """Label every step of every trajectory; returns the labeled dataset and
    a vocabulary Counter of canonical motion strings."""
    cfg = cfg or LabelConfig()
    vocab: Counter = Counter()
    new_trajs = []
    for traj in d.trajectories:
        steps = []
        for step in traj.steps:
            z = label_action(step.action, cfg)
            vocab[z.canonical] += 1
            steps.append(replace(step, motion=z))
        new_trajs.append(replace(traj, steps=tuple(steps)))
    return Dataset(trajectories=tuple(new_trajs)), vocab


def motion_counts(d: Dataset) -> Counter:
    """Vocabulary Counter of an already-labeled dataset."""
    vocab: Counter = Counter()
    for traj in d.trajectories:
        for step in traj.steps:
            if step.motion is None:
                raise MotionHierError("dataset is not labeled (step without motion)")
            vocab[step.motion.canonical] += 1
    return vocab


def vocabulary_report(vocab: Counter) -> str:
    """Aligned text table of motion -> count, most common first."""
    if not vocab:
        return "(empty vocabulary)\n"
    width = max(len(m) for m in vocab)
    lines = [f"{'motion':<{width}}  count", f"{'-' * width}  -----"]
    for motion, count in vocab.most_common():
        lines.append(f"{motion:<{width}}  {count}")
    return "\n".join(lines) + "\n"
