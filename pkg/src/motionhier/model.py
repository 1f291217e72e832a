"""Toy-scale policy networks for the language-motion hierarchy.

One shared 2-layer perceptron encoder plus two heads: a motion classifier
(the high-level policy) and per-dim action-token classifiers (the
low-level policy).  Five variants:

- ``rt_h``    two queries; the motion conditions the encoder input through
              a compositional term featurization (textually similar
              motions share features).
- ``joint``   one forward pass; the motion conditions only the action
              head ("decoder side"), not the encoder.
- ``flat``    action head only, no motion anywhere.
- ``cluster`` hierarchy over k-means cluster ids of normalized actions.
- ``onehot``  hierarchy over frequency-rank integer ids with a per-id
              embedding table (no sharing between similar motions).
"""

from __future__ import annotations

import difflib
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .codec import BinSpec
from .core import MotionHierError, N_DIMS, Observation, TaskDescription, seeded_rng
from .labeler import LanguageMotion, STOP, TERMINATE, parse_motion

VARIANTS = ("rt_h", "joint", "flat", "cluster", "onehot")

# Sizes of the toy networks; kept deliberately small for CPU training.
HIDDEN = 128
D_TASK = 8
D_MOTION = 16
MAX_OBJECT_SLOTS = 3
MAX_JOINT_SLOTS = 1
# per object slot: present, pos(3), pos-ee(3), rotvec(3)
OBS_FEATURES = 6 + 1 + MAX_OBJECT_SLOTS * 10 + MAX_JOINT_SLOTS * 2 + 1
N_TOKENS = 256
MOTION_FEATURES = N_DIMS + 2  # signed per-dim indicator + stop/terminate flags


class ModelError(MotionHierError):
    pass


class UnknownMotionError(ModelError):
    def __init__(self, motion: str, suggestions):
        super().__init__(
            f"motion {motion!r} is not in the model vocabulary; nearest: "
            + ", ".join(suggestions)
        )
        self.suggestions = tuple(suggestions)


# ---------------------------------------------------------------------------
# Vocabulary


@dataclass(frozen=True)
class MotionVocab:
    """Canonical motion strings ordered by descending training frequency
    (the same ordering provides the one-hot ablation's integer labels)."""

    motions: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.motions)) != len(self.motions):
            raise ValueError("duplicate motions in vocabulary")
        for special in (STOP, TERMINATE):
            if special not in self.motions:
                raise ValueError(f"vocabulary must include {special!r}")

    def __len__(self):
        return len(self.motions)

    def index(self, motion: str) -> int:
        try:
            return self.motions.index(motion)
        except ValueError:
            raise UnknownMotionError(
                motion, difflib.get_close_matches(motion, self.motions, n=3, cutoff=0.0)
            ) from None

    @staticmethod
    def from_counts(counts) -> "MotionVocab":
        # Stable order: frequency desc, then string, with specials appended
        # if the data never produced them.
        ordered = sorted(counts, key=lambda m: (-counts[m], m))
        for special in (STOP, TERMINATE):
            if special not in ordered:
                ordered.append(special)
        return MotionVocab(motions=tuple(ordered))


def motion_features(z: LanguageMotion) -> np.ndarray:
    """Compositional featurization: signed indicator per motion dim plus
    special flags.  Shared structure across similar motions is the point."""
    v = np.zeros(MOTION_FEATURES)
    if z.special == STOP:
        v[N_DIMS] = 1.0
    elif z.special == TERMINATE:
        v[N_DIMS + 1] = 1.0
    else:
        for rank, (dim, sign) in enumerate(z.terms):
            v[dim] = sign * (1.0 if rank == 0 else 0.5)
    return v


# ---------------------------------------------------------------------------
# Observation featurization


def featurize_observation(obs: Observation) -> np.ndarray:
    f = np.zeros(OBS_FEATURES)
    ee = np.array(obs.ee_pose)
    f[0:6] = ee
    f[6] = obs.grip_state
    i = 7
    for slot in range(MAX_OBJECT_SLOTS):
        if slot < len(obs.object_poses):
            _, pose = obs.object_poses[slot]
            pose = np.array(pose)
            f[i] = 1.0
            f[i + 1 : i + 4] = pose[:3]
            f[i + 4 : i + 7] = pose[:3] - ee[:3]
            f[i + 7 : i + 10] = pose[3:]
        i += 10
    joints = sorted(obs.articulation.items())
    for slot in range(MAX_JOINT_SLOTS):
        if slot < len(joints):
            f[i] = 1.0
            f[i + 1] = joints[slot][1]
        i += 2
    f[i] = obs.step_index / 50.0
    return f


# ---------------------------------------------------------------------------
# K-means (cluster ablation support)


@dataclass(frozen=True)
class ClusterTable:
    centers: np.ndarray  # (k, 9) in normalized action units
    mean: np.ndarray
    std: np.ndarray

    @property
    def k(self) -> int:
        return len(self.centers)

    def assign(self, actions: np.ndarray) -> np.ndarray:
        """Nearest-center ids for raw (n, 9) actions."""
        normed = (np.atleast_2d(actions) - self.mean) / self.std
        d = ((normed[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=2)
        return d.argmin(axis=1)

    def sse(self, actions: np.ndarray) -> float:
        normed = (np.atleast_2d(actions) - self.mean) / self.std
        ids = self.assign(actions)
        return float(((normed - self.centers[ids]) ** 2).sum())


def _kmeans_once(x: np.ndarray, k: int, rng, iters: int = 50):
    n = len(x)
    # Greedy farthest-point seeding from a random start.
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        centers[j] = x[int(d2.argmax())]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    ids = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        d = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_ids = d.argmin(axis=1)
        if np.array_equal(new_ids, ids) and _ > 0:
            break
        ids = new_ids
        for j in range(k):
            members = x[ids == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    sse = float(((x - centers[ids]) ** 2).sum())
    return centers, sse


def cluster_fit(dataset, k: int, seed: int, restarts: int = 5) -> ClusterTable:
    """Deterministic seeded k-means over dataset-normalized actions."""
    if k < 1:
        raise ModelError(f"k must be >= 1, got {k}")
    actions = dataset.actions_array()
    distinct = np.unique(actions, axis=0)
    if len(distinct) < k:
        raise ModelError(
            f"k={k} exceeds the {len(distinct)} distinct actions in the dataset"
        )
    mean = actions.mean(axis=0)
    std = actions.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    x = (actions - mean) / std
    rng = seeded_rng(seed)
    best = None
    for _ in range(restarts):
        centers, sse = _kmeans_once(x, k, rng)
        if best is None or sse < best[1]:
            best = (centers, sse)
    return ClusterTable(centers=best[0], mean=mean, std=std)


# ---------------------------------------------------------------------------
# Policy networks


def _init_params(variant, n_motions, n_tasks, seed, hidden, d_task, d_motion):
    rng = seeded_rng(seed)

    def dense(n_in, n_out):
        return rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_in, n_out))

    conditions_encoder = variant in ("rt_h", "cluster", "onehot")
    enc_in = OBS_FEATURES + d_task + (d_motion if conditions_encoder else 0)
    head_l_in = hidden + (d_motion if variant == "joint" else 0)
    params = {
        "task_emb": rng.normal(0.0, 0.1, (n_tasks, d_task)),
        "W1": dense(enc_in, hidden),
        "b1": np.zeros(hidden),
        "W2": dense(hidden, hidden),
        "b2": np.zeros(hidden),
        "Wl": dense(head_l_in, N_DIMS * N_TOKENS + 1),
        "bl": np.zeros(N_DIMS * N_TOKENS + 1),
    }
    if variant != "flat":
        params["Wh"] = dense(hidden, n_motions)
        params["bh"] = np.zeros(n_motions)
    if variant in ("rt_h", "joint"):
        params["Wm"] = rng.normal(0.0, 0.3, (MOTION_FEATURES, d_motion))
    elif variant in ("cluster", "onehot"):
        params["motion_table"] = rng.normal(0.0, 0.3, (n_motions, d_motion))
    return params


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class PolicySet:
    """Trained (or freshly initialized) parameters for one variant, bundled
    with its tokenizer codec, motion vocabulary, and task suite."""

    def __init__(
        self,
        variant: str,
        vocab: MotionVocab,
        binspec: BinSpec,
        task_ids: tuple[str, ...],
        seed: int = 0,
        cluster: ClusterTable | None = None,
        params: dict | None = None,
        meta: dict | None = None,
        hidden: int = HIDDEN,
        d_task: int = D_TASK,
        d_motion: int = D_MOTION,
    ):
        if variant not in VARIANTS:
            raise ModelError(f"unknown variant {variant!r}; one of {VARIANTS}")
        if variant == "cluster" and cluster is None:
            raise ModelError("cluster variant requires a fitted ClusterTable")
        self.variant = variant
        self.vocab = vocab
        self.binspec = binspec
        self.task_ids = tuple(task_ids)
        self.cluster = cluster
        self.seed = seed
        self.meta = dict(meta or {})
        self.hidden = hidden
        self.d_task = d_task
        self.d_motion = d_motion
        self._phi_cache = None
        n_motions = cluster.k if variant == "cluster" else len(vocab)
        self.n_motions = n_motions
        self.params = params if params is not None else _init_params(
            variant, n_motions, len(self.task_ids), seed, hidden, d_task, d_motion
        )

    # -- bookkeeping

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def task_index(self, g: TaskDescription) -> int:
        try:
            return self.task_ids.index(g.task_id)
        except ValueError:
            raise ModelError(
                f"task {g.task_id!r} not in model task set {self.task_ids}"
            ) from None

    def motion_id(self, z) -> int:
        """Vocabulary/cluster id for a conditioning motion."""
        if self.variant == "cluster":
            if not isinstance(z, (int, np.integer)):
                raise ModelError("cluster variant conditions on integer ids")
            if not 0 <= int(z) < self.n_motions:
                raise ModelError(f"cluster id {z} out of range [0, {self.n_motions})")
            return int(z)
        if isinstance(z, (int, np.integer)):
            if not 0 <= int(z) < len(self.vocab):
                raise ModelError(f"motion id {z} out of range")
            return int(z)
        if isinstance(z, str):
            z = parse_motion(z)
        return self.vocab.index(z.canonical)

    def motion_feature_matrix(self) -> np.ndarray:
        """(V, MOTION_FEATURES) compositional features for the whole
        vocabulary; cached (only meaningful for rt_h/joint)."""
        if self._phi_cache is None:
            self._phi_cache = np.stack(
                [motion_features(parse_motion(m)) for m in self.vocab.motions]
            )
        return self._phi_cache

    def _motion_embedding(self, ids: np.ndarray) -> np.ndarray:
        if self.variant in ("rt_h", "joint"):
            return self.motion_feature_matrix()[ids] @ self.params["Wm"]
        return self.params["motion_table"][ids]

    def _embed_any_motion(self, z) -> np.ndarray:
        """(1, d_motion) conditioning embedding.  The compositional
        variants (rt_h, joint) accept any grammar-parseable motion, in or
        out of vocabulary; the table variants require a known id."""
        if self.variant in ("rt_h", "joint"):
            if isinstance(z, (int, np.integer)):
                feats = self.motion_feature_matrix()[int(z)]
            else:
                if isinstance(z, str):
                    z = parse_motion(z)
                feats = motion_features(z)
            return (feats @ self.params["Wm"])[None, :]
        return self._motion_embedding(np.array([self.motion_id(z)]))

    # -- forward passes (batched internals, public single-input entry points)

    def _encode(self, feats, task_idx, slot=None):
        """Encoder hidden state; ``slot`` is the (n, d_motion) motion
        embedding for encoder-conditioned variants (None means the empty
        slot used by the motion query)."""
        parts = [np.atleast_2d(feats), self.params["task_emb"][np.atleast_1d(task_idx)]]
        if self.variant in ("rt_h", "cluster", "onehot"):
            n = len(np.atleast_2d(feats))
            parts.append(np.zeros((n, self.d_motion)) if slot is None else slot)
        x = np.concatenate(parts, axis=1)
        h1 = np.tanh(x @ self.params["W1"] + self.params["b1"])
        h2 = np.tanh(h1 @ self.params["W2"] + self.params["b2"])
        return h2

    def motion_logits(self, feats, task_idx):
        if self.variant == "flat":
            raise ModelError("flat variant has no motion query")
        h = self._encode(feats, task_idx, None)
        return h @ self.params["Wh"] + self.params["bh"]

    def action_logits(self, feats, task_idx, motion_ids):
        """Per-dim token logits (n, 9, 256) and terminate logits (n,),
        conditioned on in-vocabulary motion ids."""
        memb = None
        if self.variant != "flat":
            memb = self._motion_embedding(np.atleast_1d(motion_ids))
        return self._action_logits_emb(feats, task_idx, memb)

    def _action_logits_emb(self, feats, task_idx, memb):
        if self.variant == "joint":
            h = self._encode(feats, task_idx)
            inp = np.concatenate([h, memb], axis=1)
        elif self.variant == "flat":
            inp = self._encode(feats, task_idx)
        else:
            inp = self._encode(feats, task_idx, memb)
        out = inp @ self.params["Wl"] + self.params["bl"]
        tok = out[:, : N_DIMS * N_TOKENS].reshape(-1, N_DIMS, N_TOKENS)
        term = out[:, -1]
        return tok, term

    def forward_h(self, o: Observation, g: TaskDescription) -> np.ndarray:
        """Probability vector over the motion vocabulary."""
        logits = self.motion_logits(featurize_observation(o), self.task_index(g))
        return softmax(logits)[0]

    def forward_l(self, o: Observation, g: TaskDescription, z):
        """Per-dim token distributions (9, 256) and terminate probability."""
        memb = self._embed_any_motion(z) if self.variant != "flat" else None
        tok, term = self._action_logits_emb(
            featurize_observation(o), self.task_index(g), memb
        )
        return softmax(tok, axis=-1)[0], float(1.0 / (1.0 + np.exp(-term[0])))

    def forward_joint(self, o: Observation, g: TaskDescription):
        """Single-pass motion + action prediction; the action is
        conditioned on the argmax motion."""
        if self.variant != "joint":
            raise ModelError("forward_joint requires the joint variant")
        feats = featurize_observation(o)
        ti = self.task_index(g)
        mp = softmax(self.motion_logits(feats, ti))[0]
        mid = int(mp.argmax())
        tok, term = self.action_logits(feats, ti, np.array([mid]))
        return mp, softmax(tok, axis=-1)[0], float(1.0 / (1.0 + np.exp(-term[0])))

    def topk_motions(self, o: Observation, g: TaskDescription, k: int = 3):
        """Top-k (motion, probability) pairs, descending (the desk analog of
        beam-searching the motion query)."""
        if k > self.n_motions:
            raise ModelError(f"k={k} exceeds vocabulary size {self.n_motions}")
        probs = (
            self.forward_joint(o, g)[0]
            if self.variant == "joint"
            else self.forward_h(o, g)
        )
        order = np.argsort(-probs, kind="stable")[:k]
        if self.variant == "cluster":
            return [(int(i), float(probs[i])) for i in order]
        return [(self.vocab.motions[i], float(probs[i])) for i in order]

    def predict_action(self, o: Observation, g: TaskDescription, z):
        """Greedy decoded ActionVector given a conditioning motion (ignored
        by the flat variant)."""
        from .codec import TokenizedAction, detokenize

        dists, term_p = self.forward_l(o, g, z)
        if term_p > 0.5:
            from .core import ActionVector

            return ActionVector.terminate_action()
        tokens = tuple(int(t) for t in dists.argmax(axis=-1))
        return detokenize(TokenizedAction(tokens=tokens), self.binspec)

    # -- persistence

    CHECKPOINT_VERSION = 1

    def save(self, path) -> None:
        meta = {
            "format": "motionhier-checkpoint",
            "version": self.CHECKPOINT_VERSION,
            "variant": self.variant,
            "vocab": list(self.vocab.motions),
            "task_ids": list(self.task_ids),
            "binspec": self.binspec.to_json(),
            "seed": self.seed,
            "meta": self.meta,
            "has_cluster": self.cluster is not None,
            "dims": {
                "hidden": self.hidden,
                "d_task": self.d_task,
                "d_motion": self.d_motion,
            },
        }
        arrays = {f"param_{k}": v for k, v in self.params.items()}
        if self.cluster is not None:
            arrays["cluster_centers"] = self.cluster.centers
            arrays["cluster_mean"] = self.cluster.mean
            arrays["cluster_std"] = self.cluster.std
        np.savez(
            path,
            meta_json=np.frombuffer(
                json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8
            ),
            **arrays,
        )

    @staticmethod
    def load(path) -> "PolicySet":
        try:
            data = np.load(path)
        except (ValueError, OSError) as e:
            raise ModelError(f"{path}: not a checkpoint file: {e}") from e
        with data:
            meta = json.loads(bytes(data["meta_json"].tobytes()).decode())
            if meta.get("format") != "motionhier-checkpoint":
                raise ModelError(f"{path}: not a checkpoint file")
            if meta["version"] != PolicySet.CHECKPOINT_VERSION:
                raise ModelError(
                    f"{path}: checkpoint version {meta['version']} != "
                    f"{PolicySet.CHECKPOINT_VERSION}"
                )
            params = {
                k[len("param_"):]: data[k] for k in data.files if k.startswith("param_")
            }
            cluster = None
            if meta["has_cluster"]:
                cluster = ClusterTable(
                    centers=data["cluster_centers"],
                    mean=data["cluster_mean"],
                    std=data["cluster_std"],
                )
        return PolicySet(
            variant=meta["variant"],
            vocab=MotionVocab(motions=tuple(meta["vocab"])),
            binspec=BinSpec.from_json(meta["binspec"]),
            task_ids=tuple(meta["task_ids"]),
            seed=meta["seed"],
            cluster=cluster,
            params=params,
            meta=meta["meta"],
            hidden=meta["dims"]["hidden"],
            d_task=meta["dims"]["d_task"],
            d_motion=meta["dims"]["d_motion"],
        )

    def config_hash(self) -> str:
        payload = json.dumps(
            {
                "variant": self.variant,
                "vocab": list(self.vocab.motions),
                "task_ids": list(self.task_ids),
                "binspec": self.binspec.to_json(),
                "seed": self.seed,
                "dims": [self.hidden, self.d_task, self.d_motion],
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def nearest_vocab_motion(vocab: MotionVocab, z: LanguageMotion) -> str:
    """Vocabulary motion closest to ``z`` in the compositional feature
    space (deterministic; ties break toward the lower index)."""
    target = motion_features(z)
    feats = np.stack([motion_features(parse_motion(m)) for m in vocab.motions])
    return vocab.motions[int(np.argmin(np.linalg.norm(feats - target, axis=1)))]


# Module-level aliases matching the operation names used elsewhere.

def forward_h(p: PolicySet, o: Observation, g: TaskDescription):
    return p.forward_h(o, g)


def forward_l(p: PolicySet, o: Observation, g: TaskDescription, z):
    return p.forward_l(o, g, z)


def forward_joint(p: PolicySet, o: Observation, g: TaskDescription):
    return p.forward_joint(o, g)


def topk_motions(p: PolicySet, o: Observation, g: TaskDescription, k: int = 3):
    return p.topk_motions(o, g, k)
