"""Shared deterministic policy build for the console end-to-end tests.

Both the server fixture and the replay verifier rebuild the identical
(bitwise) policy from the same seeds, so a trace saved through the server
can be replayed offline against a fresh build.
"""

from motionhier.codec import fit_binspec
from motionhier.labeler import label_dataset, motion_counts
from motionhier.model import MotionVocab, PolicySet
from motionhier.sim import DEFAULT_SUITE, generate_dataset
from motionhier.train import TrainConfig, train


def build_policy() -> PolicySet:
    raw = generate_dataset(DEFAULT_SUITE, episodes_per_task=3, noise=0.05, seed=0)
    labeled, _ = label_dataset(raw)
    vocab = MotionVocab.from_counts(motion_counts(labeled))
    p = PolicySet("rt_h", vocab, fit_binspec(labeled), DEFAULT_SUITE, seed=0)
    p, _ = train(p, labeled, TrainConfig(epochs=10, lr=0.1, warmup_steps=50, seed=0))
    return p
