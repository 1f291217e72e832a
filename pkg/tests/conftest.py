"""Shared fixtures: a small labeled dataset and a quickly trained policy.

Everything here is deterministic and session-scoped so the expensive bits
(simulation + a short training run) happen once per pytest invocation.
"""

import pytest

from motionhier.codec import fit_binspec
from motionhier.labeler import LabelConfig, label_dataset, motion_counts
from motionhier.model import MotionVocab, PolicySet
from motionhier.sim import DEFAULT_SUITE, generate_dataset
from motionhier.train import TrainConfig, train


@pytest.fixture(scope="session")
def tiny_dataset():
    """4 tasks x 3 expert episodes, seed 0 (unlabeled)."""
    return generate_dataset(DEFAULT_SUITE, episodes_per_task=3, noise=0.05, seed=0)


@pytest.fixture(scope="session")
def label_config(tiny_dataset):
    return LabelConfig.from_dataset(tiny_dataset)


@pytest.fixture(scope="session")
def tiny_labeled(tiny_dataset, label_config):
    labeled, _ = label_dataset(tiny_dataset, label_config)
    return labeled


@pytest.fixture(scope="session")
def tiny_vocab(tiny_labeled):
    return MotionVocab.from_counts(motion_counts(tiny_labeled))


@pytest.fixture(scope="session")
def tiny_binspec(tiny_labeled):
    return fit_binspec(tiny_labeled)


@pytest.fixture(scope="session")
def tiny_policy(tiny_labeled, tiny_vocab, tiny_binspec):
    """An rt_h policy trained briefly on the tiny dataset.

    Not meant to be good -- just trained enough that rollouts, traces and
    the service have realistic inputs.
    """
    p = PolicySet("rt_h", tiny_vocab, tiny_binspec, task_ids=DEFAULT_SUITE, seed=0)
    cfg = TrainConfig(epochs=10, lr=0.1, warmup_steps=50, seed=0)
    p, _ = train(p, tiny_labeled, cfg)
    return p
