"""Action tokenization: 256 uniform bins per motion dimension.

Bins are left-closed, the last bin is right-closed, and out-of-range values
clamp to bins 0/255.  Detokenization returns bin centers, so the round-trip
error is at most half a bin width per dim.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import ActionVector, Dataset, MotionHierError, N_DIMS

DEFAULT_BINS = 256


class CodecError(MotionHierError):
    pass


@dataclass(frozen=True)
class BinSpec:
    lo: tuple[float, ...]
    hi: tuple[float, ...]
    bins: int = DEFAULT_BINS

    def __post_init__(self):
        if len(self.lo) != N_DIMS or len(self.hi) != N_DIMS:
            raise ValueError(f"need {N_DIMS} bounds per side")
        if any(l >= h for l, h in zip(self.lo, self.hi)):
            raise ValueError("lo must be < hi for every dim")
        if self.bins < 2:
            raise ValueError("need at least 2 bins")

    def to_json(self):
        return {"lo": list(self.lo), "hi": list(self.hi), "bins": self.bins}

    @staticmethod
    def from_json(d) -> "BinSpec":
        return BinSpec(lo=tuple(d["lo"]), hi=tuple(d["hi"]), bins=d["bins"])


@dataclass(frozen=True)
class TokenizedAction:
    tokens: tuple[int, ...]
    terminate: bool = False

    def __post_init__(self):
        if len(self.tokens) != N_DIMS:
            raise ValueError(f"need {N_DIMS} tokens")


def fit_binspec(
    d: Dataset, coverage: float = 0.999, bins: int = DEFAULT_BINS
) -> BinSpec:
    """Per-dim bounds at the symmetric quantiles covering ``coverage`` of the
    dataset actions, widened by epsilon for (near-)constant dims."""
    if len(d) == 0:
        raise CodecError("cannot fit a BinSpec on an empty dataset")
    actions = d.actions_array()
    q = (1.0 - coverage) / 2.0
    lo = np.quantile(actions, q, axis=0)
    hi = np.quantile(actions, 1.0 - q, axis=0)
    eps = 1e-6
    for i in range(N_DIMS):
        if hi[i] - lo[i] < eps:
            warnings.warn(
                f"action dim {i} is (near-)constant; widening bounds by {eps}"
            )
            center = 0.5 * (hi[i] + lo[i])
            lo[i] = center - eps
            hi[i] = center + eps
    return BinSpec(lo=tuple(map(float, lo)), hi=tuple(map(float, hi)), bins=bins)


def tokenize_array(values: np.ndarray, b: BinSpec) -> np.ndarray:
    """Vectorized tokenizer over (..., 9) arrays of motion values."""
    lo = np.asarray(b.lo)
    hi = np.asarray(b.hi)
    width = (hi - lo) / b.bins
    idx = np.floor((values - lo) / width).astype(np.int64)
    return np.clip(idx, 0, b.bins - 1)


def detokenize_array(tokens: np.ndarray, b: BinSpec) -> np.ndarray:
    """Bin centers for (..., 9) integer token arrays."""
    lo = np.asarray(b.lo)
    hi = np.asarray(b.hi)
    width = (hi - lo) / b.bins
    return lo + (np.asarray(tokens) + 0.5) * width


def tokenize(a: ActionVector, b: BinSpec) -> TokenizedAction:
    toks = tokenize_array(a.to_array(), b)
    return TokenizedAction(tokens=tuple(int(t) for t in toks), terminate=a.terminate)


def detokenize(t: TokenizedAction, b: BinSpec) -> ActionVector:
    if t.terminate:
        return ActionVector.terminate_action()
    vals = detokenize_array(np.array(t.tokens), b)
    # Bin centers can sit outside [-1, 1] for the gripper dim only if the
    # fitted bounds do; clamp to keep ActionVector's invariant.
    vals[8] = float(np.clip(vals[8], -1.0, 1.0))
    return ActionVector.from_array(vals)
