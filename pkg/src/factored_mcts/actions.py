"""Algebra of factored action spaces and relevance-masked abstractions.

A joint action over ``n`` sub-action variables is a vector ``(a_0, ..., a_{n-1})``
with ``a_i`` drawn from a finite set of size ``cardinalities[i]``.  A binary
relevance mask projects joint actions onto the sub-actions that matter in the
current state; actions agreeing on the kept variables collapse to one abstract
action.  This module provides the pure bookkeeping for that collapse:
projection, enumeration of the abstract space, marginalization of joint-action
distributions onto it, and the inverse unfolding back to the joint space.

Joint actions are also addressable by a flat mixed-radix index (variable 0 most
significant) so distributions over the joint space can live in flat numpy
vectors.  All functions are pure and all types immutable.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

DEFAULT_BRANCHING_CAP = 4096

# Tolerance for "sums to one" checks on probability vectors.
DIST_ATOL = 1e-9


class BranchingCapError(RuntimeError):
    """An abstract action space is too large to materialize."""

    def __init__(self, size: int, cap: int):
        super().__init__(f"abstract action space has {size} elements, exceeds cap {cap}")
        self.size = size
        self.cap = cap


class InvalidDistributionError(ValueError):
    """A vector expected to be a probability distribution is not one."""


@dataclass(frozen=True)
class FactoredActionSpace:
    """Cartesian product of ``n`` finite sub-action sets."""

    cardinalities: tuple[int, ...]

    def __post_init__(self):
        if len(self.cardinalities) < 1:
            raise ValueError("need at least one sub-action variable")
        if any(c < 1 for c in self.cardinalities):
            raise ValueError(f"cardinalities must be positive, got {self.cardinalities}")
        object.__setattr__(self, "cardinalities", tuple(int(c) for c in self.cardinalities))
        total = 1
        for c in self.cardinalities:
            total *= c
            if total > 2**63 - 1:
                raise ValueError("joint action space does not fit in a 64-bit count")

    @property
    def n(self) -> int:
        return len(self.cardinalities)

    @property
    def size(self) -> int:
        """Number of joint actions."""
        return math.prod(self.cardinalities)

    @property
    def encoding_width(self) -> int:
        """Width of the concatenated per-variable one-hot encoding."""
        return sum(self.cardinalities)

    def strides(self) -> tuple[int, ...]:
        """Mixed-radix strides; variable 0 is the most significant digit."""
        return _strides(self.cardinalities)

    def validate_action(self, action: FactoredAction) -> None:
        if len(action.values) != self.n:
            raise ValueError(f"action has {len(action.values)} values, space has n={self.n}")
        for i, (v, c) in enumerate(zip(action.values, self.cardinalities)):
            if not 0 <= v < c:
                raise ValueError(f"sub-action {i} value {v} out of range [0, {c})")

    def validate_mask(self, mask: AbstractionMask) -> None:
        if len(mask.bits) != self.n:
            raise ValueError(f"mask has {len(mask.bits)} bits, space has n={self.n}")

    def index_of(self, action: FactoredAction) -> int:
        """Flat mixed-radix index of a joint action."""
        self.validate_action(action)
        strides = self.strides()
        return sum(v * s for v, s in zip(action.values, strides))

    def action_at(self, index: int) -> FactoredAction:
        """Inverse of :meth:`index_of`."""
        if not 0 <= index < self.size:
            raise ValueError(f"index {index} out of range [0, {self.size})")
        values = []
        for s, c in zip(self.strides(), self.cardinalities):
            values.append((index // s) % c)
        return FactoredAction(tuple(values))


@lru_cache(maxsize=None)
def _strides(cardinalities: tuple[int, ...]) -> tuple[int, ...]:
    strides = [1] * len(cardinalities)
    for i in range(len(cardinalities) - 2, -1, -1):
        strides[i] = strides[i + 1] * cardinalities[i + 1]
    return tuple(strides)


@dataclass(frozen=True)
class FactoredAction:
    """A concrete joint action: one index per sub-action variable."""

    values: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(int(v) for v in self.values))


@dataclass(frozen=True)
class AbstractionMask:
    """Binary relevance vector over sub-action variables.

    ``probs``, when present, records the Bernoulli parameters the bits were
    derived from (sampled or thresholded).
    """

    bits: tuple[int, ...]
    probs: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(int(bool(b)) for b in self.bits))
        if self.probs is not None:
            if len(self.probs) != len(self.bits):
                raise ValueError("probs length does not match bits length")
            if any(not 0.0 <= p <= 1.0 for p in self.probs):
                raise ValueError("probs must lie in [0, 1]")
            object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))

    @classmethod
    def all_ones(cls, n: int) -> AbstractionMask:
        return cls(bits=(1,) * n)

    @classmethod
    def all_zeros(cls, n: int) -> AbstractionMask:
        return cls(bits=(0,) * n)

    @property
    def kept_indices(self) -> tuple[int, ...]:
        return tuple(i for i, b in enumerate(self.bits) if b)

    def num_kept(self) -> int:
        return sum(self.bits)


@dataclass(frozen=True)
class AbstractAction:
    """Projection of a joint action onto the kept variables of a mask.

    Canonical (sorted ``kept_indices``) and hashable, so it serves directly as
    a tree-child key: all siblings under one node share ``kept_indices``
    because the node's mask is fixed.
    """

    kept_indices: tuple[int, ...]
    kept_values: tuple[int, ...]

    def __post_init__(self):
        if len(self.kept_indices) != len(self.kept_values):
            raise ValueError("kept_indices and kept_values lengths differ")
        if any(a >= b for a, b in zip(self.kept_indices, self.kept_indices[1:])):
            raise ValueError("kept_indices must be strictly increasing")


def project(space: FactoredActionSpace, action: FactoredAction,
            mask: AbstractionMask) -> AbstractAction:
    """Restrict a joint action to the variables the mask keeps."""
    space.validate_action(action)
    space.validate_mask(mask)
    kept = mask.kept_indices
    return AbstractAction(kept, tuple(action.values[i] for i in kept))


def abstract_space_size(space: FactoredActionSpace, mask: AbstractionMask) -> int:
    """Number of abstract actions under ``mask`` (1 for the all-zero mask)."""
    space.validate_mask(mask)
    return math.prod(space.cardinalities[i] for i in mask.kept_indices)


def enumerate_abstract_actions(space: FactoredActionSpace, mask: AbstractionMask,
                               cap: int = DEFAULT_BRANCHING_CAP) -> tuple[AbstractAction, ...]:
    """All abstract actions under ``mask``, lexicographic over kept variables.

    The all-zero mask yields exactly one empty abstract action.  Raises
    :class:`BranchingCapError` when the abstract space exceeds ``cap``.
    """
    size = abstract_space_size(space, mask)
    if size > cap:
        raise BranchingCapError(size, cap)
    return _enumerate_cached(space.cardinalities, mask.bits)


@lru_cache(maxsize=4096)
def _enumerate_cached(cardinalities: tuple[int, ...],
                      bits: tuple[int, ...]) -> tuple[AbstractAction, ...]:
    kept = tuple(i for i, b in enumerate(bits) if b)
    ranges = [range(cardinalities[i]) for i in kept]
    return tuple(AbstractAction(kept, values) for values in itertools.product(*ranges))


@lru_cache(maxsize=4096)
def _abstract_index_map(cardinalities: tuple[int, ...],
                        bits: tuple[int, ...]) -> np.ndarray:
    """Maps each flat joint-action index to its abstract-action index."""
    strides = np.asarray(_strides(cardinalities), dtype=np.int64)
    cards = np.asarray(cardinalities, dtype=np.int64)
    kept = [i for i, b in enumerate(bits) if b]
    size = int(np.prod(cards))
    joint = np.arange(size, dtype=np.int64)
    out = np.zeros(size, dtype=np.int64)
    abs_stride = 1
    for i in reversed(kept):
        digit = (joint // strides[i]) % cards[i]
        out += digit * abs_stride
        abs_stride *= int(cards[i])
    out.setflags(write=False)
    return out


def _check_distribution(vec: np.ndarray, expected_len: int, what: str) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (expected_len,):
        raise InvalidDistributionError(f"{what} has shape {vec.shape}, expected ({expected_len},)")
    if np.any(vec < -1e-12):
        raise InvalidDistributionError(f"{what} has negative entries (min {vec.min()})")
    total = float(vec.sum())
    if abs(total - 1.0) > DIST_ATOL:
        raise InvalidDistributionError(f"{what} sums to {total!r}, expected 1 within {DIST_ATOL}")
    return vec


def marginalize_prior(space: FactoredActionSpace, mask: AbstractionMask,
                      prior: np.ndarray, cap: int = DEFAULT_BRANCHING_CAP) -> np.ndarray:
    """Sum a joint-action distribution over each abstraction equivalence class.

    ``prior`` is indexed by the flat mixed-radix joint index; the result is
    indexed consistently with :func:`enumerate_abstract_actions`.
    """
    space.validate_mask(mask)
    prior = _check_distribution(prior, space.size, "prior")
    size = abstract_space_size(space, mask)
    if size > cap:
        raise BranchingCapError(size, cap)
    index_map = _abstract_index_map(space.cardinalities, mask.bits)
    return np.bincount(index_map, weights=prior, minlength=size)


def unfold_distribution(space: FactoredActionSpace, mask: AbstractionMask,
                        abstract_dist: np.ndarray,
                        cap: int = DEFAULT_BRANCHING_CAP) -> np.ndarray:
    """Expand an abstract-action distribution back over the joint space.

    Each joint action receives the mass of its abstract class times a uniform
    factor over the masked-out variables, so
    ``marginalize_prior(unfold_distribution(q)) == q`` up to float tolerance.
    """
    space.validate_mask(mask)
    size = abstract_space_size(space, mask)
    if size > cap:
        raise BranchingCapError(size, cap)
    abstract_dist = _check_distribution(abstract_dist, size, "abstract distribution")
    dropped = [space.cardinalities[i] for i, b in enumerate(mask.bits) if not b]
    uniform = 1.0 / math.prod(dropped) if dropped else 1.0
    index_map = _abstract_index_map(space.cardinalities, mask.bits)
    return abstract_dist[index_map] * uniform


def encode_action(space: FactoredActionSpace, action: FactoredAction) -> np.ndarray:
    """Concatenated per-variable one-hot encoding of a joint action."""
    space.validate_action(action)
    out = np.zeros(space.encoding_width, dtype=np.float32)
    offset = 0
    for value, card in zip(action.values, space.cardinalities):
        out[offset + value] = 1.0
        offset += card
    return out


def encode_action_masked(space: FactoredActionSpace, action: FactoredAction,
                         mask: AbstractionMask) -> np.ndarray:
    """One-hot encoding with the blocks of masked-out variables zeroed.

    This is the only channel through which actions reach the dynamics network,
    so the network is exactly invariant to masked-out sub-action values.
    """
    space.validate_action(action)
    space.validate_mask(mask)
    out = np.zeros(space.encoding_width, dtype=np.float32)
    offset = 0
    for value, card, bit in zip(action.values, space.cardinalities, mask.bits):
        if bit:
            out[offset + value] = 1.0
        offset += card
    return out


def encode_actions_masked(space: FactoredActionSpace, actions: np.ndarray,
                          mask_values: np.ndarray) -> np.ndarray:
    """Batched masked encoding.

    ``actions`` is an integer array (batch, n); ``mask_values`` a float array
    (batch, n) whose entries scale each variable's one-hot block (hard bits
    give the exact masked encoding, relaxed values give its differentiable
    surrogate).
    """
    actions = np.asarray(actions)
    mask_values = np.asarray(mask_values)
    if mask_values.dtype not in (np.float32, np.float64):
        mask_values = mask_values.astype(np.float32)
    batch = actions.shape[0]
    if actions.shape != (batch, space.n) or mask_values.shape != (batch, space.n):
        raise ValueError("actions and mask_values must both have shape (batch, n)")
    out = np.zeros((batch, space.encoding_width), dtype=mask_values.dtype)
    rows = np.arange(batch)
    offset = 0
    for i, card in enumerate(space.cardinalities):
        out[rows, offset + actions[:, i]] = mask_values[:, i]
        offset += card
    return out


def gather_mask_grads(space: FactoredActionSpace, actions: np.ndarray,
                      encoding_grad: np.ndarray) -> np.ndarray:
    """Backward of :func:`encode_actions_masked` with respect to mask values."""
    batch = actions.shape[0]
    out = np.empty((batch, space.n), dtype=encoding_grad.dtype)
    rows = np.arange(batch)
    offset = 0
    for i, card in enumerate(space.cardinalities):
        out[:, i] = encoding_grad[rows, offset + actions[:, i]]
        offset += card
    return out
