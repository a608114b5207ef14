"""Evaluation metrics: returns with bootstrap confidence intervals, mask
accuracy as a structural Hamming distance, root search-space reduction, and
min-max normalized scores with oracle-derived bounds.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .actions import AbstractionMask, abstract_space_size
from .envs import (
    CMAB_HORIZON,
    GridKeyConfig,
    cmab_ground_truth_mask,
    cmab_optimal_return,
    gridkey_reset,
    gridkey_shortest_solution,
    make_env,
)
from .models import Model, deterministic_mask
from .search import SearchConfig, act, run_search

BOOTSTRAP_RESAMPLES = 10_000


def shd(predicted: AbstractionMask, truth: AbstractionMask) -> int:
    """Structural Hamming distance between two relevance masks.

    Each mask encodes the edge set {variable i -> next state}; the distance
    counts positions where the bit vectors differ, so identical masks give 0.
    """
    if len(predicted.bits) != len(truth.bits):
        raise ValueError(
            f"mask lengths differ: {len(predicted.bits)} vs {len(truth.bits)}")
    return sum(a != b for a, b in zip(predicted.bits, truth.bits))


def bootstrap_ci(values, rng: np.random.Generator | None = None,
                 resamples: int = BOOTSTRAP_RESAMPLES,
                 confidence: float = 0.95) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 1:
        return float(values[0]), float(values[0])
    rng = rng or np.random.default_rng(0)
    idx = rng.integers(0, values.size, size=(resamples, values.size))
    means = values[idx].mean(axis=1)
    lo = (1.0 - confidence) / 2.0
    return (float(np.quantile(means, lo)), float(np.quantile(means, 1.0 - lo)))


@dataclass
class EvalReport:
    env_id: str
    returns: list[float]
    return_mean: float
    return_ci: tuple[float, float]
    shd_values: list[int]
    shd_mean: float | None            # None when no ground-truth masks exist
    reduction_mean: float             # mean over visited states, in [0, 1]
    normalized_score: float

    def __post_init__(self):
        lo, hi = self.return_ci
        assert lo <= self.return_mean <= hi or np.isclose(lo, hi)
        assert 0.0 <= self.reduction_mean <= 1.0


def search_space_reduction(model: Model, observations, tau: float) -> float:
    """Mean over states of 1 - |abstract action space| / |joint action space|."""
    space = model.space
    fractions = []
    for obs in observations:
        z = model.encode(np.asarray(obs, dtype=np.float32).reshape(1, -1))
        mask = deterministic_mask(model.infer_structure(z)[0], tau)
        fractions.append(1.0 - abstract_space_size(space, mask) / space.size)
    return float(np.mean(fractions))


def evaluate(model: Model, env_id: str, search_cfg: SearchConfig,
             episodes: int = 32, seed: int = 0) -> EvalReport:
    """Run evaluation-mode episodes (no root noise, argmax acting).

    On environments with ground-truth masks the predicted mask is scored
    against the truth at every visited state; root search-space reduction is
    averaged over the same states.
    """
    returns, shd_values, reductions = [], [], []
    space = None
    for e in range(episodes):
        env = make_env(env_id, seed=seed * 100_003 + e)
        space = env.space
        rng = np.random.default_rng([seed, e])
        obs = env.reset(np.random.default_rng([seed, e, 1]))
        total = 0.0
        done = False
        while not done:
            truth = env.ground_truth_mask()
            result = run_search(obs, model, search_cfg, rng, add_noise=False)
            reductions.append(
                1.0 - abstract_space_size(space, result.root_mask) / space.size)
            if truth is not None:
                shd_values.append(shd(result.root_mask, truth))
            action = act(result, "eval", rng)
            obs, reward, done = env.step(action)
            total += reward
        returns.append(total)
    mean = float(np.mean(returns))
    ci = bootstrap_ci(returns, np.random.default_rng(seed))
    return EvalReport(
        env_id=env_id,
        returns=returns,
        return_mean=mean,
        return_ci=ci,
        shd_values=shd_values,
        shd_mean=float(np.mean(shd_values)) if shd_values else None,
        reduction_mean=float(np.mean(reductions)),
        normalized_score=normalized_score(mean, env_id),
    )


# ---------------------------------------------------------------------------
# Normalized scores
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def score_bounds(env_id: str) -> tuple[float, float]:
    """(worst, best) returns for min-max normalization, from the oracles."""
    if env_id == "cmab":
        return 0.0, cmab_optimal_return(CMAB_HORIZON)
    if env_id.startswith("gridkey-k"):
        config = GridKeyConfig(num_colors=int(env_id.removeprefix("gridkey-k")))
        rng = np.random.default_rng(20_240_601)
        steps = []
        for _ in range(256):
            state = gridkey_reset(rng, config)
            optimal = gridkey_shortest_solution(state, config)
            assert optimal is not None, "layout generator produced unsolvable grid"
            steps.append(optimal)
        return -0.1 * config.horizon, -0.1 * float(np.mean(steps))
    raise ValueError(f"unknown environment id {env_id!r}")


def normalized_score(episode_return: float, env_id: str) -> float:
    """Min-max normalized return, clipped to [0, 1]."""
    lo, hi = score_bounds(env_id)
    return float(np.clip((episode_return - lo) / (hi - lo), 0.0, 1.0))
