"""Tree search with on-the-fly action abstraction.

Each node carries a relevance mask fixed at expansion time; its children are
keyed by abstract actions, so sub-actions the mask drops are never branched
on.  Selection uses the PUCT rule with the policy prior marginalized onto the
node's abstract action space and Q values min-max normalized over the tree.
With masks forced to all-ones the engine reduces to a standard MuZero-style
search; an independent reference implementation of that search over the flat
joint action space lives at the bottom of this module for parity testing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .actions import (
    DEFAULT_BRANCHING_CAP,
    AbstractAction,
    AbstractionMask,
    FactoredAction,
    FactoredActionSpace,
    encode_action,
    encode_action_masked,
    enumerate_abstract_actions,
    marginalize_prior,
    unfold_distribution,
)
from .models import Model, deterministic_mask
from .nn import softmax


@dataclass(frozen=True)
class SearchConfig:
    num_simulations: int = 50
    c1: float = 1.25
    c2: float = 19652.0
    discount: float = 0.997
    dirichlet_ratio: float = 0.25
    dirichlet_alpha: float = 0.3
    mask_threshold: float = 0.01
    branching_cap: int = DEFAULT_BRANCHING_CAP
    vanilla_mode: bool = False

    def __post_init__(self):
        if self.num_simulations < 1:
            raise ValueError("num_simulations must be >= 1")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError("discount must lie in [0, 1)")
        if not 0.0 <= self.dirichlet_ratio <= 1.0:
            raise ValueError("dirichlet_ratio must lie in [0, 1]")


class MinMaxStats:
    """Running min/max of Q values observed in the tree, for normalization."""

    __slots__ = ("minimum", "maximum")

    def __init__(self):
        self.minimum = math.inf
        self.maximum = -math.inf

    def update(self, value: float) -> None:
        if value < self.minimum:
            self.minimum = value
        if value > self.maximum:
            self.maximum = value

    def normalize(self, value: float) -> float:
        if self.maximum > self.minimum:
            return (value - self.minimum) / (self.maximum - self.minimum)
        return value


@dataclass
class Node:
    latent: np.ndarray                      # (1, latent_width)
    mask: AbstractionMask                   # fixed at expansion
    actions: tuple[AbstractAction, ...]     # enumeration order = stats order
    prior: np.ndarray                       # marginalized policy prior
    value_pred: float                       # value head at evaluation time
    visit_counts: np.ndarray = field(init=False)
    q_values: np.ndarray = field(init=False)
    rewards: np.ndarray = field(init=False)  # predicted reward per edge
    children: dict[AbstractAction, "Node"] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.actions)
        self.visit_counts = np.zeros(n, dtype=np.int64)
        self.q_values = np.zeros(n, dtype=np.float64)
        self.rewards = np.zeros(n, dtype=np.float64)


@dataclass
class SearchResult:
    root: Node
    visit_dist: np.ndarray                  # over root.actions
    root_mask: AbstractionMask
    root_value: float
    space: FactoredActionSpace

    @property
    def abstract_actions(self) -> tuple[AbstractAction, ...]:
        return self.root.actions

    def unfolded_policy(self) -> np.ndarray:
        """Visit distribution expanded over the joint action space."""
        return unfold_distribution(self.space, self.root_mask, self.visit_dist)


def exploration_coefficient(total_visits: int, cfg: SearchConfig) -> float:
    return cfg.c1 + math.log((total_visits + cfg.c2 + 1.0) / cfg.c2)


def select_child(node: Node, cfg: SearchConfig, stats: MinMaxStats) -> int:
    """Index of the PUCT-maximizing abstract action (ties: lowest index)."""
    total = int(node.visit_counts.sum())
    c = exploration_coefficient(total, cfg)
    visited = node.visit_counts > 0
    q_hat = np.where(visited, node.q_values, 0.0)
    if stats.maximum > stats.minimum:
        q_hat = np.where(
            visited, (q_hat - stats.minimum) / (stats.maximum - stats.minimum), 0.0)
    scores = q_hat + c * node.prior * (math.sqrt(total) / (1.0 + node.visit_counts))
    return int(np.argmax(scores))


def _node_mask(model: Model, z: np.ndarray, cfg: SearchConfig) -> AbstractionMask:
    if cfg.vanilla_mode:
        return AbstractionMask.all_ones(model.space.n)
    probs = model.infer_structure(z)[0]
    return deterministic_mask(probs, cfg.mask_threshold)


def _make_node(model: Model, z: np.ndarray, cfg: SearchConfig) -> Node:
    space = model.space
    mask = _node_mask(model, z, cfg)
    actions = enumerate_abstract_actions(space, mask, cfg.branching_cap)
    logits, value, _ = model.predict_heads(z)
    joint_prior = softmax(logits[0].astype(np.float64))
    prior = marginalize_prior(space, mask, joint_prior, cfg.branching_cap)
    return Node(latent=z, mask=mask, actions=actions, prior=prior,
                value_pred=float(value[0]))


def _fill_action(space: FactoredActionSpace, abstract: AbstractAction) -> FactoredAction:
    # Arbitrary-but-fixed filler for dropped variables; the masked encoding
    # zeroes their blocks regardless.
    values = [0] * space.n
    for i, v in zip(abstract.kept_indices, abstract.kept_values):
        values[i] = v
    return FactoredAction(tuple(values))


def expand_node(parent: Node, action_index: int, model: Model,
                cfg: SearchConfig) -> Node:
    """Create the child for one abstract action and attach it."""
    key = parent.actions[action_index]
    if key in parent.children:
        raise ValueError(f"child for {key} already expanded")
    space = model.space
    encoding = encode_action_masked(space, _fill_action(space, key), parent.mask)
    z_next = model.dynamics(parent.latent, encoding[None, :])
    child = _make_node(model, z_next, cfg)
    _, _, reward = model.predict_heads(z_next)
    parent.rewards[action_index] = float(reward[0])
    parent.children[key] = child
    return child


def add_root_noise(root: Node, cfg: SearchConfig, rng: np.random.Generator) -> None:
    noise = rng.dirichlet([cfg.dirichlet_alpha] * len(root.actions))
    root.prior = (1.0 - cfg.dirichlet_ratio) * root.prior + cfg.dirichlet_ratio * noise


def backup(path: list[tuple[Node, int]], leaf_value: float, cfg: SearchConfig,
           stats: MinMaxStats) -> None:
    """Propagate a leaf evaluation up the selected path.

    Per edge from leaf to root: G <- r + discount * G, the visit count
    increments, and Q tracks the running mean of backed-up returns.
    """
    value = leaf_value
    for node, i in reversed(path):
        value = node.rewards[i] + cfg.discount * value
        n = node.visit_counts[i]
        node.q_values[i] = (n * node.q_values[i] + value) / (n + 1)
        node.visit_counts[i] = n + 1
        stats.update(node.q_values[i])


def run_search(observation: np.ndarray, model: Model, cfg: SearchConfig,
               rng: np.random.Generator, add_noise: bool = False) -> SearchResult:
    """Full search from one observation; the root mask is computed once and
    fixed for the whole tree."""
    obs = np.asarray(observation, dtype=np.float32).reshape(1, -1)
    z = model.encode(obs)
    root = _make_node(model, z, cfg)
    if add_noise and cfg.dirichlet_ratio > 0.0:
        add_root_noise(root, cfg, rng)
    stats = MinMaxStats()
    for _ in range(cfg.num_simulations):
        node = root
        path: list[tuple[Node, int]] = []
        while True:
            i = select_child(node, cfg, stats)
            path.append((node, i))
            child = node.children.get(node.actions[i])
            if child is None:
                break
            node = child
        leaf = expand_node(node, i, model, cfg)
        backup(path, leaf.value_pred, cfg, stats)
    visit_dist = root.visit_counts.astype(np.float64)
    visit_dist /= visit_dist.sum()
    return SearchResult(root=root, visit_dist=visit_dist, root_mask=root.mask,
                        root_value=root.value_pred, space=model.space)


def act(result: SearchResult, mode: str, rng: np.random.Generator,
        temperature: float = 1.0) -> FactoredAction:
    """Emit a joint action from a search result.

    Acting mode samples an abstract action from the tempered visit
    distribution; evaluation mode takes the argmax.  Either way the dropped
    variables are filled uniformly at random, which is what spreads the
    unfolded policy over each abstraction class.
    """
    if mode not in ("acting", "eval"):
        raise ValueError(f"mode must be 'acting' or 'eval', got {mode!r}")
    if mode == "eval" or temperature == 0.0:
        idx = int(np.argmax(result.visit_dist))
    else:
        weights = np.power(result.visit_dist, 1.0 / temperature)
        weights /= weights.sum()
        idx = int(rng.choice(len(weights), p=weights))
    abstract = result.root.actions[idx]
    space = result.space
    values = [0] * space.n
    for i, v in zip(abstract.kept_indices, abstract.kept_values):
        values[i] = v
    for i, bit in enumerate(result.root_mask.bits):
        if not bit:
            values[i] = int(rng.integers(space.cardinalities[i]))
    return FactoredAction(tuple(values))


# ---------------------------------------------------------------------------
# Reference search over the flat joint action space (no abstraction), used as
# the baseline-correctness oracle for the engine above.
# ---------------------------------------------------------------------------

@dataclass
class VanillaNode:
    latent: np.ndarray
    prior: np.ndarray                       # over all joint actions, flat index
    value_pred: float
    visit_counts: np.ndarray = field(init=False)
    q_values: np.ndarray = field(init=False)
    rewards: np.ndarray = field(init=False)
    children: dict[int, "VanillaNode"] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.prior)
        self.visit_counts = np.zeros(n, dtype=np.int64)
        self.q_values = np.zeros(n, dtype=np.float64)
        self.rewards = np.zeros(n, dtype=np.float64)


def _vanilla_make_node(model: Model, z: np.ndarray) -> VanillaNode:
    logits, value, _ = model.predict_heads(z)
    prior = softmax(logits[0].astype(np.float64))
    return VanillaNode(latent=z, prior=prior, value_pred=float(value[0]))


def _vanilla_select(node: VanillaNode, cfg: SearchConfig, stats: MinMaxStats) -> int:
    total = int(node.visit_counts.sum())
    c = exploration_coefficient(total, cfg)
    visited = node.visit_counts > 0
    q_hat = np.where(visited, node.q_values, 0.0)
    if stats.maximum > stats.minimum:
        q_hat = np.where(
            visited, (q_hat - stats.minimum) / (stats.maximum - stats.minimum), 0.0)
    scores = q_hat + c * node.prior * (math.sqrt(total) / (1.0 + node.visit_counts))
    return int(np.argmax(scores))


def run_search_reference(observation: np.ndarray, model: Model, cfg: SearchConfig,
                         rng: np.random.Generator, add_noise: bool = False) -> VanillaNode:
    """Plain MuZero-style search: PUCT over every joint action."""
    space = model.space
    obs = np.asarray(observation, dtype=np.float32).reshape(1, -1)
    root = _vanilla_make_node(model, model.encode(obs))
    if add_noise and cfg.dirichlet_ratio > 0.0:
        noise = rng.dirichlet([cfg.dirichlet_alpha] * space.size)
        root.prior = (1.0 - cfg.dirichlet_ratio) * root.prior + cfg.dirichlet_ratio * noise
    stats = MinMaxStats()
    for _ in range(cfg.num_simulations):
        node = root
        path: list[tuple[VanillaNode, int]] = []
        while True:
            i = _vanilla_select(node, cfg, stats)
            path.append((node, i))
            child = node.children.get(i)
            if child is None:
                break
            node = child
        encoding = encode_action(space, space.action_at(i))
        z_next = model.dynamics(node.latent, encoding[None, :])
        leaf = _vanilla_make_node(model, z_next)
        _, _, reward = model.predict_heads(z_next)
        node.rewards[i] = float(reward[0])
        node.children[i] = leaf
        value = leaf.value_pred
        for pnode, pi in reversed(path):
            value = pnode.rewards[pi] + cfg.discount * value
            n = pnode.visit_counts[pi]
            pnode.q_values[pi] = (n * pnode.q_values[pi] + value) / (n + 1)
            pnode.visit_counts[pi] = n + 1
            stats.update(pnode.q_values[pi])
    return root
