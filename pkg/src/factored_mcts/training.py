"""Self-play training: episode collection, replay, targets, and the joint
K-step loss.

The loss unrolls the dynamics model K steps from an encoded observation.  At
every step a fresh relevance mask is sampled through the straight-through
Gumbel-Sigmoid and applied to the stored action's one-hot encoding before the
dynamics step.  The reconstruction term (decoder error plus the L1 mask
penalty, averaged over the unroll) is the only loss allowed to reach the
structure net: policy, value, and reward errors are backpropagated along a
second gradient stream that skips the mask path entirely.  Flipping
``unfrozen_structure`` routes that second stream into the structure net too,
which is the ablation variant.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .actions import (
    FactoredAction,
    FactoredActionSpace,
    encode_actions_masked,
    gather_mask_grads,
)
from .models import Model
from .nn import AdamW, NumericFaultError, gumbel_sigmoid_st, softmax
from .search import SearchConfig, act, run_search


@dataclass(frozen=True)
class TrainConfig:
    unroll_steps: int = 5
    td_steps: int = 5
    batch_size: int = 64
    policy_coef: float = 1.0
    value_coef: float = 0.25
    reward_coef: float = 1.0
    recon_coef: float = 1.0
    sparsity_coef: float = 0.01
    gumbel_beta: float = 1.0
    target_interval: int = 200
    total_steps: int = 20_000
    buffer_capacity: int = 100_000
    min_buffer: int = 5_000
    collect_interval: int = 25
    acting_temperature: float = 1.0
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    max_grad_norm: float = 100.0
    # "sampled": Gumbel-Sigmoid masks (default); "ones": no masking (vanilla).
    mask_mode: str = "sampled"
    unfrozen_structure: bool = False

    def __post_init__(self):
        if self.unroll_steps < 1:
            raise ValueError("unroll_steps must be >= 1")
        if self.sparsity_coef < 0:
            raise ValueError("sparsity_coef must be >= 0")
        if self.gumbel_beta <= 0:
            raise ValueError("gumbel_beta must be > 0")
        if self.mask_mode not in ("sampled", "ones"):
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")


@dataclass
class TrajectoryStep:
    """One stored transition with its search-derived training targets."""

    observation: np.ndarray       # s_t
    action: FactoredAction        # a_t
    reward: float                 # r_t
    policy: np.ndarray            # unfolded root visit distribution over joint actions
    root_value: float
    done: bool


@dataclass
class Episode:
    steps: list[TrajectoryStep]
    final_observation: np.ndarray  # observation after the last transition

    def __len__(self) -> int:
        return len(self.steps)

    def observation_at(self, j: int) -> np.ndarray:
        """Observation with absorbing-state padding past the end."""
        if j < len(self.steps):
            return self.steps[j].observation
        return self.final_observation

    def reward_at(self, j: int) -> float:
        return self.steps[j].reward if j < len(self.steps) else 0.0


class ReplayBuffer:
    """Ring of episodes sampled uniformly at the transition level."""

    def __init__(self, capacity: int, min_fill: int):
        self.capacity = capacity
        self.min_fill = min_fill
        self.episodes: deque[Episode] = deque()
        self.num_transitions = 0

    def add(self, episode: Episode) -> None:
        self.episodes.append(episode)
        self.num_transitions += len(episode)
        while self.num_transitions > self.capacity and len(self.episodes) > 1:
            dropped = self.episodes.popleft()
            self.num_transitions -= len(dropped)

    @property
    def can_sample(self) -> bool:
        return self.num_transitions >= self.min_fill

    def sample_positions(self, rng: np.random.Generator, count: int
                         ) -> list[tuple[Episode, int]]:
        if not self.can_sample:
            raise RuntimeError(
                f"buffer has {self.num_transitions} transitions, needs {self.min_fill}")
        lengths = np.fromiter((len(e) for e in self.episodes), dtype=np.int64)
        cumulative = np.cumsum(lengths)
        flat = rng.integers(0, self.num_transitions, size=count)
        out = []
        for f in flat:
            e = int(np.searchsorted(cumulative, f, side="right"))
            start = int(f - (cumulative[e - 1] if e > 0 else 0))
            out.append((self.episodes[e], start))
        return out


# ---------------------------------------------------------------------------
# Episode collection
# ---------------------------------------------------------------------------

def collect_episode(env, model: Model, search_cfg: SearchConfig,
                    rng: np.random.Generator, temperature: float = 1.0) -> Episode:
    """Roll one episode with search-guided acting (root noise on)."""
    obs = env.reset(rng)
    steps = []
    done = False
    while not done:
        result = run_search(obs, model, search_cfg, rng, add_noise=True)
        action = act(result, "acting", rng, temperature)
        next_obs, reward, done = env.step(action)
        steps.append(TrajectoryStep(
            observation=obs,
            action=action,
            reward=reward,
            policy=result.unfolded_policy(),
            root_value=result.root_value,
            done=done,
        ))
        obs = next_obs
    return Episode(steps=steps, final_observation=obs)


def random_episode(env, rng: np.random.Generator) -> Episode:
    """Uniform-random warmup episode; policy targets are uniform."""
    space = env.space
    uniform = np.full(space.size, 1.0 / space.size)
    obs = env.reset(rng)
    steps = []
    done = False
    while not done:
        values = tuple(int(rng.integers(c)) for c in space.cardinalities)
        action = FactoredAction(values)
        next_obs, reward, done = env.step(action)
        steps.append(TrajectoryStep(
            observation=obs, action=action, reward=reward,
            policy=uniform, root_value=0.0, done=done,
        ))
        obs = next_obs
    return Episode(steps=steps, final_observation=obs)


# ---------------------------------------------------------------------------
# Batch assembly and targets
# ---------------------------------------------------------------------------

def sample_batch(buffer: ReplayBuffer, rng: np.random.Generator,
                 cfg: TrainConfig, space: FactoredActionSpace,
                 discount: float) -> dict:
    """Draw start positions and assemble padded unroll windows.

    Positions past an episode's end are treated as an absorbing state: the
    terminal observation repeats, rewards are zero, policy targets are
    uniform, and the padding action is the all-zeros joint action.
    """
    positions = buffer.sample_positions(rng, cfg.batch_size)
    K, TD = cfg.unroll_steps, cfg.td_steps
    B = cfg.batch_size
    obs_width = positions[0][0].steps[0].observation.shape[0]
    uniform = np.full(space.size, 1.0 / space.size, dtype=np.float32)
    zero_action = np.zeros(space.n, dtype=np.int64)

    obs0 = np.empty((B, obs_width), dtype=np.float32)
    obs_targets = np.empty((B, K, obs_width), dtype=np.float32)
    actions = np.empty((B, K, space.n), dtype=np.int64)
    reward_targets = np.zeros((B, K), dtype=np.float32)
    policy_targets = np.empty((B, K, space.size), dtype=np.float32)
    nstep_returns = np.zeros((B, K), dtype=np.float64)
    bootstrap_obs = np.zeros((B, K, obs_width), dtype=np.float32)
    bootstrap_valid = np.zeros((B, K), dtype=bool)

    for b, (episode, t) in enumerate(positions):
        L = len(episode)
        obs0[b] = episode.observation_at(t)
        for k in range(1, K + 1):
            j = t + k
            obs_targets[b, k - 1] = episode.observation_at(j)
            if j - 1 < L:
                actions[b, k - 1] = episode.steps[j - 1].action.values
                reward_targets[b, k - 1] = episode.steps[j - 1].reward
            else:
                actions[b, k - 1] = zero_action
            policy_targets[b, k - 1] = (
                episode.steps[j].policy if j < L else uniform)
            acc = 0.0
            for d in range(TD):
                acc += (discount ** d) * episode.reward_at(j + d)
            nstep_returns[b, k - 1] = acc
            if j + TD < L:
                bootstrap_obs[b, k - 1] = episode.observation_at(j + TD)
                bootstrap_valid[b, k - 1] = True
    return {
        "obs0": obs0,
        "obs_targets": obs_targets,
        "actions": actions,
        "reward_targets": reward_targets,
        "policy_targets": policy_targets,
        "nstep_returns": nstep_returns,
        "bootstrap_obs": bootstrap_obs,
        "bootstrap_valid": bootstrap_valid,
    }


def compute_targets(batch: dict, target_model: Model, cfg: TrainConfig,
                    discount: float) -> dict:
    """Finish the batch: bootstrapped value targets from the frozen target
    network (zero past terminal)."""
    K = cfg.unroll_steps
    B = batch["obs0"].shape[0]
    valid = batch["bootstrap_valid"].reshape(-1)
    boot = np.zeros(B * K, dtype=np.float64)
    if valid.any():
        obs = batch["bootstrap_obs"].reshape(B * K, -1)[valid]
        z = target_model.encode(obs)
        boot[valid] = target_model.value_head.apply(z)[:, 0].astype(np.float64)
    value_targets = batch["nstep_returns"] + (discount ** cfg.td_steps) * boot.reshape(B, K)
    out = dict(batch)
    out["value_targets"] = value_targets.astype(np.float32)
    return out


# ---------------------------------------------------------------------------
# Unrolled loss with routed gradients
# ---------------------------------------------------------------------------

def unrolled_loss(model: Model, batch: dict, cfg: TrainConfig,
                  noise: np.ndarray, mask_mode: str | None = None,
                  compute_grads: bool = True) -> dict:
    """Forward the K-step unroll, accumulate gradients, return a loss report.

    ``noise`` is the pre-drawn uniform array (batch, K, n) for the mask
    sampler, so the same loss is recomputable under parameter perturbation.
    ``mask_mode`` overrides cfg.mask_mode; the extra value "relaxed" swaps the
    hard mask bits for their differentiable surrogate in the forward pass,
    which the finite-difference oracle uses.
    """
    mode = mask_mode if mask_mode is not None else cfg.mask_mode
    if mode not in ("sampled", "relaxed", "ones"):
        raise ValueError(f"unknown mask mode {mode!r}")
    space = model.space
    K = cfg.unroll_steps
    B = batch["obs0"].shape[0]
    n = space.n

    z, enc_cache = model.encoder.forward(batch["obs0"])
    zs = [z]
    h_caches, mask_grads, mask_values_all = [], [], []
    g_caches, dec_caches, dec_outs = [], [], []
    pol_caches, pol_logits = [], []
    val_caches, val_outs = [], []
    rew_caches, rew_outs = [], []

    for k in range(K):
        z_prev = zs[-1]
        if mode == "ones":
            mask_values = np.ones((B, n), dtype=z_prev.dtype)
            h_caches.append(None)
            mask_grads.append(None)
        else:
            probs, h_cache = model.structure.forward(z_prev)
            hard, relaxed, grad_dp = gumbel_sigmoid_st(probs, noise[:, k], cfg.gumbel_beta)
            mask_values = relaxed if mode == "relaxed" else hard
            h_caches.append(h_cache)
            mask_grads.append(grad_dp)
        mask_values_all.append(mask_values)
        encoding = encode_actions_masked(space, batch["actions"][:, k], mask_values)
        g_in = np.concatenate([z_prev, encoding.astype(z_prev.dtype)], axis=1)
        z, g_cache = model.dynamics_net.forward(g_in)
        g_caches.append(g_cache)
        zs.append(z)

        dec_out, dec_cache = model.decoder.forward(z)
        dec_caches.append(dec_cache)
        dec_outs.append(dec_out)
        logits, pol_cache = model.policy_head.forward(z)
        pol_caches.append(pol_cache)
        pol_logits.append(logits)
        v, val_cache = model.value_head.forward(z)
        val_caches.append(val_cache)
        val_outs.append(v[:, 0])
        r, rew_cache = model.reward_head.forward(z)
        rew_caches.append(rew_cache)
        rew_outs.append(r[:, 0])

    # Loss components (already weighted by their coefficients).
    recon_loss = 0.0
    sparsity_loss = 0.0
    policy_loss = 0.0
    value_loss = 0.0
    reward_loss = 0.0
    recon_grads, pol_grads, val_grads, rew_grads = [], [], [], []
    for k in range(K):
        diff = dec_outs[k] - batch["obs_targets"][:, k]
        recon_loss += cfg.recon_coef / K * float((diff * diff).sum()) / B
        recon_grads.append((cfg.recon_coef / K) * (2.0 / B) * diff)
        if mode != "ones" and cfg.sparsity_coef > 0:
            sparsity_loss += (cfg.recon_coef * cfg.sparsity_coef / K
                              * float(mask_values_all[k].sum()) / B)

        logp = pol_logits[k] - pol_logits[k].max(axis=1, keepdims=True)
        logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
        target = batch["policy_targets"][:, k]
        policy_loss += cfg.policy_coef * float(-(target * logp).sum()) / B
        pol_grads.append(cfg.policy_coef / B * (softmax(pol_logits[k]) - target))

        vdiff = val_outs[k] - batch["value_targets"][:, k]
        value_loss += cfg.value_coef * float((vdiff * vdiff).mean())
        val_grads.append(cfg.value_coef * (2.0 / B) * vdiff)

        rdiff = rew_outs[k] - batch["reward_targets"][:, k]
        reward_loss += cfg.reward_coef * float((rdiff * rdiff).mean())
        rew_grads.append(cfg.reward_coef * (2.0 / B) * rdiff)

    total = recon_loss + sparsity_loss + policy_loss + value_loss + reward_loss
    report = {
        "loss_total": total,
        "loss_policy": policy_loss,
        "loss_value": value_loss,
        "loss_reward": reward_loss,
        "loss_recon": recon_loss,
        "loss_sparsity": sparsity_loss,
    }
    if not math.isfinite(total):
        raise NumericFaultError(f"training loss is not finite: {report}")
    if not compute_grads:
        return report

    # Backward with two gradient streams.  The reconstruction stream owns the
    # mask path into the structure net; the policy/value/reward stream skips
    # it unless unfrozen_structure is set.
    latent_width = zs[0].shape[1]
    dz_rec = np.zeros_like(zs[0])
    dz_pvr = np.zeros_like(zs[0])
    sparsity_grad = (cfg.recon_coef * cfg.sparsity_coef / (K * B)
                     if (mode != "ones" and cfg.sparsity_coef > 0) else 0.0)
    for k in range(K - 1, -1, -1):
        dz_rec = dz_rec + model.decoder.backward(dec_caches[k], recon_grads[k])
        dz_pvr = dz_pvr + model.policy_head.backward(pol_caches[k], pol_grads[k])
        dz_pvr = dz_pvr + model.value_head.backward(val_caches[k], val_grads[k][:, None])
        dz_pvr = dz_pvr + model.reward_head.backward(rew_caches[k], rew_grads[k][:, None])

        dx_rec = model.dynamics_net.backward(g_caches[k], dz_rec)
        dx_pvr = model.dynamics_net.backward(g_caches[k], dz_pvr)
        dz_rec = dx_rec[:, :latent_width]
        dz_pvr = dx_pvr[:, :latent_width]
        if mode != "ones":
            dmask_rec = gather_mask_grads(space, batch["actions"][:, k],
                                          dx_rec[:, latent_width:])
            if sparsity_grad:
                dmask_rec = dmask_rec + sparsity_grad
            dz_rec = dz_rec + model.structure.backward(
                h_caches[k], dmask_rec * mask_grads[k])
            if cfg.unfrozen_structure:
                dmask_pvr = gather_mask_grads(space, batch["actions"][:, k],
                                              dx_pvr[:, latent_width:])
                dz_pvr = dz_pvr + model.structure.backward(
                    h_caches[k], dmask_pvr * mask_grads[k])
    model.encoder.backward(enc_cache, dz_rec + dz_pvr)
    return report


def train_step(model: Model, target_model: Model, optimizer: AdamW,
               buffer: ReplayBuffer, cfg: TrainConfig, discount: float,
               rng: np.random.Generator) -> dict:
    """One gradient step: sample, target, unroll, clip, update."""
    batch = sample_batch(buffer, rng, cfg, model.space, discount)
    batch = compute_targets(batch, target_model, cfg, discount)
    noise = rng.random((cfg.batch_size, cfg.unroll_steps, model.space.n),
                       dtype=np.float32)
    optimizer.zero_grad()
    report = unrolled_loss(model, batch, cfg, noise)
    report["grad_norm"] = optimizer.step()
    return report


# ---------------------------------------------------------------------------
# Full training run
# ---------------------------------------------------------------------------

def run_training(env_factory, model: Model, search_cfg: SearchConfig,
                 train_cfg: TrainConfig, seed: int,
                 eval_interval: int = 2000, eval_episodes: int = 32,
                 eval_fn=None, on_metrics=None, log=None) -> list[dict]:
    """Warmup-fill the buffer, then alternate collection and gradient steps.

    ``env_factory(seed)`` builds a fresh environment; ``eval_fn(model, step)``
    (when given) returns a metrics-row dict appended every ``eval_interval``
    steps and forwarded to ``on_metrics``.  Returns the list of metric rows.
    """
    seq = np.random.SeedSequence(seed)
    rng_env, rng_act, rng_train, _ = [np.random.default_rng(s) for s in seq.spawn(4)]
    env = env_factory(seed)
    buffer = ReplayBuffer(train_cfg.buffer_capacity, train_cfg.min_buffer)
    target_model = model.clone()
    optimizer = AdamW(model.params(),
                      learning_rate=train_cfg.learning_rate,
                      weight_decay=train_cfg.weight_decay,
                      max_grad_norm=train_cfg.max_grad_norm)

    while not buffer.can_sample:
        buffer.add(random_episode(env, rng_env))

    rows = []
    window: list[dict] = []
    for step in range(1, train_cfg.total_steps + 1):
        if train_cfg.collect_interval and (step - 1) % train_cfg.collect_interval == 0:
            buffer.add(collect_episode(env, model, search_cfg, rng_act,
                                       train_cfg.acting_temperature))
        window.append(train_step(model, target_model, optimizer, buffer,
                                 train_cfg, search_cfg.discount, rng_train))
        if step % train_cfg.target_interval == 0:
            target_model.copy_weights_from(model)
        if eval_interval and step % eval_interval == 0:
            row = {"step": step, "seed": seed}
            for key in ("loss_total", "loss_policy", "loss_value",
                        "loss_reward", "loss_recon", "loss_sparsity"):
                row[key] = float(np.mean([w[key] for w in window]))
            window = []
            if eval_fn is not None:
                row.update(eval_fn(model, step))
            rows.append(row)
            if on_metrics is not None:
                on_metrics(row)
            if log is not None:
                log(row)
    return rows
