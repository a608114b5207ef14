"""The learned model: encoder, masked latent dynamics, structure net, decoder,
and the policy / value / reward heads.

The structure net maps a latent state to per-variable Bernoulli relevance
probabilities.  During training those probabilities are sampled through the
straight-through Gumbel-Sigmoid; during search they are thresholded into a
deterministic mask.  It is a separate MLP on the latent with no trunk shared
with the other heads, so restricting its training signal to the
reconstruction objective reduces to plain parameter partitioning.

The policy head covers the full joint action space; priors over abstract
actions are obtained by marginalization at search time.  The reward head is
applied to the post-transition latent.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .actions import AbstractionMask, FactoredActionSpace
from .nn import MLP, ParamTensor, check_finite, gumbel_sigmoid_st, load_checkpoint, save_checkpoint


@dataclass(frozen=True)
class ModelConfig:
    observation_width: int
    cardinalities: tuple[int, ...]
    latent_width: int = 64
    hidden_width: int = 128
    hidden_layers: int = 2

    def space(self) -> FactoredActionSpace:
        return FactoredActionSpace(tuple(self.cardinalities))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cardinalities"] = list(self.cardinalities)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        d["cardinalities"] = tuple(d["cardinalities"])
        return cls(**d)


class Model:
    """Bundle of the learned networks plus convenience inference methods.

    Inference methods take and return batch-first 2-D arrays; they are pure
    given the parameters, so read-only snapshots can be shared freely.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        space = config.space()
        self.space = space
        hid = [config.hidden_width] * config.hidden_layers
        lat = config.latent_width
        self.encoder = MLP.create(rng, [config.observation_width, *hid, lat], "encoder")
        self.structure = MLP.create(rng, [lat, *hid, space.n], "structure",
                                    output_activation="sigmoid")
        self.dynamics_net = MLP.create(rng, [lat + space.encoding_width, *hid, lat], "dynamics")
        self.decoder = MLP.create(rng, [lat, *hid, config.observation_width], "decoder")
        self.policy_head = MLP.create(rng, [lat, *hid, space.size], "policy")
        self.value_head = MLP.create(rng, [lat, *hid, 1], "value")
        self.reward_head = MLP.create(rng, [lat, *hid, 1], "reward")

    # -- inference ---------------------------------------------------------

    def encode(self, observation: np.ndarray) -> np.ndarray:
        """Map observations (batch, obs_width) to latents (batch, latent)."""
        return self.encoder.apply(np.asarray(observation, dtype=np.float32))

    def infer_structure(self, z: np.ndarray) -> np.ndarray:
        """Per-variable relevance probabilities in [0, 1], shape (batch, n)."""
        return self.structure.apply(z)

    def dynamics(self, z: np.ndarray, masked_action_encoding: np.ndarray) -> np.ndarray:
        """Next latent from the current latent and a masked action encoding."""
        return self.dynamics_net.apply(
            np.concatenate([z, masked_action_encoding], axis=1))

    def decode(self, z: np.ndarray) -> np.ndarray:
        """Reconstructed observation, shape (batch, obs_width)."""
        return self.decoder.apply(z)

    def predict_heads(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(policy logits over joint actions, value, reward), batched.

        Values and rewards come back as shape (batch,) scalars.
        """
        logits = self.policy_head.apply(z)
        value = self.value_head.apply(z)[:, 0]
        reward = self.reward_head.apply(z)[:, 0]
        return logits, value, reward

    # -- parameter plumbing --------------------------------------------------

    def networks(self) -> dict[str, MLP]:
        return {
            "encoder": self.encoder,
            "structure": self.structure,
            "dynamics": self.dynamics_net,
            "decoder": self.decoder,
            "policy": self.policy_head,
            "value": self.value_head,
            "reward": self.reward_head,
        }

    def params(self) -> list[ParamTensor]:
        return [p for net in self.networks().values() for p in net.params()]

    def structure_params(self) -> list[ParamTensor]:
        return self.structure.params()

    def copy_weights_from(self, other: Model) -> None:
        for mine, theirs in zip(self.params(), other.params()):
            np.copyto(mine.data, theirs.data)

    def clone(self) -> Model:
        out = Model(self.config, np.random.default_rng(0))
        out.copy_weights_from(self)
        return out

    def save(self, path: str, extra_meta: dict | None = None) -> None:
        meta = {"model_config": self.config.to_dict()}
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, self.params(), meta)

    @classmethod
    def load(cls, path: str) -> tuple[Model, dict]:
        meta, tensors = load_checkpoint(path)
        config = ModelConfig.from_dict(meta["model_config"])
        model = cls(config, np.random.default_rng(0))
        for p in model.params():
            if p.name not in tensors:
                raise ValueError(f"checkpoint missing tensor {p.name}")
            if tensors[p.name].shape != p.shape:
                raise ValueError(f"checkpoint tensor {p.name} has shape "
                                 f"{tensors[p.name].shape}, expected {p.shape}")
            np.copyto(p.data, tensors[p.name])
        return model, meta


# ---------------------------------------------------------------------------
# Mask construction
# ---------------------------------------------------------------------------

def sample_mask(probs: np.ndarray, rng: np.random.Generator,
                beta: float = 1.0) -> AbstractionMask:
    """Sample a relevance mask from Bernoulli parameters (training path)."""
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    u = rng.random(probs.shape)
    hard, _, _ = gumbel_sigmoid_st(probs, u, beta)
    return AbstractionMask(bits=tuple(int(b) for b in hard),
                           probs=tuple(float(p) for p in probs))


def deterministic_mask(probs: np.ndarray, tau: float) -> AbstractionMask:
    """Threshold relevance probabilities into a mask (search path).

    Bit i is set iff probs[i] > tau (strict).
    """
    if not 0.0 <= tau < 1.0:
        raise ValueError(f"tau must lie in [0, 1), got {tau}")
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    check_finite(probs, "relevance probabilities")
    return AbstractionMask(bits=tuple(int(p > tau) for p in probs),
                           probs=tuple(float(np.clip(p, 0.0, 1.0)) for p in probs))
