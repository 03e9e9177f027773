"""
Sequence-conditioned critics trained by Implicit Q-Learning.

V is fit by expectile regression towards the target critic:

    L_V = E[ |tau - 1(u < 0)| u^2 ],  u = Qbar(s, a) - V(s)

and Q by temporal-difference regression that bootstraps from V only, so no
action outside the dataset is ever queried:

    L_Q = E[ (r + gamma * V(s') - Q(s, a))^2 ]

The target critic follows Q by Polyak averaging.
"""

from __future__ import annotations

import copy
import json
import logging
from collections.abc import Sequence
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .const import ROSTER_HASH, STATE_DIM
from .exceptions import ArtifactMismatchError
from .neural import (
    AdamW,
    Linear,
    Module,
    Tensor,
    Transformer,
    TransformerConfig,
    expectile_loss,
    load_checkpoint,
    no_grad,
    parameter,
    save_checkpoint,
    stack,
    truncated_normal,
)
from .trajectory import DatasetStats, Trajectory

_LOGGER = logging.getLogger(__name__)


# pylint: disable=too-many-instance-attributes
@dataclass(frozen=True)
class IqlConfig:
    """The [iql] section."""

    gamma: float = 0.99
    polyak_tau: float = 0.01
    expectile: float = 0.7
    hidden: int = 512
    n_layers: int = 6
    n_heads: int = 8
    seq_len: int = 10
    return_scale: float = 2000.0
    action_scale: float = 10.0
    lr: float = 1e-4
    weight_decay: float = 1e-2
    eps: float = 1e-8
    batch_size: int = 128
    steps: int = 20000
    max_grad_norm: float = 1.0
    dropout_rate: float = 0.0
    log_every: int = 500
    awr_beta: float = 3.0
    awr_max_weight: float = 100.0

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0.0 < self.expectile < 1.0:
            raise ValueError(f"expectile must lie in (0, 1), got {self.expectile}")
        if not 0.0 < self.polyak_tau <= 1.0:
            raise ValueError(f"polyak_tau must lie in (0, 1], got {self.polyak_tau}")
        if self.seq_len < 1 or self.batch_size < 1 or self.steps < 0:
            raise ValueError("seq_len and batch_size must be positive")
        if self.return_scale <= 0 or self.action_scale <= 0 or self.lr <= 0:
            raise ValueError("return_scale, action_scale and lr must be positive")
        if self.awr_beta < 0 or self.awr_max_weight <= 0:
            raise ValueError("awr_beta must be non-negative and awr_max_weight positive")

    def transformer(self, items: int) -> TransformerConfig:
        """Return the transformer shape for windows of the given item count."""
        return TransformerConfig(
            d_model=self.hidden,
            n_heads=self.n_heads,
            n_layers=self.n_layers,
            max_seq_len=items,
            dropout_rate=self.dropout_rate,
            causal=True,
        )


@dataclass(frozen=True)
class IqlWindow:
    """The last seq_len states, the actions taken in them and their validity."""

    states: np.ndarray
    actions: np.ndarray
    valid: np.ndarray


def iql_window(
    states: Sequence[np.ndarray] | np.ndarray,
    actions: Sequence[float] | np.ndarray,
    t: int,
    stats: DatasetStats,
    config: IqlConfig,
    action: float | None = None,
) -> IqlWindow:
    """
    Assemble the window of steps t-L+1..t.

    The action slot of step t holds `action` when given (the action being
    evaluated), otherwise actions[t].
    """
    if t < 0 or len(states) <= t:
        raise ValueError(f"window ending at step {t} needs states up to {t}")
    if action is None and len(actions) <= t:
        raise ValueError(f"no action recorded for step {t}")
    length = config.seq_len
    window_states = np.zeros((length, len(stats.state_mean)), dtype=np.float32)
    window_actions = np.zeros(length, dtype=np.float32)
    valid = np.zeros(length, dtype=bool)
    for slot in range(length):
        step = t - length + 1 + slot
        if step < 0:
            continue
        valid[slot] = True
        window_states[slot] = stats.normalize(np.asarray(states[step]))
        value = action if (step == t and action is not None) else actions[step]
        window_actions[slot] = float(value) / config.action_scale
    return IqlWindow(window_states, window_actions, valid)


class _WindowEncoder(Module):
    """Shared body: per-item projections, learned positions, causal transformer."""

    def __init__(self, state_dim: int, items: int, config: IqlConfig, rng: np.random.Generator) -> None:
        self.state_in = Linear(state_dim, config.hidden, rng)
        self.position = parameter(truncated_normal(rng, (items, config.hidden)))
        self.transformer = Transformer(config.transformer(items), rng)
        self.out = Linear(config.hidden, 1, rng)

    def encode(self, items: Tensor, valid: np.ndarray) -> Tensor:
        batch, count, _ = items.shape
        hidden = self.transformer(items + self.position[:count], valid)
        return self.out(hidden[:, -1, :]).reshape(batch)


class QNetwork(_WindowEncoder):
    """Q over the interleaved (s, a) window; reads the final action item."""

    def __init__(self, state_dim: int, config: IqlConfig, rng: np.random.Generator) -> None:
        super().__init__(state_dim, 2 * config.seq_len, config, rng)
        self.action_in = Linear(1, config.hidden, rng)

    def forward(self, states: np.ndarray, actions: np.ndarray, valid: np.ndarray) -> Tensor:
        """Return (B,) Q values for windows of shape (B, L, D) and actions (B, L)."""
        s_emb = self.state_in(Tensor(states))
        a_emb = self.action_in(Tensor(np.asarray(actions)[..., None]))
        batch, length, width = s_emb.shape
        items = stack([s_emb, a_emb], axis=2).reshape(batch, 2 * length, width)
        return self.encode(items, np.repeat(valid, 2, axis=1))


class VNetwork(_WindowEncoder):
    """V over the state-only window; reads the final state."""

    def __init__(self, state_dim: int, config: IqlConfig, rng: np.random.Generator) -> None:
        super().__init__(state_dim, config.seq_len, config, rng)

    def forward(self, states: np.ndarray, valid: np.ndarray) -> Tensor:
        """Return (B,) state values for windows of shape (B, L, D)."""
        return self.encode(self.state_in(Tensor(states)), valid)


def v_loss(q_target: np.ndarray, v: Tensor, tau: float) -> Tensor:
    """Expectile regression of V towards the (frozen) target Q values."""
    if v.data.size == 0:
        raise ValueError("v_loss() needs a non-empty batch")
    return expectile_loss(Tensor(np.asarray(q_target, dtype=v.data.dtype)) - v, tau)


def td_target(
    rewards: np.ndarray, next_v: np.ndarray | None, terminals: np.ndarray, gamma: float
) -> np.ndarray:
    """Return r + gamma * V(s'), with V(s') = 0 on terminal steps."""
    rewards = np.asarray(rewards, dtype=np.float64)
    terminals = np.asarray(terminals, dtype=bool)
    if next_v is None:
        if not terminals.all():
            raise ValueError("non-terminal steps need the next-state value")
        return rewards
    return rewards + gamma * np.where(terminals, 0.0, np.asarray(next_v, dtype=np.float64))


def q_loss(
    q: Tensor, rewards: np.ndarray, next_v: np.ndarray | None, terminals: np.ndarray, gamma: float
) -> Tensor:
    """Mean squared TD error of Q against r + gamma * V(s')."""
    if q.data.size == 0:
        raise ValueError("q_loss() needs a non-empty batch")
    target = Tensor(td_target(rewards, next_v, terminals, gamma).astype(q.data.dtype))
    residual = target - q
    return (residual * residual).mean()


def polyak_update(target: Module, online: Module, tau: float) -> None:
    """target <- (1 - tau) * target + tau * online, parameter by parameter."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    target_params = target.named_parameters()
    online_params = online.named_parameters()
    if target_params.keys() != online_params.keys():
        raise ArtifactMismatchError("target and online networks have different parameters")
    for name, param in target_params.items():
        source = online_params[name].data
        if source.shape != param.data.shape:
            raise ArtifactMismatchError(f"{name}: shape {source.shape} vs {param.data.shape}")
        param.data = ((1.0 - tau) * param.data + tau * source).astype(param.data.dtype)


def awr_weight(q: np.ndarray, v: np.ndarray, beta: float, max_weight: float = 100.0) -> np.ndarray:
    """Advantage weight min(exp(beta * (Q - V)), max_weight)."""
    advantage = np.asarray(q, dtype=np.float64) - np.asarray(v, dtype=np.float64)
    return np.minimum(np.exp(np.minimum(beta * advantage, np.log(max_weight))), max_weight)


@dataclass
class TransitionSet:
    """Flat arrays of (window, reward, next window, terminal) transitions."""

    states: np.ndarray
    actions: np.ndarray
    valid: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    next_valid: np.ndarray
    terminals: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)

    def take(self, index: np.ndarray) -> TransitionSet:
        """Return the transitions at index."""
        return TransitionSet(
            self.states[index],
            self.actions[index],
            self.valid[index],
            self.rewards[index],
            self.next_states[index],
            self.next_valid[index],
            self.terminals[index],
        )

    @classmethod
    def from_trajectories(
        cls, trajectories: Sequence[Trajectory], stats: DatasetStats, config: IqlConfig
    ) -> TransitionSet:
        """Cut every step of every trajectory into a transition; rewards are scaled."""
        windows, next_windows, rewards, terminals = [], [], [], []
        for traj in trajectories:
            last = len(traj) - 1
            for t in range(len(traj)):
                windows.append(iql_window(traj.states, traj.actions, t, stats, config))
                # the terminal next window is never evaluated
                next_t = min(t + 1, last)
                next_windows.append(iql_window(traj.states, traj.actions, next_t, stats, config))
                rewards.append(float(traj.rewards[t]) / config.return_scale)
                terminals.append(t == last)
        if not windows:
            raise ValueError("cannot build transitions from an empty dataset")
        return cls(
            states=np.stack([w.states for w in windows]),
            actions=np.stack([w.actions for w in windows]),
            valid=np.stack([w.valid for w in windows]),
            rewards=np.asarray(rewards, dtype=np.float32),
            next_states=np.stack([w.states for w in next_windows]),
            next_valid=np.stack([w.valid for w in next_windows]),
            terminals=np.asarray(terminals, dtype=bool),
        )


class IqlTrainer:
    """Alternates a V step, a Q step and a Polyak update per batch."""

    def __init__(
        self, config: IqlConfig, transitions: TransitionSet, seed: int, state_dim: int = STATE_DIM
    ) -> None:
        if len(transitions) < config.batch_size:
            raise ValueError(
                f"dataset of {len(transitions)} transitions is too small for a batch of {config.batch_size}"
            )
        self.config = config
        self.transitions = transitions
        self.state_dim = state_dim
        self.rng = np.random.default_rng([seed, 2])
        self.q = QNetwork(state_dim, config, np.random.default_rng([seed, 0]))
        self.v = VNetwork(state_dim, config, np.random.default_rng([seed, 1]))
        self.q_target = copy.deepcopy(self.q)
        clip = config.max_grad_norm or None
        self.q_optimizer = AdamW(
            self.q.named_parameters(), config.lr, config.weight_decay, config.eps, max_grad_norm=clip
        )
        self.v_optimizer = AdamW(
            self.v.named_parameters(), config.lr, config.weight_decay, config.eps, max_grad_norm=clip
        )
        self.log: list[dict[str, float]] = []
        self.last_awr = (1.0, 1.0)

    def step(self, batch: TransitionSet) -> tuple[float, float]:
        """Train on one batch and return (v_loss, q_loss)."""
        config = self.config
        self.q.train()
        self.v.train()
        with no_grad():
            target_q = self.q_target(batch.states, batch.actions, batch.valid).numpy()

        self.v_optimizer.zero_grad()
        v_pred = self.v(batch.states, batch.valid)
        weights = awr_weight(target_q, v_pred.numpy(), config.awr_beta, config.awr_max_weight)
        self.last_awr = (float(weights.mean()), float(weights.max()))
        loss_v = v_loss(target_q, v_pred, config.expectile)
        loss_v.backward()
        self.v_optimizer.step()

        with no_grad():
            next_v = self.v(batch.next_states, batch.next_valid).numpy()
        self.q_optimizer.zero_grad()
        loss_q = q_loss(
            self.q(batch.states, batch.actions, batch.valid),
            batch.rewards,
            next_v,
            batch.terminals,
            config.gamma,
        )
        loss_q.backward()
        self.q_optimizer.step()

        polyak_update(self.q_target, self.q, config.polyak_tau)
        return loss_v.item(), loss_q.item()

    def train(self, steps: int | None = None) -> list[dict[str, float]]:
        """Run the training loop and return the per-step losses and advantage weights."""
        steps = self.config.steps if steps is None else steps
        for step in range(1, steps + 1):
            index = self.rng.choice(len(self.transitions), size=self.config.batch_size, replace=False)
            loss_v, loss_q = self.step(self.transitions.take(index))
            awr_mean, awr_max = self.last_awr
            self.log.append(
                {"step": step, "v_loss": loss_v, "q_loss": loss_q, "awr_mean": awr_mean, "awr_max": awr_max}
            )
            if step % self.config.log_every == 0 or step == steps:
                _LOGGER.info("iql step %s/%s v_loss %.6f q_loss %.6f", step, steps, loss_v, loss_q)
        return self.log


def train_iql(
    trajectories: Sequence[Trajectory],
    stats: DatasetStats,
    config: IqlConfig,
    seed: int,
    steps: int | None = None,
) -> IqlTrainer:
    """Train Q and V on a trajectory dataset and return the trainer holding them."""
    trainer = IqlTrainer(config, TransitionSet.from_trajectories(trajectories, stats, config), seed)
    trainer.train(steps)
    return trainer


@dataclass
class Critic:
    """A trained Q network with the normalization it was trained under."""

    q: QNetwork
    config: IqlConfig
    stats: DatasetStats
    v: VNetwork | None = None

    def window(
        self, states: Sequence[np.ndarray] | np.ndarray, actions: Sequence[float] | np.ndarray, t: int
    ) -> IqlWindow:
        """Build the window ending at step t; the step-t action slot is filled per query."""
        return iql_window(states, actions, t, self.stats, self.config, action=0.0)

    def q_values(self, window: IqlWindow, actions: Sequence[float]) -> np.ndarray:
        """Return Q of the window with its final action replaced by each of actions."""
        if window.states.shape != (self.config.seq_len, len(self.stats.state_mean)):
            raise ValueError(f"malformed window of shape {window.states.shape}")
        if not window.valid[-1]:
            raise ValueError("the final window slot must be a real step")
        low, high = self.stats.action_low, self.stats.action_high
        for action in actions:
            if not low <= action <= high:
                _LOGGER.warning("Action %s lies outside the training range [%s, %s]", action, low, high)
        count = len(actions)
        window_actions = np.repeat(window.actions[None, :], count, axis=0)
        window_actions[:, -1] = np.asarray(actions, dtype=np.float32) / self.config.action_scale
        states = np.repeat(window.states[None], count, axis=0)
        valid = np.repeat(window.valid[None], count, axis=0)
        self.q.eval()
        with no_grad():
            return self.q(states, window_actions, valid).numpy().astype(np.float64)

    def q_value(self, window: IqlWindow, action: float) -> float:
        """Return Q(window, action)."""
        return float(self.q_values(window, [action])[0])


def q_value(critic: Critic, window: IqlWindow, action: float) -> float:
    """Return the critic's value of taking action at the end of window."""
    return critic.q_value(window, action)


def save_iql(
    path: str | Path, trainer: IqlTrainer, stats: DatasetStats, extra: dict[str, Any] | None = None
) -> None:
    """Write Q, target Q and V to one checkpoint."""
    params: dict[str, np.ndarray] = {}
    for prefix, module in (("q", trainer.q), ("q_target", trainer.q_target), ("v", trainer.v)):
        params.update({f"{prefix}.{name}": value for name, value in module.state_dict().items()})
    meta: dict[str, Any] = {
        "kind": "iql",
        "config": asdict(trainer.config),
        "stats": stats.to_dict(),
        "state_dim": trainer.state_dim,
        "roster_hash": ROSTER_HASH,
    }
    meta.update(extra or {})
    save_checkpoint(path, params, meta)


def load_critic(path: str | Path) -> Critic:
    """Read an IQL checkpoint written by save_iql()."""
    params, meta, _ = load_checkpoint(path)
    if meta.get("kind") != "iql":
        raise ArtifactMismatchError(f"{path} is not an IQL checkpoint")
    if meta.get("roster_hash") != ROSTER_HASH:
        raise ArtifactMismatchError(f"{path} was trained on state roster {meta.get('roster_hash')}")
    config = IqlConfig(**meta["config"])
    rng = np.random.default_rng(0)
    q = QNetwork(meta["state_dim"], config, rng)
    v = VNetwork(meta["state_dim"], config, rng)
    q.load_state_dict({k[2:]: a for k, a in params.items() if k.startswith("q.")})
    v.load_state_dict({k[2:]: a for k, a in params.items() if k.startswith("v.")})
    return Critic(q, config, DatasetStats.from_dict(meta["stats"]), v)


def write_training_log(path: str | Path, log: Sequence[dict[str, float]]) -> None:
    """Write the (step, v_loss, q_loss) curve as a JSON list."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(list(log), indent=1), encoding="utf-8")
