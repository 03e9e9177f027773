"""
The low-level decision model.

Two embedding paths feed one causal transformer: reasoning tokens go through
a token embedding, numeric decision items (return-to-go scalars, 16-feature
states and past actions) each go through their own input projection and
then a shared decision MLP. The CoT block comes first; the action head reads
the representation of the final item, the current state.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .bidding import cpa_ratio, penalty
from .const import ROSTER_HASH, STATE_DIM
from .exceptions import ArtifactMismatchError
from .neural import (
    MLP,
    AdamW,
    Linear,
    Module,
    Tensor,
    Transformer,
    TransformerConfig,
    concat,
    embedding,
    load_checkpoint,
    no_grad,
    parameter,
    save_checkpoint,
    stack,
    truncated_normal,
)
from .think import EMPTY_COT, NONE, CotResponse, Direction, parse_cot
from .tokenizer import PAD_ID, Tokenizer
from .trajectory import CotEntry, DatasetStats, Trajectory

_LOGGER = logging.getLogger(__name__)

COT_SEGMENT = 0
NUMERIC_SEGMENT = 1


def num_items(seq_len: int) -> int:
    """Return the numeric item count of a full window: 3(L+1) - 1."""
    return 3 * (seq_len + 1) - 1


# pylint: disable=too-many-instance-attributes
@dataclass(frozen=True)
class ActModelConfig:
    """The [act_model] section."""

    transformer: TransformerConfig = field(
        default_factory=lambda: TransformerConfig(d_model=64, n_heads=4, n_layers=2, max_seq_len=192)
    )
    decision_widths: tuple[int, ...] = (64, 64, 64)
    head_widths: tuple[int, ...] = (64, 64, 1)
    seq_len: int = 10
    max_cot_len: int = 128
    vocab_size: int = 2048
    return_scale: float = 2000.0
    action_range: tuple[float, float] = (0.0, 10.0)
    lr: float = 3e-4
    weight_decay: float = 1e-2
    batch_size: int = 64
    steps: int = 2000
    max_grad_norm: float = 0.0
    log_every: int = 100

    def __post_init__(self) -> None:
        d_model = self.transformer.d_model
        if not self.decision_widths or self.decision_widths[-1] != d_model:
            raise ValueError(f"decision_widths must end in d_model={d_model}")
        if not self.head_widths or self.head_widths[-1] != 1:
            raise ValueError("head_widths must end in 1")
        if self.seq_len < 0 or self.max_cot_len < 0:
            raise ValueError("seq_len and max_cot_len must be non-negative")
        if self.max_cot_len + num_items(self.seq_len) > self.transformer.max_seq_len:
            raise ValueError(
                f"max_cot_len {self.max_cot_len} + {num_items(self.seq_len)} numeric items "
                f"exceed max_seq_len {self.transformer.max_seq_len}"
            )
        if self.return_scale <= 0 or self.lr <= 0 or self.batch_size < 1:
            raise ValueError("return_scale, lr and batch_size must be positive")
        low, high = self.action_range
        if not 0 <= low < high:
            raise ValueError(f"bad action range {self.action_range}")

    def to_dict(self) -> dict[str, Any]:
        """Return a JSON-compatible dict."""
        return asdict(self)


@dataclass(frozen=True)
class DecisionSequence:
    """
    Numeric window ending at step t: R and s for L+1 steps, a for the L before t.

    Positions before the episode start are zero items with valid False.
    """

    returns: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    valid: np.ndarray
    normalized: bool = True

    @property
    def seq_len(self) -> int:
        """Return L."""
        return len(self.actions)

    def items(self) -> int:
        """Return the number of numeric items, 3(L+1) - 1."""
        return num_items(self.seq_len)

    def item_valid(self) -> np.ndarray:
        """Return the validity of every item in R, s, a interleaved order."""
        steps = np.repeat(self.valid[:, None], 3, axis=1).reshape(-1)
        return steps[:-1]


def build_window(
    states: Sequence[np.ndarray] | np.ndarray,
    actions: Sequence[float] | np.ndarray,
    returns: Sequence[float] | np.ndarray,
    t: int,
    stats: DatasetStats,
    seq_len: int,
    return_scale: float,
) -> DecisionSequence:
    """
    Assemble the normalized window ending at step t.

    Parameters:
        states: states[i] observed before action i, for i <= t
        actions: actions taken, for i < t
        returns: return-to-go conditioning R_i, for i <= t (raw units)
        t: current step
        stats: dataset statistics used to standardize states
        seq_len: window length L
        return_scale: divisor applied to returns
    """
    if t < 0 or len(states) <= t or len(returns) <= t or len(actions) < t:
        raise ValueError(f"window ending at step {t} needs states and returns up to {t}")
    count = seq_len + 1
    window_returns = np.zeros(count, dtype=np.float32)
    window_states = np.zeros((count, STATE_DIM), dtype=np.float32)
    window_actions = np.zeros(seq_len, dtype=np.float32)
    valid = np.zeros(count, dtype=bool)
    for slot in range(count):
        step = t - seq_len + slot
        if step < 0:
            continue
        valid[slot] = True
        window_returns[slot] = float(returns[step]) / return_scale
        window_states[slot] = stats.normalize(np.asarray(states[step]))
        if slot < seq_len:
            window_actions[slot] = float(actions[step])
    return DecisionSequence(window_returns, window_states, window_actions, valid)


def anchor_filter(direction: Direction, a_t: float, a_prev: float) -> bool:
    """Accept a CoT unless its direction contradicts the sign of a_t - a_prev."""
    delta = a_t - a_prev
    if direction == "INCREASE":
        return delta >= 0
    if direction == "DECREASE":
        return delta <= 0
    return True


def rtg_reweight(traj: Trajectory, w: float) -> np.ndarray:
    """Return R_t + w * penalty over steps t..T, the constraint-aware return-to-go."""
    traj.require_complete()
    rtg = traj.returns_to_go.astype(np.float64)
    if w == 0:
        return traj.returns_to_go.copy()
    tail_cost = np.cumsum(traj.costs[::-1].astype(np.float64))[::-1]
    tail_perf = np.cumsum(traj.perfs[::-1].astype(np.float64))[::-1]
    penalties = np.array(
        [penalty(cpa_ratio(float(c), float(p), traj.cpa_constraint)) for c, p in zip(tail_cost, tail_perf)]
    )
    return (rtg + w * penalties).astype(np.float32)


def inference_rtg_init(stats: DatasetStats | None, return_scale: float, w: float = 0.0) -> float:
    """
    Return the initial conditioning return, scaled.

    R_0 is the largest return in the training data; with a reweighted model
    the penalty term is taken as 1, adding w.
    """
    if stats is None:
        raise ValueError("inference_rtg_init() needs dataset statistics")
    return (stats.max_return + w) / return_scale


@dataclass(frozen=True)
class ActSample:
    """One training example: CoT token ids, the numeric window and the labeled action."""

    cot_ids: np.ndarray
    seq: DecisionSequence
    action: float
    direction: Direction = NONE


# pylint: disable=too-many-instance-attributes
class ActModel(Module):
    """Dual-embedding causal transformer predicting the next bidding parameter."""

    def __init__(self, config: ActModelConfig, vocab_size: int, rng: np.random.Generator) -> None:
        d_model = config.transformer.d_model
        self.config = config
        self.vocab_size = vocab_size
        self.token_embedding = parameter(truncated_normal(rng, (vocab_size, d_model)))
        self.cot_position = parameter(truncated_normal(rng, (max(config.max_cot_len, 1), d_model)))
        self.item_position = parameter(truncated_normal(rng, (num_items(config.seq_len), d_model)))
        self.segment = parameter(truncated_normal(rng, (2, d_model)))
        self.return_in = Linear(1, d_model, rng)
        self.state_in = Linear(STATE_DIM, d_model, rng)
        self.action_in = Linear(1, d_model, rng)
        self.decision_mlp = MLP(d_model, config.decision_widths, rng)
        self.transformer = Transformer(config.transformer, rng)
        self.head = MLP(d_model, config.head_widths, rng)

    def __repr__(self) -> str:
        """Return representation of ActModel object."""
        return f"ActModel(d_model={self.config.transformer.d_model}, vocab={self.vocab_size})"

    def embed_numeric(self, seqs: Sequence[DecisionSequence]) -> tuple[Tensor, np.ndarray]:
        """Return (B, 3(L+1)-1, d) decision embeddings and their validity."""
        for seq in seqs:
            if not seq.normalized:
                raise ValueError("decision sequences must be normalized before embedding")
            if seq.seq_len != self.config.seq_len:
                raise ValueError(f"window length {seq.seq_len}, model expects {self.config.seq_len}")
        length = self.config.seq_len
        returns = Tensor(np.stack([s.returns for s in seqs])[..., None])
        states = Tensor(np.stack([s.states for s in seqs]))
        r_emb = self.return_in(returns)
        s_emb = self.state_in(states)
        if length:
            actions = Tensor(np.stack([s.actions for s in seqs])[..., None])
            a_emb = self.action_in(actions)
            batch, _, width = r_emb.shape
            steps = stack([r_emb[:, :length], s_emb[:, :length], a_emb], axis=2)
            head = steps.reshape(batch, 3 * length, width)
            items = concat([head, r_emb[:, length:], s_emb[:, length:]], axis=1)
        else:
            items = concat([r_emb, s_emb], axis=1)
        hidden = self.decision_mlp(items)
        positions = self.item_position[: num_items(length)]
        out = hidden + positions + self.segment[NUMERIC_SEGMENT]
        valid = np.stack([s.item_valid() for s in seqs])
        return out, valid

    def embed_cot(self, cot_ids: Sequence[np.ndarray]) -> tuple[Tensor | None, np.ndarray]:
        """Return (B, Tc, d) token embeddings, left-padded to the longest CoT, and validity."""
        batch = len(cot_ids)
        longest = max((len(ids) for ids in cot_ids), default=0)
        if longest > self.config.max_cot_len:
            raise ValueError(f"CoT of {longest} tokens exceeds max_cot_len {self.config.max_cot_len}")
        if longest == 0:
            return None, np.zeros((batch, 0), dtype=bool)
        ids = np.full((batch, longest), PAD_ID, dtype=np.int64)
        pos = np.zeros((batch, longest), dtype=np.int64)
        valid = np.zeros((batch, longest), dtype=bool)
        for row, tokens in enumerate(cot_ids):
            count = len(tokens)
            if count:
                if int(np.max(tokens)) >= self.vocab_size:
                    raise ValueError("token id outside the vocabulary")
                ids[row, longest - count :] = tokens
                pos[row, longest - count :] = np.arange(count)
                valid[row, longest - count :] = True
        out = (
            embedding(self.token_embedding, ids)
            + embedding(self.cot_position, pos)
            + self.segment[COT_SEGMENT]
        )
        return out, valid

    def dual_embed(
        self, cot_ids: Sequence[np.ndarray], seqs: Sequence[DecisionSequence]
    ) -> tuple[Tensor, np.ndarray]:
        """Return the fused input sequence (CoT block first) and its validity mask."""
        if len(cot_ids) != len(seqs):
            raise ValueError(f"{len(cot_ids)} CoTs for {len(seqs)} windows")
        numeric, numeric_valid = self.embed_numeric(seqs)
        cot, cot_valid = self.embed_cot(cot_ids)
        if cot is None:
            return numeric, numeric_valid
        total = cot.shape[1] + numeric.shape[1]
        if total > self.config.transformer.max_seq_len:
            raise ValueError(f"sequence of {total} exceeds max_seq_len")
        return concat([cot, numeric], axis=1), np.concatenate([cot_valid, numeric_valid], axis=1)

    def forward(self, cot_ids: Sequence[np.ndarray], seqs: Sequence[DecisionSequence]) -> Tensor:
        """Return the (B,) unclamped action predictions."""
        if not seqs:
            raise ValueError("empty batch")
        x, valid = self.dual_embed(cot_ids, seqs)
        hidden = self.transformer(x, valid)
        last = hidden[:, -1, :]
        return self.head(last).reshape(len(seqs)) * self.config.action_range[1]

    def predict(self, cot_ids: Sequence[np.ndarray], seqs: Sequence[DecisionSequence]) -> np.ndarray:
        """Return clamped actions, without recording a graph."""
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                raw = self.forward(cot_ids, seqs).numpy()
        finally:
            self.train(was_training)
        low, high = self.config.action_range
        return np.clip(raw.astype(np.float64), low, high)


def predict_action(
    model: ActModel, tokenizer: Tokenizer, cot: CotResponse, seq: DecisionSequence
) -> float:
    """Return the clamped action for one CoT and window."""
    ids = tokenizer.encode(cot.text, model.config.max_cot_len)
    return float(model.predict([ids], [seq])[0])


def train_step(model: ActModel, optimizer: AdamW, batch: Sequence[ActSample]) -> float:
    """One AdamW step on the mean |predicted - labeled| action; returns the loss."""
    if not batch:
        raise ValueError("train_step() needs a non-empty batch")
    model.train()
    optimizer.zero_grad()
    predicted = model([s.cot_ids for s in batch], [s.seq for s in batch])
    target = Tensor(np.array([s.action for s in batch], dtype=predicted.data.dtype))
    loss = (predicted - target).abs().mean()
    loss.backward()
    optimizer.step()
    return loss.item()


@dataclass
class ActDataset:
    """Trajectories, CoT side-file entries and derived per-trajectory returns."""

    trajectories: list[Trajectory]
    cots: Mapping[tuple[str, int], CotEntry]
    stats: DatasetStats
    returns: list[np.ndarray]
    rejected: int = 0
    accepted: int = 0

    @classmethod
    def build(
        cls,
        trajectories: Sequence[Trajectory],
        cots: Mapping[tuple[str, int], CotEntry],
        stats: DatasetStats,
        rtg_weight: float = 0.0,
    ) -> ActDataset:
        """Precompute the (reweighted) returns of every trajectory."""
        if not trajectories:
            raise ValueError("cannot train on an empty dataset")
        returns = [rtg_reweight(traj, rtg_weight) for traj in trajectories]
        return cls(list(trajectories), cots, stats, returns)

    def sample(
        self,
        index: int,
        t: int,
        tokenizer: Tokenizer,
        config: ActModelConfig,
        use_cot: bool = True,
    ) -> ActSample:
        """Build the sample for step t of trajectory index, applying the anchor filter."""
        traj = self.trajectories[index]
        seq = build_window(
            traj.states, traj.actions, self.returns[index], t, self.stats, config.seq_len, config.return_scale
        )
        action = float(traj.actions[t])
        entry = self.cots.get((traj.traj_id, t)) if use_cot else None
        cot = EMPTY_COT if entry is None else parse_cot(entry.text)
        a_prev = float(traj.actions[t - 1]) if t > 0 else action
        if cot.direction != NONE and not anchor_filter(cot.direction, action, a_prev):
            self.rejected += 1
            cot = EMPTY_COT
        elif cot.direction != NONE:
            self.accepted += 1
        ids = tokenizer.encode(cot.text, config.max_cot_len)
        return ActSample(ids, seq, action, cot.direction)


# pylint: disable=too-many-instance-attributes
class ActTrainer:
    """Trains an ActModel on a dataset with its CoT side-file."""

    def __init__(
        self,
        config: ActModelConfig,
        dataset: ActDataset,
        tokenizer: Tokenizer,
        seed: int,
        use_cot: bool = True,
    ) -> None:
        self.config = config
        self.dataset = dataset
        self.tokenizer = tokenizer
        self.use_cot = use_cot
        self.rng = np.random.default_rng([seed, 1])
        self.model = ActModel(config, len(tokenizer), np.random.default_rng([seed, 0]))
        self.optimizer = AdamW(
            self.model.named_parameters(),
            lr=config.lr,
            weight_decay=config.weight_decay,
            max_grad_norm=config.max_grad_norm or None,
        )
        self.losses: list[dict[str, float]] = []

    def sample_batch(self, size: int | None = None) -> list[ActSample]:
        """Draw (trajectory, t) pairs uniformly."""
        size = size or self.config.batch_size
        trajectories = self.dataset.trajectories
        picks = self.rng.integers(0, len(trajectories), size=size)
        batch = []
        for index in picks:
            t = int(self.rng.integers(0, len(trajectories[index])))
            batch.append(self.dataset.sample(int(index), t, self.tokenizer, self.config, self.use_cot))
        return batch

    def train(self, steps: int | None = None) -> list[dict[str, float]]:
        """Run the training loop and return the loss curve."""
        steps = self.config.steps if steps is None else steps
        for step in range(1, steps + 1):
            loss = train_step(self.model, self.optimizer, self.sample_batch())
            self.losses.append({"step": step, "loss": loss})
            if step % self.config.log_every == 0 or step == steps:
                _LOGGER.info("act step %s/%s loss %.5f", step, steps, loss)
        _LOGGER.info(
            "Anchor filter kept %s and replaced %s CoTs", self.dataset.accepted, self.dataset.rejected
        )
        return self.losses


def save_act(
    path: str | Path,
    model: ActModel,
    tokenizer: Tokenizer,
    stats: DatasetStats,
    rtg_weight: float = 0.0,
    extra: dict[str, Any] | None = None,
    optimizer: AdamW | None = None,
) -> None:
    """Write an Act checkpoint with everything inference needs."""
    meta: dict[str, Any] = {
        "kind": "act",
        "config": model.config.to_dict(),
        "tokenizer": tokenizer.to_dict(),
        "stats": stats.to_dict(),
        "rtg_weight": rtg_weight,
        "roster_hash": ROSTER_HASH,
    }
    meta.update(extra or {})
    save_checkpoint(path, model.state_dict(), meta, optimizer.state if optimizer else None)


@dataclass
class ActBundle:
    """A loaded Act checkpoint."""

    model: ActModel
    tokenizer: Tokenizer
    stats: DatasetStats
    rtg_weight: float
    meta: dict[str, Any]

    def window(
        self, states: Sequence[np.ndarray], actions: Sequence[float], returns: Sequence[float], t: int
    ) -> DecisionSequence:
        """Build the model's window ending at step t."""
        config = self.model.config
        return build_window(states, actions, returns, t, self.stats, config.seq_len, config.return_scale)

    def act(self, cot: CotResponse, seq: DecisionSequence) -> float:
        """Return the clamped action under a CoT."""
        return predict_action(self.model, self.tokenizer, cot, seq)

    def act_many(self, cots: Sequence[CotResponse], seq: DecisionSequence) -> np.ndarray:
        """Return one action per CoT for the same window."""
        limit = self.model.config.max_cot_len
        ids = [self.tokenizer.encode(cot.text, limit) for cot in cots]
        return self.model.predict(ids, [seq] * len(cots))


def config_from_dict(data: dict[str, Any]) -> ActModelConfig:
    """Rebuild an ActModelConfig from to_dict() output."""
    values = dict(data)
    values["transformer"] = TransformerConfig(**values["transformer"])
    for key in ("decision_widths", "head_widths", "action_range"):
        values[key] = tuple(values[key])
    return ActModelConfig(**values)


def load_act(path: str | Path) -> ActBundle:
    """Read an Act checkpoint written by save_act()."""
    params, meta, _ = load_checkpoint(path)
    if meta.get("kind") != "act":
        raise ArtifactMismatchError(f"{path} is not an Act checkpoint")
    if meta.get("roster_hash") != ROSTER_HASH:
        raise ArtifactMismatchError(f"{path} was trained on state roster {meta.get('roster_hash')}")
    config = config_from_dict(meta["config"])
    tokenizer = Tokenizer.from_dict(meta["tokenizer"])
    model = ActModel(config, len(tokenizer), np.random.default_rng(0))
    model.load_state_dict(params)
    return ActBundle(model, tokenizer, DatasetStats.from_dict(meta["stats"]), float(meta["rtg_weight"]), meta)


def write_loss_log(path: str | Path, losses: Sequence[dict[str, float]]) -> None:
    """Write a training curve as a JSON list."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(list(losses), indent=1), encoding="utf-8")
