"""
The following tests check the Act model: windows, the anchor filter, reweighted returns,
dual embedding, training and checkpoints.
"""

from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from pyautobid.act import (
    ActBundle,
    ActDataset,
    ActModelConfig,
    ActTrainer,
    anchor_filter,
    build_window,
    inference_rtg_init,
    load_act,
    rtg_reweight,
    save_act,
    write_loss_log,
)
from pyautobid.exceptions import ArtifactMismatchError, IncompleteEpisodeError
from pyautobid.neural import TransformerConfig, no_grad, save_checkpoint
from pyautobid.think import DECREASE, EMPTY_COT, INCREASE, NONE, parse_cot
from pyautobid.tokenizer import Tokenizer
from pyautobid.trajectory import CotEntry, DatasetStats, Trajectory

from .conftest import tiny_act_config


def _constant(trajectories: list[Trajectory], action: float) -> list[Trajectory]:
    return [replace(traj, actions=np.full(len(traj), action, dtype=np.float32)) for traj in trajectories]


def test_window_padding(trajectories: list[Trajectory], stats: DatasetStats) -> None:
    """Test left padding before the episode start and return scaling."""
    traj = trajectories[0]
    seq = build_window(traj.states, traj.actions, traj.returns_to_go, 0, stats, seq_len=2, return_scale=10.0)
    assert seq.valid.tolist() == [False, False, True]
    assert seq.items() == 8
    assert seq.item_valid().tolist() == [False] * 6 + [True, True]
    assert seq.returns[-1] == pytest.approx(traj.returns_to_go[0] / 10.0)
    assert np.allclose(seq.states[-1], stats.normalize(traj.states[0]))

    later = build_window(traj.states, traj.actions, traj.returns_to_go, 5, stats, 2, 10.0)
    assert later.valid.all()
    assert np.allclose(later.actions, traj.actions[3:5])
    with pytest.raises(ValueError):
        build_window(traj.states, traj.actions, traj.returns_to_go, 99, stats, 2, 10.0)


def test_anchor_filter_property(rng: np.random.Generator) -> None:
    """Test the filter against the sign of the action change over many triples."""
    directions = rng.choice([INCREASE, DECREASE, NONE], size=10_000)
    a_t = rng.uniform(0, 10, size=10_000)
    a_prev = np.where(rng.random(10_000) < 0.05, a_t, rng.uniform(0, 10, size=10_000))
    for direction, current, previous in zip(directions, a_t, a_prev):
        accepted = anchor_filter(str(direction), float(current), float(previous))  # type: ignore[arg-type]
        if direction == INCREASE:
            assert accepted == (current >= previous)
        elif direction == DECREASE:
            assert accepted == (current <= previous)
        else:
            assert accepted


def test_sample_replaces_contradicting_cot(trajectories: list[Trajectory], stats: DatasetStats) -> None:
    """Test that a CoT contradicting the labeled action is dropped from the sample."""
    traj = replace(trajectories[0], actions=np.linspace(1.0, 2.0, len(trajectories[0]), dtype=np.float32))
    config = tiny_act_config()
    tokenizer = Tokenizer.fit(["DIRECTION: INCREASE", "DIRECTION: DECREASE"], 128)
    cots = {
        (traj.traj_id, 3): CotEntry(traj.traj_id, 3, "DIRECTION: DECREASE", DECREASE),
        (traj.traj_id, 4): CotEntry(traj.traj_id, 4, "DIRECTION: INCREASE", INCREASE),
    }
    dataset = ActDataset.build([traj], cots, stats)
    rejected = dataset.sample(0, 3, tokenizer, config)
    assert rejected.direction == NONE
    assert len(rejected.cot_ids) == 0
    kept = dataset.sample(0, 4, tokenizer, config)
    assert kept.direction == INCREASE
    assert len(kept.cot_ids) == 3
    assert (dataset.accepted, dataset.rejected) == (1, 1)
    assert dataset.sample(0, 4, tokenizer, config, use_cot=False).direction == NONE


def test_rtg_reweight(trajectories: list[Trajectory]) -> None:
    """Test R_t + w * penalty and the w = 0 case."""
    traj = trajectories[1]
    assert np.array_equal(rtg_reweight(traj, 0.0), traj.returns_to_go)
    weighted = rtg_reweight(traj, 0.5)
    extra = weighted - traj.returns_to_go
    assert np.all(extra <= 0.5 + 1e-5)
    assert np.all(extra > 0.0)
    partial = replace(traj, num_steps=len(traj) + 1)
    with pytest.raises(IncompleteEpisodeError):
        rtg_reweight(partial, 0.5)


def test_inference_rtg_init(stats: DatasetStats) -> None:
    """Test the initial conditioning return."""
    assert inference_rtg_init(stats, 20.0) == pytest.approx(stats.max_return / 20.0)
    assert inference_rtg_init(stats, 20.0, w=1.0) == pytest.approx((stats.max_return + 1.0) / 20.0)
    with pytest.raises(ValueError):
        inference_rtg_init(None, 20.0)


def test_config_validation() -> None:
    """Test ActModelConfig checks."""
    with pytest.raises(ValueError):
        tiny_act_config(decision_widths=(8, 4))
    with pytest.raises(ValueError):
        tiny_act_config(head_widths=(8, 2))
    with pytest.raises(ValueError):
        tiny_act_config(max_cot_len=45)
    with pytest.raises(ValueError):
        tiny_act_config(action_range=(5.0, 1.0))
    assert tiny_act_config().transformer == TransformerConfig(d_model=8, n_heads=2, n_layers=1, max_seq_len=48)


def test_batched_cots_match_single(act_bundle: ActBundle, trajectories: list[Trajectory]) -> None:
    """Test that left-padding CoTs of different lengths does not change predictions."""
    traj = trajectories[2]
    seq = act_bundle.window(traj.states, traj.actions, traj.returns_to_go, 4)
    cots = [EMPTY_COT, parse_cot("DIRECTION: INCREASE"), parse_cot("CPA ratio: 1.5\nDIRECTION: DECREASE")]
    batched = act_bundle.act_many(cots, seq)
    single = [act_bundle.act(cot, seq) for cot in cots]
    assert np.allclose(batched, single, atol=1e-5)
    low, high = act_bundle.model.config.action_range
    assert np.all((batched >= low) & (batched <= high))


def test_empty_cot_is_plain_decision_transformer(act_bundle: ActBundle, trajectories: list[Trajectory]) -> None:
    """Test that an empty CoT adds nothing to the numeric computation."""
    model = act_bundle.model
    was_training = model.training
    model.eval()
    traj = trajectories[1]
    seq = act_bundle.window(traj.states, traj.actions, traj.returns_to_go, 3)
    with no_grad():
        fused = model.forward([np.zeros(0, dtype=np.int64)], [seq]).numpy()
        hidden = model.transformer(*model.embed_numeric([seq]))
        plain = model.head(hidden[:, -1, :]).reshape(1) * model.config.action_range[1]
    model.train(was_training)
    assert np.array_equal(fused, plain.numpy())


def test_training_reduces_loss(trajectories: list[Trajectory], stats: DatasetStats) -> None:
    """Test that a short run moves the model towards a constant target action."""
    config = tiny_act_config(lr=1e-2, batch_size=8)
    data = _constant(trajectories, 2.0)
    tokenizer = Tokenizer.fit([], 128)
    trainer = ActTrainer(config, ActDataset.build(data, {}, stats), tokenizer, seed=1)
    losses = [row["loss"] for row in trainer.train(60)]
    assert len(losses) == 60
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_checkpoint_round_trip(tmp_path: Path, act_bundle: ActBundle, trajectories: list[Trajectory]) -> None:
    """Test save_act()/load_act() and refusal of other checkpoints."""
    path = tmp_path / "act.ckpt"
    save_act(path, act_bundle.model, act_bundle.tokenizer, act_bundle.stats, 0.2, extra={"config_hash": "abc"})
    loaded = load_act(path)
    assert loaded.rtg_weight == 0.2
    assert loaded.meta["config_hash"] == "abc"
    assert loaded.tokenizer.vocab == act_bundle.tokenizer.vocab
    assert loaded.model.config == act_bundle.model.config

    traj = trajectories[0]
    seq = act_bundle.window(traj.states, traj.actions, traj.returns_to_go, 3)
    cot = parse_cot("DIRECTION: INCREASE")
    assert loaded.act(cot, seq) == pytest.approx(act_bundle.act(cot, seq), abs=1e-6)

    other = tmp_path / "other.ckpt"
    save_checkpoint(other, {}, {"kind": "iql"})
    with pytest.raises(ArtifactMismatchError):
        load_act(other)

    log = tmp_path / "logs" / "act.json"
    write_loss_log(log, [{"step": 1, "loss": 0.5}])
    assert log.exists()


@pytest.mark.acceptance
def test_fits_constant_action(trajectories: list[Trajectory], stats: DatasetStats) -> None:
    """Test that the model learns a constant action to within 0.1."""
    config = tiny_act_config(lr=3e-3, batch_size=16, transformer=TransformerConfig(16, 2, 2, 48),
                             decision_widths=(16, 16), head_widths=(16, 1))
    tokenizer = Tokenizer.fit([], 128)
    trainer = ActTrainer(config, ActDataset.build(_constant(trajectories, 3.0), {}, stats), tokenizer, seed=2)
    trainer.train(2000)
    traj = trajectories[0]
    bundle = ActBundle(trainer.model, tokenizer, stats, 0.0, {})
    returns = _constant([traj], 3.0)[0].returns_to_go
    predictions = [
        bundle.act(EMPTY_COT, bundle.window(traj.states, np.full(len(traj), 3.0), returns, t))
        for t in range(len(traj))
    ]
    assert np.all(np.abs(np.array(predictions) - 3.0) < 0.1)
