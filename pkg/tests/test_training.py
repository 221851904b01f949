import numpy as np
import pytest
from concurrent.futures import ThreadPoolExecutor

from liftgame import generator as gn
from liftgame import tag_env as te
from liftgame import training as tr

ENV = te.TagEnvSpec(horizon=5)
CFG = tr.TrainConfig(rate1=0.5, rate2=0.5, iterations=3, dataset_size=4, horizon=5, hidden=(8,))


def test_training_is_deterministic_and_changes_params(tmp_path):
    a1, a2, ta = tr.train_offline(CFG, ENV, log_path=tmp_path / "sub" / "log.jsonl")
    b1, b2, tb = tr.train_offline(CFG, ENV)
    np.testing.assert_array_equal(a1.flat(), b1.flat())
    np.testing.assert_array_equal(a2.flat(), b2.flat())
    assert ta.mean_L1 == tb.mean_L1
    i1, _ = tr.init_generators(ENV, CFG, tr.make_game(ENV, CFG))
    assert not np.array_equal(i1.flat(), a1.flat())
    lines = (tmp_path / "sub" / "log.jsonl").read_text().splitlines()
    assert len(lines) == 3


def test_pool_gives_identical_result():
    a1, a2, _ = tr.train_offline(CFG, ENV)
    with ThreadPoolExecutor(2) as pool:
        b1, b2, _ = tr.train_offline(CFG, ENV, pool=pool)
    np.testing.assert_array_equal(a1.flat(), b1.flat())
    np.testing.assert_array_equal(a2.flat(), b2.flat())


def test_checkpoints_written(tmp_path):
    cfg = tr.TrainConfig(**{**CFG.to_dict(), "checkpoint_every": 1, "iterations": 2})
    tr.train_offline(cfg, ENV, checkpoint_dir=tmp_path)
    t1, _, _ = tr.train_offline(cfg, ENV)
    assert {p.name for p in tmp_path.iterdir()} >= {"pursuer_000002.json", "evader_000002.json"}
    np.testing.assert_array_equal(gn.load_params(tmp_path / "pursuer_000002.json").flat(), t1.flat())


def test_config_validation_and_round_trip():
    assert tr.TrainConfig.from_dict(CFG.to_dict()) == CFG
    with pytest.raises(ValueError):
        tr.TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        tr.TrainConfig(rate1=-1.0)
    with pytest.raises(ValueError):
        tr.TrainConfig(iterations=0)
    assert tr.TrainConfig(dataset_size=200).effective_batch == 64


def test_self_play_runs_and_stays_feasible():
    cfg = tr.TrainConfig(rate1=0.5, rate2=0.5, horizon=5, hidden=(8,), replan_interval=3, window=4)
    trace = tr.self_play_learn(cfg, ENV, 6)
    assert len(trace.turn_values) == 6 and len(trace.grad_norms) == 6
    for x1, x2 in zip(trace.episode.states1, trace.episode.states2):
        assert te.state_ok(x1, ENV) and te.state_ok(x2, ENV)
    again = tr.self_play_learn(cfg, ENV, 6)
    assert again.turn_values == trace.turn_values
