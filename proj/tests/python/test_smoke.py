import math

import numpy as np
import pytest

import ranlab


def test_loss_examples():
    assert ranlab.cov_loss(np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])) == pytest.approx(4.0, abs=1e-10)
    assert ranlab.mse_consistency(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])) == pytest.approx(2.0, abs=1e-12)
    adv = ranlab.adv_loss(np.array([[1.0, 0.0]]), [0], np.eye(2))
    assert adv == pytest.approx(-(math.sqrt(2) + math.pi / 2), abs=1e-9)
    assert ranlab.compose_ran_loss(1.0, 2.0, 4.0, adv) == pytest.approx(1.01522, abs=1e-5)


def test_auc_matches_pairwise_count():
    rng = np.random.default_rng(0)
    scores = rng.integers(0, 5, size=60).astype(float)
    labels = rng.integers(0, 2, size=60)
    labels[:2] = [1, 0]
    pos, neg = scores[labels == 1], scores[labels == 0]
    pairwise = ((pos[:, None] > neg[None, :]) + 0.5 * (pos[:, None] == neg[None, :])).mean()
    assert ranlab.auc(scores.tolist(), labels.tolist()) == pairwise


def test_errors_map_to_python_exceptions():
    with pytest.raises(ranlab.UndefinedMetric):
        ranlab.auc([0.1, 0.2], [1, 1])
    with pytest.raises(ranlab.ConfigError):
        ranlab.ExperimentConfig().set("replicates=0")
    assert issubclass(ranlab.ConfigError, ranlab.Error)


def test_config_round_trip_and_hash():
    cfg = ranlab.ExperimentConfig()
    back = ranlab.ExperimentConfig.from_toml(cfg.to_toml())
    assert back.hash() == cfg.hash()
    assert cfg.seeds() == [0, 1, 2, 3, 4]
    cfg.output_dir = "elsewhere"
    assert cfg.hash() == back.hash()


def test_synth_corpus_is_seeded():
    a = ranlab.synth_corpus(records=16, classes=4, seed=3)
    b = ranlab.synth_corpus(records=16, classes=4, seed=3)
    assert a["checksum"] == b["checksum"]
    assert a["images"].shape == (16, 144)
    assert a["labels"] == [i % 4 for i in range(16)]
    assert ranlab.floor_count(0.1, 200) == 20


def test_small_grid_row_count():
    cfg = ranlab.ExperimentConfig()
    for override in ["replicates=1", "gamma=[0.0, 0.3]", 'kinds=["caption"]', 'modes=["lp"]',
                     "upstream.records=48", "task.records=40", "task.ood_records=16",
                     "pretrain.epochs=2", "finetune.epochs=5"]:
        cfg.set(override)
    rows = ranlab.run_matrix(cfg)
    assert len(rows) == 2 * 1 * 1 * 1 * 2
    assert {r["split"] for r in rows} == {"id", "ood"}
    assert all(0.0 <= r["acc"] <= 1.0 for r in rows)
    assert ranlab.results_csv(cfg).splitlines()[0] == "gamma,kind,mode,split,seed,macro_auc,acc,wall_time_s"
