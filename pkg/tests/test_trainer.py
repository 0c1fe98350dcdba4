import dataclasses
import json
import math
import os

import numpy as np
import pandas as pd
import pytest

from src import tensorgraph as tg
from src import trainer
from src.config_utils import resolve_run_config
from src.dataio.synthetic import generate_synthetic
from src.errors import ConfigError, NonFiniteLossError, ShapeError
from src.segnet import ModelConfig, build_model
from src.trainer import AdamState, TrainConfig

FAST = dict(stage1_epochs=4, stage2_epochs=1, lr_encoder=3e-3, lr_decoder_quantum=1e-2, stage2_lr=1e-4,
            batch_size=4, folds=2, seed=0)
TINY_MODEL = dict(encoder_widths=[4, 6, 8, 8], resolution=16)
CONFIG_DIR = os.path.join(os.path.dirname(__file__), os.pardir, "config")


def _param(name, values, group="decoder", decay=True, grad=None):
    param = tg.parameter(name, np.asarray(values, dtype=float), group, decay)
    if grad is not None:
        param.node.grad = np.asarray(grad, dtype=float)
    return param


def test_warm_restart_schedule():
    assert trainer.cosine_warm_restart_lr(1.0, 0.0, 10, 0) == 1.0
    assert trainer.cosine_warm_restart_lr(1.0, 0.0, 10, 5) == pytest.approx(0.5)
    assert trainer.cosine_warm_restart_lr(3e-4, 3e-7, 10, 10) == pytest.approx(3e-4)
    assert trainer.cosine_warm_restart_lr(1.0, 0.1, 10, 9) > 0.1
    with pytest.raises(ValueError):
        trainer.cosine_warm_restart_lr(1.0, 0.0, 0, 3)


def test_cosine_decay_schedule():
    assert trainer.cosine_decay_lr(1.0, 0.0, 4, 0) == 1.0
    assert trainer.cosine_decay_lr(1.0, 0.0, 4, 2) == pytest.approx(0.5)
    assert trainer.cosine_decay_lr(9e-5, 3e-7, 6, 6) == pytest.approx(3e-7)


def test_clip_gradients():
    params = [_param("a", [0.0, 0.0], grad=[3.0, 0.0]), _param("b", [0.0], grad=[4.0])]
    assert trainer.clip_gradients(params, 1.0) == pytest.approx(0.2)
    norm = math.sqrt(sum(float(np.sum(p.grad ** 2)) for p in params))
    assert norm <= 1.0 + 1e-12
    small = [_param("c", [0.0], grad=[0.5])]
    assert trainer.clip_gradients(small, 1.0) == 1.0 and small[0].grad[0] == 0.5
    assert trainer.clip_gradients([_param("d", [1.0], grad=[0.0])], 1.0) == 1.0


def test_adam_zero_gradient_keeps_parameter():
    param = _param("w", [0.3, -0.2])
    trainer.optimizer_step([param], {"w": np.zeros(2)}, AdamState(), {"decoder": 0.1}, 0.0)
    assert np.array_equal(param.values, [0.3, -0.2])


def test_adam_first_step_is_signed_lr():
    param = _param("w", [1.0, 1.0, 1.0])
    trainer.optimizer_step([param], {"w": np.array([0.02, -5.0, 1e3])}, AdamState(), {"decoder": 0.01}, 0.0)
    assert np.allclose(param.values, [0.99, 1.01, 0.99], atol=1e-8)


def test_adam_group_learning_rates():
    enc = _param("enc", [0.0], group="encoder")
    quantum = _param("q", [0.0], group="quantum", decay=False)
    grads = {"enc": np.array([1.0]), "q": np.array([1.0])}
    trainer.optimizer_step([enc, quantum], grads, AdamState(), {"encoder": 3e-5, "quantum": 3e-4}, 0.0)
    assert quantum.values[0] / enc.values[0] == pytest.approx(10.0, rel=1e-6)


def test_weight_decay_respects_decay_flag():
    decayed = _param("w", [2.0])
    kept = _param("angles", [2.0], group="quantum", decay=False)
    grads = {"w": np.zeros(1), "angles": np.zeros(1)}
    trainer.optimizer_step([decayed, kept], grads, AdamState(), {"decoder": 0.1, "quantum": 0.1}, 0.5)
    assert decayed.values[0] == pytest.approx(2.0 * (1 - 0.05))
    assert kept.values[0] == 2.0


def test_adam_rejects_shape_mismatch():
    param = _param("w", [0.0, 0.0])
    with pytest.raises(ShapeError):
        trainer.optimizer_step([param], {"w": np.zeros(3)}, AdamState(), {"decoder": 0.1}, 0.0)


def test_quantum_grad_stats():
    zeros = trainer.quantum_grad_stats([np.zeros((2, 4, 3))], n_qubits=4)
    assert zeros.l2_norm == 0.0 and zeros.variance == 0.0 and zeros.bp_floor == 0.0625
    stats = trainer.quantum_grad_stats([np.array([1.0]), np.array([-1.0])], n_qubits=4, epoch=3)
    assert stats.l2_norm == pytest.approx(math.sqrt(2)) and stats.variance == 1.0
    assert stats.floor_ratio == 16.0 and stats.epoch == 3
    with pytest.raises(ValueError):
        trainer.quantum_grad_stats([], n_qubits=4)


@pytest.mark.parametrize("values", [
    dict(lr_encoder=0.0), dict(stage1_epochs=0), dict(folds=1), dict(protocol="three_stage"),
    dict(t0=0), dict(flip_probability=1.5),
])
def test_train_config_validation(values):
    with pytest.raises(ConfigError):
        TrainConfig(**values).validate()


def test_train_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 3})


def test_epoch_schedules(small_corpus, tmp_path):
    model_config = ModelConfig(**TINY_MODEL)
    two_stage = trainer.Trainer(model_config, TrainConfig(**FAST), small_corpus, str(tmp_path))
    epochs = list(two_stage.epochs())
    assert [e[1] for e in epochs] == [1, 1, 1, 1, 2]
    assert epochs[0][2]["encoder"] == pytest.approx(3e-3) and epochs[0][2]["quantum"] == pytest.approx(1e-2)
    assert len(set(epochs[-1][2].values())) == 1

    single = trainer.Trainer(model_config, TrainConfig(**{**FAST, "protocol": "single_stage"}), small_corpus,
                             str(tmp_path))
    epochs = list(single.epochs())
    assert len(epochs) == 4 and all(stage == 1 and wd == 0.0 for _, stage, _, wd in epochs)
    assert epochs[0][2]["decoder"] == pytest.approx(5e-4)


def test_corpus_smaller_than_folds_is_rejected(small_corpus, tmp_path):
    with pytest.raises(ValueError):
        trainer.Trainer(ModelConfig(**TINY_MODEL), TrainConfig(**{**FAST, "folds": 30}), small_corpus, str(tmp_path))


def test_parameter_hash_ignores_gates():
    quantum = build_model(ModelConfig(merge_kind="quantum", **TINY_MODEL), seed=4)
    classical = build_model(ModelConfig(merge_kind="classical", **TINY_MODEL), seed=4)
    assert trainer.parameter_hash(quantum) == trainer.parameter_hash(classical)
    assert trainer.parameter_hash(quantum, exclude_gates=False) != trainer.parameter_hash(classical, exclude_gates=False)


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory, small_corpus):
    run_dir = str(tmp_path_factory.mktemp("desk"))
    result = trainer.train(ModelConfig(**TINY_MODEL), TrainConfig(**FAST), small_corpus, run_dir)
    return run_dir, result


def test_desk_run_writes_artifacts(desk_run):
    run_dir, _ = desk_run
    for name in ("config.json", "oof_report.json", "oof_predictions.npz"):
        assert os.path.exists(os.path.join(run_dir, name))
    for fold in range(2):
        for name in ("checkpoint.bin", "manifest.json", "log.csv"):
            assert os.path.exists(os.path.join(run_dir, f"fold{fold}", name))
    with open(os.path.join(run_dir, "config.json")) as f:
        config = json.load(f)
    assert config["quantum_param_count"] == 72 and config["encoding_param_count"] == 24


def test_desk_run_learns_and_updates_circuits(desk_run):
    run_dir, result = desk_run
    for report in result.fold_reports:
        assert report["final_loss"] < report["initial_loss"]
        assert report["quantum_update_norm"] > 0.0
    for fold in range(2):
        log = pd.read_csv(os.path.join(run_dir, f"fold{fold}", "log.csv"))
        assert list(log["stage"]) == [1, 1, 1, 1, 2]
        assert (log["q_grad_var"] > 0).all()
        assert np.allclose(log["q_grad_floor_ratio"], log["q_grad_var"] / 0.0625)


def test_desk_run_out_of_fold_coverage(desk_run, small_corpus):
    run_dir, result = desk_run
    with np.load(os.path.join(run_dir, "oof_predictions.npz")) as stored:
        assert [str(i) for i in stored["ids"]] == [r.id for r in small_corpus]
        assert np.all((stored["probs"] > 0) & (stored["probs"] < 1))
    assert sum(r["n_val"] for r in result.fold_reports) == len(small_corpus)
    assert len(result.eval_result.per_image) == len(small_corpus)


def test_desk_run_is_deterministic(desk_run, small_corpus, tmp_path):
    run_dir, _ = desk_run
    trainer.train(ModelConfig(**TINY_MODEL), TrainConfig(**FAST), small_corpus, str(tmp_path))
    for name in ("config.json", "oof_report.json", os.path.join("fold0", "log.csv"), os.path.join("fold1", "log.csv")):
        with open(os.path.join(run_dir, name), "rb") as a, open(os.path.join(tmp_path, name), "rb") as b:
            assert a.read() == b.read(), name


def test_classical_arm_shares_order_and_init(desk_run, small_corpus, tmp_path):
    _, quantum = desk_run
    classical = trainer.train(ModelConfig(merge_kind="classical", **TINY_MODEL), TrainConfig(**FAST),
                              small_corpus, str(tmp_path))
    for q, c in zip(quantum.fold_reports, classical.fold_reports):
        assert q["batch_order_hash"] == c["batch_order_hash"]
        assert q["shared_init_hash"] == c["shared_init_hash"]
        assert c["min_q_grad_var"] is None


def test_non_finite_loss_aborts(small_corpus, tmp_path, monkeypatch):
    real = trainer.staged_loss

    def poisoned(logits, targets, stage):
        return dataclasses.replace(real(logits, targets, stage), total=float("nan"))

    monkeypatch.setattr(trainer, "staged_loss", poisoned)
    with pytest.raises(NonFiniteLossError) as info:
        trainer.train(ModelConfig(**TINY_MODEL), TrainConfig(**FAST), small_corpus, str(tmp_path))
    assert info.value.diagnostics["fold"] == 0 and info.value.diagnostics["step"] == 0


def test_checkpoints_reproduce_out_of_fold_predictions(desk_run, small_corpus):
    run_dir, _ = desk_run
    restored = trainer.Trainer.from_run_dir(run_dir, small_corpus)
    assert restored.model_config == ModelConfig(**TINY_MODEL).resolved()
    with np.load(os.path.join(run_dir, "oof_predictions.npz")) as stored:
        assert np.array_equal(restored.predict_out_of_fold(), stored["probs"])


def test_from_run_dir_rejects_other_corpus(desk_run, small_corpus):
    run_dir, _ = desk_run
    with pytest.raises(ConfigError):
        trainer.Trainer.from_run_dir(run_dir, small_corpus[:-1])


def test_fold_splits_partition_the_corpus(small_corpus, tmp_path):
    splits = trainer.Trainer(ModelConfig(**TINY_MODEL), TrainConfig(**{**FAST, "folds": 3}), small_corpus,
                             str(tmp_path)).fold_splits()
    assert len(splits) == 3
    validation = np.concatenate([val_idx for _, val_idx in splits])
    assert np.array_equal(np.sort(validation), np.arange(len(small_corpus)))
    for train_idx, val_idx in splits:
        assert not set(train_idx) & set(val_idx)
        assert len(train_idx) + len(val_idx) == len(small_corpus)


@pytest.mark.slow
def test_shipped_desk_config_learns_on_synthetic_corpus(tmp_path):
    model_config, train_config = resolve_run_config(os.path.join(CONFIG_DIR, "desk.yaml"))
    corpus = generate_synthetic(200, resolution=32, seed=0)
    result = trainer.train(model_config, train_config, corpus, str(tmp_path))
    assert len(result.fold_reports) == train_config.folds
    for report in result.fold_reports:
        assert report["final_loss"] < report["initial_loss"]
        assert report["min_q_grad_var"] > 0.0
    for fold in range(train_config.folds):
        log = pd.read_csv(os.path.join(tmp_path, f"fold{fold}", "log.csv"))
        assert len(log) == train_config.stage1_epochs + train_config.stage2_epochs
        assert (log["q_grad_var"] > 0).all()
