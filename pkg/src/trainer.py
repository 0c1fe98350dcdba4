"""
Cross-validated training: two-stage loss curriculum (or the single-stage skip-attention protocol),
AdamW with per-group learning rates, cosine schedules, global-norm clipping, quantum gradient
diagnostics and pooled out-of-fold evaluation with flip test-time augmentation.
"""
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np
import pandas as pd

from src import tensorgraph as tg
from src.checkpoint_utils import CheckpointStore, write_json
from src.dataio.preparation import SampleRecord, assemble_input, resize_nearest, stratified_folds, to_model_channels
from src.errors import ConfigError, NonFiniteLossError, ShapeError
from src.losses import staged_loss
from src.metrics import EvalResult, evaluate, mean_tgs_precision, predict_probs, tta_hflip
from src.qsim import barren_plateau_floor
from src.segnet import ModelConfig, SegModel, build_model
from src.tensorgraph import Parameter

logger = logging.getLogger(__name__)

PROTOCOLS = ("two_stage", "single_stage")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
VAL_THRESHOLD = 0.5


@dataclass
class TrainConfig:
    """
    Optimisation schedule. Defaults are the desk-scale reading of the full protocol.

    Attributes:
        stage1_epochs (int): Epochs of the weighted-loss stage (or of the single stage).
        stage2_epochs (int): Epochs of the pure Lovasz stage.
        lr_encoder (float): Stage-1 learning rate of the encoder group.
        lr_decoder_quantum (float): Stage-1 learning rate of the decoder and quantum groups.
        stage2_lr (float): Stage-2 starting learning rate for every group.
        eta_min (float): Floor of every cosine schedule.
        t0 (int): Warm-restart period of the stage-1 schedule, in epochs.
        clip_norm (float): Global gradient-norm bound.
        batch_size (int): Samples per step.
        seed (int): Seed of fold construction, initialisation, batch order and augmentation.
        folds (int): Cross-validation folds.
        weight_decay (float): Decoupled weight decay (never applied to circuit angles or gate scale/shift).
        protocol (str): "two_stage" or "single_stage".
        single_stage_lr (float): Learning rate of the single-stage protocol.
        flip_probability (float): Probability of a horizontal flip per training sample.
    """
    stage1_epochs: int = 12
    stage2_epochs: int = 6
    lr_encoder: float = 3e-5
    lr_decoder_quantum: float = 3e-4
    stage2_lr: float = 9e-5
    eta_min: float = 3e-7
    t0: int = 10
    clip_norm: float = 1.0
    batch_size: int = 8
    seed: int = 0
    folds: int = 5
    weight_decay: float = 1e-4
    protocol: str = "two_stage"
    single_stage_lr: float = 5e-4
    flip_probability: float = 0.5

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"Unknown train config keys: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        rates = {"lr_encoder": self.lr_encoder, "lr_decoder_quantum": self.lr_decoder_quantum,
                 "stage2_lr": self.stage2_lr, "eta_min": self.eta_min, "single_stage_lr": self.single_stage_lr,
                 "clip_norm": self.clip_norm}
        for name, value in rates.items():
            if not value > 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol must be one of {PROTOCOLS}, got '{self.protocol}'")
        if self.stage1_epochs < 1 or (self.protocol == "two_stage" and self.stage2_epochs < 1):
            raise ConfigError("every stage needs at least one epoch")
        if self.t0 < 1 or self.batch_size < 1 or self.folds < 2 or self.seed < 0:
            raise ConfigError("t0 and batch_size must be >= 1, folds >= 2 and seed >= 0")
        if self.weight_decay < 0 or not 0.0 <= self.flip_probability <= 1.0:
            raise ConfigError("weight_decay must be >= 0 and flip_probability in [0, 1]")


@dataclass
class QuantumGradStats:
    """
    Barren-plateau diagnostics of the circuit-angle gradients.

    Attributes:
        epoch (int): Global epoch index.
        l2_norm (float): Euclidean norm of the flattened gradient.
        variance (float): Population variance of the flattened gradient entries.
        bp_floor (float): Reference floor 2**-n_qubits.
    """
    epoch: int
    l2_norm: float
    variance: float
    bp_floor: float

    @property
    def floor_ratio(self) -> float:
        return self.variance / self.bp_floor


@dataclass
class AdamState:
    """Moment estimates per parameter name and the shared step counter."""
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def cosine_warm_restart_lr(base_lr: float, eta_min: float, t0: int, epoch: int) -> float:
    """
    Cosine annealing restarted every t0 epochs (constant period).

    Raises:
        ValueError: If t0 <= 0 or epoch < 0.
    """
    if t0 <= 0:
        raise ValueError(f"t0 must be positive, got {t0}")
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    e = epoch % t0
    return eta_min + 0.5 * (base_lr - eta_min) * (1 + math.cos(math.pi * e / t0))


def cosine_decay_lr(base_lr: float, eta_min: float, total_epochs: int, epoch: int) -> float:
    """Single cosine decay from base_lr towards eta_min over total_epochs."""
    if total_epochs <= 0:
        raise ValueError(f"total_epochs must be positive, got {total_epochs}")
    return eta_min + 0.5 * (base_lr - eta_min) * (1 + math.cos(math.pi * epoch / total_epochs))


def clip_gradients(params: Sequence[Parameter], max_norm: float) -> float:
    """
    Rescales all gradients in place when their global L2 norm exceeds max_norm.

    Returns:
        float: The applied factor (1.0 when no clipping happened).
    """
    total = math.sqrt(sum(float(np.sum(p.grad ** 2)) for p in params))
    if total <= max_norm or total == 0.0:
        return 1.0
    factor = max_norm / total
    for param in params:
        param.node.grad = param.grad * factor
    return factor


def optimizer_step(params: Sequence[Parameter], grads: Dict[str, np.ndarray], state: AdamState,
                   lr_per_group: Dict[str, float], weight_decay: float,
                   betas: Tuple[float, float] = ADAM_BETAS, eps: float = ADAM_EPS) -> AdamState:
    """
    One AdamW update with bias-corrected moments; decoupled decay multiplies the weights by
    (1 - lr * weight_decay) for parameters with decay enabled.

    Args:
        params (Sequence[Parameter]): Parameters to update in place.
        grads (dict[str, np.ndarray]): Gradient per parameter name.
        state (AdamState): Moment estimates, updated in place.
        lr_per_group (dict[str, float]): Learning rate of each parameter group.
        weight_decay (float): Decoupled decay coefficient.

    Returns:
        AdamState: The updated state.

    Raises:
        ShapeError: If a gradient or stored moment does not match its parameter.
    """
    beta1, beta2 = betas
    state.step += 1
    correction1 = 1 - beta1 ** state.step
    correction2 = 1 - beta2 ** state.step
    for param in params:
        grad = grads[param.name]
        m = state.m.get(param.name, np.zeros_like(param.values))
        v = state.v.get(param.name, np.zeros_like(param.values))
        if grad.shape != param.values.shape or m.shape != param.values.shape:
            raise ShapeError(f"optimizer state for '{param.name}' does not match shape {param.values.shape}")
        lr = lr_per_group[param.group]
        m = beta1 * m + (1 - beta1) * grad
        v = beta2 * v + (1 - beta2) * grad * grad
        state.m[param.name], state.v[param.name] = m, v
        values = param.values
        if param.decay and weight_decay > 0:
            values = values * (1 - lr * weight_decay)
        param.node.values = values - lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
    return state


def quantum_grad_stats(grads: Sequence[np.ndarray], n_qubits: int, epoch: int = 0) -> QuantumGradStats:
    """
    Norm and population variance of the flattened circuit-angle gradients.

    Raises:
        ValueError: If there are no quantum gradients.
    """
    flat = np.concatenate([np.ravel(g) for g in grads]) if len(grads) else np.zeros(0)
    if flat.size == 0:
        raise ValueError("no quantum parameter gradients to summarise")
    return QuantumGradStats(epoch, float(np.sqrt(np.sum(flat ** 2))), float(np.var(flat)),
                            barren_plateau_floor(n_qubits))


def parameter_hash(model: SegModel, exclude_gates: bool = True) -> str:
    """SHA-256 over parameter names and values in name order, gate parameters optionally excluded."""
    gates = set(model.gate_parameter_names()) if exclude_gates else set()
    digest = hashlib.sha256()
    for name in sorted(model.named_parameters()):
        if name in gates:
            continue
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(model.named_parameters()[name].values, dtype="<f8").tobytes())
    return digest.hexdigest()


@dataclass
class RunResult:
    """Outcome of a cross-validated run."""
    run_dir: str
    eval_result: EvalResult
    fold_reports: List[dict]


class Trainer:
    """
    Runs the full cross-validation protocol for one configuration and writes the run directory:
    config.json, fold<k>/{checkpoint.bin, manifest.json, log.csv}, oof_report.json and
    oof_predictions.npz.

    Attributes:
        model_config (ModelConfig): Resolved model configuration.
        config (TrainConfig): Optimisation schedule.
        records (list[SampleRecord]): Corpus.
        run_dir (str): Output directory.
    """

    def __init__(self, model_config: ModelConfig, config: TrainConfig, records: Sequence[SampleRecord], run_dir: str):
        config.validate()
        self.model_config = model_config.resolved()
        self.config = config
        self.records = list(records)
        self.run_dir = run_dir
        if len(self.records) < config.folds:
            raise ValueError(f"corpus of {len(self.records)} samples cannot fill {config.folds} folds")
        resolution = self.model_config.resolution
        inputs = np.stack([assemble_input(r, resolution) for r in self.records])
        self.inputs = to_model_channels(inputs, self.model_config.input_channels)
        self.targets = np.stack([resize_nearest(r.mask, resolution) for r in self.records]).astype(np.float64)

    @classmethod
    def from_run_dir(cls, run_dir: str, records: Sequence[SampleRecord]) -> "Trainer":
        """
        Rebuilds the trainer of a finished run from its config.json.

        Raises:
            ConfigError: If the corpus size differs from the one the run was trained on.
        """
        with open(os.path.join(run_dir, "config.json"), "r") as f:
            saved = json.load(f)
        if len(records) != saved["n_samples"]:
            raise ConfigError(f"run {run_dir} was trained on {saved['n_samples']} samples, corpus has {len(records)}")
        return cls(ModelConfig.from_dict(saved["model"]), TrainConfig.from_dict(saved["train"]), records, run_dir)

    # Schedule

    def epochs(self) -> Iterator[Tuple[int, int, Dict[str, float], float]]:
        """Yields (global epoch, loss stage, lr per group, weight decay) for every epoch."""
        cfg = self.config
        if cfg.protocol == "single_stage":
            for epoch in range(cfg.stage1_epochs):
                lr = cosine_decay_lr(cfg.single_stage_lr, cfg.eta_min, cfg.stage1_epochs, epoch)
                yield epoch, 1, {"encoder": lr, "decoder": lr, "quantum": lr}, 0.0
            return
        for epoch in range(cfg.stage1_epochs):
            enc = cosine_warm_restart_lr(cfg.lr_encoder, cfg.eta_min, cfg.t0, epoch)
            dec = cosine_warm_restart_lr(cfg.lr_decoder_quantum, cfg.eta_min, cfg.t0, epoch)
            yield epoch, 1, {"encoder": enc, "decoder": dec, "quantum": dec}, cfg.weight_decay
        for epoch in range(cfg.stage2_epochs):
            lr = cosine_decay_lr(cfg.stage2_lr, cfg.eta_min, cfg.stage2_epochs, epoch)
            yield cfg.stage1_epochs + epoch, 2, {"encoder": lr, "decoder": lr, "quantum": lr}, cfg.weight_decay

    # Data helpers

    def _batches(self, indices: np.ndarray) -> Iterator[np.ndarray]:
        for start in range(0, len(indices), self.config.batch_size):
            yield indices[start:start + self.config.batch_size]

    def _predict(self, model: SegModel, indices: np.ndarray, tta: bool = False) -> np.ndarray:
        parts = [(tta_hflip if tta else predict_probs)(model, self.inputs[idx]) for idx in self._batches(indices)]
        return np.concatenate(parts, axis=0)

    def dataset_loss(self, model: SegModel, indices: np.ndarray) -> float:
        """Stage-1 loss over a split, sample-weighted across batches."""
        total = 0.0
        for idx in self._batches(indices):
            breakdown = staged_loss(model.forward(self.inputs[idx]), self.targets[idx][:, None], 1)
            total += breakdown.total * len(idx)
        return total / len(indices)

    # Folds

    def run_fold(self, fold: int, train_idx: np.ndarray, val_idx: np.ndarray) -> Tuple[dict, np.ndarray]:
        """
        Trains one fold and predicts its validation split with flip TTA.

        Returns:
            tuple[dict, np.ndarray]: Fold report and [n_val, R, R] validation probabilities.

        Raises:
            NonFiniteLossError: If any step produces a non-finite loss.
        """
        cfg = self.config
        fold_dir = os.path.join(self.run_dir, f"fold{fold}")
        os.makedirs(fold_dir, exist_ok=True)
        model = build_model(self.model_config, seed=cfg.seed)
        quantum = [p for p in model.parameters() if p.group == "quantum"]
        initial_quantum = [p.values.copy() for p in quantum]
        rng = np.random.default_rng([cfg.seed, fold])
        order_digest = hashlib.sha256()
        shared_init_hash = parameter_hash(model)
        initial_loss = self.dataset_loss(model, train_idx)
        state, rows = AdamState(), []

        for epoch, stage, lrs, weight_decay in self.epochs():
            order = rng.permutation(train_idx)
            order_digest.update(order.astype("<i8").tobytes())
            sums = {"bce": 0.0, "dice": 0.0, "lovasz": 0.0, "total": 0.0}
            q_accum = [np.zeros_like(p.values) for p in quantum]
            steps = 0
            for idx in self._batches(order):
                flips = rng.random(len(idx)) < cfg.flip_probability
                xb, yb = self.inputs[idx].copy(), self.targets[idx].copy()
                xb[flips] = xb[flips][..., ::-1]
                yb[flips] = yb[flips][..., ::-1]
                model.zero_grad()
                breakdown = staged_loss(model.forward(xb), yb[:, None], stage)
                if not np.isfinite(breakdown.total):
                    raise NonFiniteLossError({"fold": fold, "stage": stage, "epoch": epoch, "step": steps,
                                              **breakdown.as_dict()})
                tg.backward(breakdown.node)
                for acc, param in zip(q_accum, quantum):
                    acc += param.grad
                clip_gradients(model.parameters(), cfg.clip_norm)
                optimizer_step(model.parameters(), {p.name: p.grad for p in model.parameters()}, state,
                               lrs, weight_decay)
                for key, value in breakdown.as_dict().items():
                    sums[key] += value
                steps += 1

            row = {"epoch": epoch, "stage": stage, "lr": lrs["decoder"]}
            row.update({key: value / steps for key, value in sums.items()})
            row["val_tgs_map"] = mean_tgs_precision(self._predict(model, val_idx), self.targets[val_idx], VAL_THRESHOLD)
            if quantum:
                stats = quantum_grad_stats([acc / steps for acc in q_accum], self.model_config.qubits, epoch)
                row.update({"q_grad_norm": stats.l2_norm, "q_grad_var": stats.variance,
                            "q_grad_floor_ratio": stats.floor_ratio})
            else:
                row.update({"q_grad_norm": np.nan, "q_grad_var": np.nan, "q_grad_floor_ratio": np.nan})
            rows.append(row)
            logger.info(f"fold {fold} stage {stage} epoch {epoch}: lr={row['lr']:.3g} loss={row['total']:.4f} "
                        f"(bce={row['bce']:.4f} dice={row['dice']:.4f} lovasz={row['lovasz']:.4f}) "
                        f"val_tgs_map={row['val_tgs_map']:.4f} q_grad_norm={row['q_grad_norm']:.3g} "
                        f"q_grad_var={row['q_grad_var']:.3g} (floor ratio {row['q_grad_floor_ratio']:.3g})")

        final_loss = self.dataset_loss(model, train_idx)
        probs = self._predict(model, val_idx, tta=True)
        CheckpointStore(fold_dir).save(model)
        log = pd.DataFrame(rows)
        log.to_csv(os.path.join(fold_dir, "log.csv"), index=False)
        report = {
            "fold": fold,
            "n_train": int(len(train_idx)),
            "n_val": int(len(val_idx)),
            "initial_loss": initial_loss,
            "final_loss": final_loss,
            "batch_order_hash": order_digest.hexdigest(),
            "shared_init_hash": shared_init_hash,
            "quantum_update_norm": float(np.sqrt(sum(np.sum((p.values - v0) ** 2)
                                                     for p, v0 in zip(quantum, initial_quantum)))),
            "min_q_grad_var": float(log["q_grad_var"].min()) if quantum else None,
        }
        logger.info(f"fold {fold} done: train loss {initial_loss:.4f} -> {final_loss:.4f}")
        return report, probs

    def fold_splits(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        """
        Assigns stratified folds to the records and returns (train indices, validation indices) per fold.

        Raises:
            ValueError: If a fold leaves either split empty.
        """
        plan = stratified_folds(self.records, k=self.config.folds, seed=self.config.seed)
        plan.apply(self.records)
        folds = np.array([r.fold for r in self.records])
        splits = []
        for fold in range(self.config.folds):
            val_idx = np.flatnonzero(folds == fold)
            train_idx = np.flatnonzero(folds != fold)
            if len(val_idx) == 0 or len(train_idx) == 0:
                raise ValueError(f"fold {fold} has an empty train or validation split")
            splits.append((train_idx, val_idx))
        return splits

    def predict_out_of_fold(self) -> np.ndarray:
        """
        Restores every fold model from its checkpoint and predicts that fold's validation split
        with flip TTA.

        Returns:
            np.ndarray: [N, R, R] pooled out-of-fold probabilities.
        """
        tg.configure_threads()
        oof = np.zeros_like(self.targets)
        for fold, (_, val_idx) in enumerate(self.fold_splits()):
            model = build_model(self.model_config, seed=self.config.seed)
            CheckpointStore(os.path.join(self.run_dir, f"fold{fold}")).restore(model)
            oof[val_idx] = self._predict(model, val_idx, tta=True)
        logger.info(f"Re-predicted {len(oof)} out-of-fold samples from {self.config.folds} checkpoints")
        return oof

    def run(self) -> RunResult:
        """
        Trains every fold, then selects the threshold on pooled out-of-fold predictions.

        Returns:
            RunResult: Run directory, pooled evaluation and fold reports.
        """
        cfg = self.config
        tg.configure_threads()
        os.makedirs(self.run_dir, exist_ok=True)
        splits = self.fold_splits()
        blueprint = build_model(self.model_config, seed=cfg.seed)
        write_json(os.path.join(self.run_dir, "config.json"), {
            "model": self.model_config.to_dict(),
            "train": cfg.to_dict(),
            "n_samples": len(self.records),
            "parameter_count": blueprint.count(),
            "quantum_param_count": blueprint.quantum_param_count,
            "encoding_param_count": blueprint.encoding_param_count,
            "parameter_names": sorted(blueprint.named_parameters()),
        })

        oof = np.zeros_like(self.targets)
        reports = []
        for fold, (train_idx, val_idx) in enumerate(splits):
            report, probs = self.run_fold(fold, train_idx, val_idx)
            oof[val_idx] = probs
            reports.append(report)

        ids = [r.id for r in self.records]
        result = evaluate(ids, list(oof), list(self.targets))
        np.savez_compressed(os.path.join(self.run_dir, "oof_predictions.npz"),
                            ids=np.array(ids), probs=oof, masks=self.targets)
        write_json(os.path.join(self.run_dir, "oof_report.json"), {
            **result.summary(),
            "bp_floor": barren_plateau_floor(self.model_config.qubits),
            "folds": reports,
            "per_image": [{"id": i, "iou": u, "tgs_precision": p} for i, u, p in result.per_image],
        })
        logger.info(f"OOF tgs_map={result.tgs_map:.4f} at threshold {result.best_threshold:.2f}")
        return RunResult(self.run_dir, result, reports)


def train(model_config: ModelConfig, config: TrainConfig, records: Sequence[SampleRecord], run_dir: str) -> RunResult:
    """Runs the cross-validated protocol; see Trainer."""
    return Trainer(model_config, config, records, run_dir).run()
