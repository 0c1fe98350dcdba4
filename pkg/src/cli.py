"""
Command-line surface: synth, train, eval, ablate, diagnose (circuit | gradients | landscape) and rle.

Reports go to files or stdout; logs go to stderr. Exit codes: 0 success, 1 runtime failure,
2 usage error (bad flags, invalid configurations, malformed labels).
"""
import functools
import glob
import hashlib
import json
import logging
import os
import sys
from typing import List, Optional

import click
import numpy as np
import pandas as pd

from src.checkpoint_utils import write_json
from src.config_utils import resolve_run_config
from src.dataio.extraction import DataExtractor, export_corpus, read_pgm_bytes, write_pgm_bytes
from src.dataio.rle import decode_rle, encode_rle
from src.dataio.synthetic import generate_synthetic
from src.errors import ConfigError, RleParseError
from src.metrics import evaluate
from src.qsim import ENCODING_KINDS, CircuitParams, barren_plateau_floor, circuit_gradients, encoding_scales, \
    gradient_variance_scan, run_circuit
from src.segnet import QUBIT_CHOICES, TOPOLOGIES
from src.trainer import Trainer, train

logger = logging.getLogger(__name__)

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")
MERGE_FLAGS = ("quantum", "classical", "identity", "skip")


def _fmt(value: float) -> str:
    return f"{value:.6g}"


def handle_errors(fn):
    """Maps configuration and label errors to usage errors (exit 2) and other failures to exit 1."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except (ConfigError, RleParseError) as e:
            raise click.UsageError(str(e)) from e
        except Exception as e:
            logger.debug("Command failed", exc_info=True)
            raise click.ClickException(f"{type(e).__name__}: {e}") from e
    return wrapper


def _float_list(ctx, param, value: Optional[str]) -> Optional[List[float]]:
    if value is None or value.strip() == "":
        return None
    try:
        return [float(v) for v in value.split(",")]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated numbers, got '{value}'") from None


def _int_list(ctx, param, value: str) -> List[int]:
    try:
        return [int(v) for v in value.split(",")]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got '{value}'") from None


def _empty_fraction(ctx, param, value: float) -> float:
    if not 0.0 <= value < 1.0:
        raise click.BadParameter(f"must lie in [0, 1), got {value}")
    return value


def _model_overrides(topology: Optional[str], merge: Optional[str], qubits: Optional[int],
                     reupload: Optional[bool]) -> dict:
    if merge == "quantum" and topology == "unet_skip":
        raise click.UsageError("--merge quantum gates FPN merges; for quantum skip gates on unet_skip use --merge skip")
    if merge == "skip" and topology == "fpn":
        raise click.UsageError("--merge skip needs --topology unet_skip")
    merge_kind = merge
    if merge == "skip":
        topology, merge_kind = "unet_skip", "quantum"
    return {"topology": topology, "merge_kind": merge_kind, "qubits": qubits, "reupload": reupload}


def _run_hash(fold_reports: List[dict], key: str) -> str:
    return hashlib.sha256("|".join(r[key] for r in fold_reports).encode("utf-8")).hexdigest()


@click.group()
@click.option("--log-level", type=click.Choice(LOG_LEVELS, case_sensitive=False), default="INFO", show_default=True,
              help="Verbosity of the stderr log.")
def cli(log_level: str):
    """Quantum feature-pyramid gating for binary salt segmentation."""
    logging.basicConfig(level=log_level.upper(), stream=sys.stderr, force=True,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


@cli.command()
@click.option("--n", "n_samples", type=click.IntRange(min=1), default=200, show_default=True, help="Number of samples.")
@click.option("--resolution", type=click.IntRange(min=8), default=101, show_default=True, help="Image size.")
@click.option("--empty-fraction", type=float, default=0.4, show_default=True, callback=_empty_fraction,
              help="Fraction of samples with empty masks, in [0, 1).")
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True, help="Corpus seed.")
@click.option("--out", type=click.Path(file_okay=False), default="synthetic_corpus", show_default=True,
              help="Output corpus directory.")
@handle_errors
def synth(n_samples: int, resolution: int, empty_fraction: float, seed: int, out: str):
    """Writes a seeded synthetic corpus in the competition layout."""
    records = generate_synthetic(n_samples, resolution, empty_fraction, seed)
    export_corpus(records, out)
    click.echo(f"wrote {len(records)} samples to {out}")


@cli.command("train")
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True, help="Corpus directory.")
@click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False), default=None,
              help="YAML/JSON run configuration with 'model' and 'train' sections.  [default: built-in defaults]")
@click.option("--topology", type=click.Choice(TOPOLOGIES), default=None,
              help="Decoder topology.  [default: from config, else fpn]")
@click.option("--merge", type=click.Choice(MERGE_FLAGS), default=None,
              help="Merge operator; 'skip' selects quantum skip gates on unet_skip.  [default: from config, else quantum]")
@click.option("--qubits", type=click.Choice([str(q) for q in QUBIT_CHOICES]), default=None,
              help="Qubits per gate circuit.  [default: from config, else 4]")
@click.option("--reupload/--no-reupload", default=None, help="Data re-uploading in skip gates; FPN gates always re-upload.  [default: from config, else on]")
@click.option("--folds", type=click.IntRange(min=2), default=None, help="Cross-validation folds.  [default: from config, else 5]")
@click.option("--seed", type=click.IntRange(min=0), default=None, help="Run seed.  [default: from config, else 0]")
@click.option("--out", type=click.Path(file_okay=False), default="runs/train", show_default=True, help="Run directory.")
@handle_errors
def train_command(data: str, config_file: Optional[str], topology: Optional[str], merge: Optional[str],
                  qubits: Optional[str], reupload: Optional[bool], folds: Optional[int], seed: Optional[int], out: str):
    """Cross-validated training; prints the pooled out-of-fold TGS-mAP and threshold."""
    overrides = _model_overrides(topology, merge, int(qubits) if qubits else None, reupload)
    model_config, train_config = resolve_run_config(config_file, overrides, {"folds": folds, "seed": seed})
    records = DataExtractor(data).load_corpus()
    result = train(model_config, train_config, records, out)
    click.echo(f"tgs_map={_fmt(result.eval_result.tgs_map)} best_threshold={_fmt(result.eval_result.best_threshold)}")


@cli.command("eval")
@click.option("--run", "run_dir", type=click.Path(exists=True, file_okay=False), required=True,
              help="Run directory holding oof_predictions.npz and the fold checkpoints.")
@click.option("--data", type=click.Path(exists=True, file_okay=False), default=None,
              help="Corpus the run was trained on; when given, predictions are recomputed from the fold checkpoints.")
@handle_errors
def eval_command(run_dir: str, data: Optional[str]):
    """Re-runs the threshold search on out-of-fold predictions; writes eval.csv and eval.json."""
    if data is not None:
        trainer = Trainer.from_run_dir(run_dir, DataExtractor(data).load_corpus())
        ids = [r.id for r in trainer.records]
        probs, masks = trainer.predict_out_of_fold(), trainer.targets
    else:
        with np.load(os.path.join(run_dir, "oof_predictions.npz")) as stored:
            ids = [str(i) for i in stored["ids"]]
            probs, masks = stored["probs"], stored["masks"]
    result = evaluate(ids, list(probs), list(masks))
    table = pd.DataFrame(result.per_image, columns=["id", "iou", "tgs_precision"])
    summary = pd.DataFrame([{"id": "mean", "iou": table["iou"].mean(), "tgs_precision": result.tgs_map}])
    pd.concat([table, summary], ignore_index=True).to_csv(os.path.join(run_dir, "eval.csv"), index=False,
                                                          float_format="%.6g")
    write_json(os.path.join(run_dir, "eval.json"), result.summary())
    click.echo(f"tgs_map={_fmt(result.tgs_map)} best_threshold={_fmt(result.best_threshold)}")


@cli.command()
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True, help="Corpus directory.")
@click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Run configuration shared by both arms; its merge settings are overridden.  [default: built-in defaults]")
@click.option("--seed", type=click.IntRange(min=0), default=None, help="Shared seed.  [default: from config, else 0]")
@click.option("--out", type=click.Path(file_okay=False), default="runs/ablation", show_default=True,
              help="Output directory; each arm trains in a subfolder.")
@handle_errors
def ablate(data: str, config_file: Optional[str], seed: Optional[int], out: str):
    """Matched quantum-gate versus classical-addition FPN pair with shared seeds."""
    records = DataExtractor(data).load_corpus()
    runs = {}
    for arm in ("classical", "quantum"):
        model_config, train_config = resolve_run_config(
            config_file, {"topology": "fpn", "merge_kind": arm}, {"seed": seed})
        if model_config.variant is not None:
            raise ConfigError("ablate compares FPN merge operators; remove the skip-attention variant from the config")
        runs[arm] = (model_config, train(model_config, train_config, records, os.path.join(out, arm)))

    names = {}
    for arm in runs:
        with open(os.path.join(out, arm, "config.json"), "r") as f:
            names[arm] = set(json.load(f)["parameter_names"])
    baseline = runs["classical"][1].eval_result.tgs_map
    rows = []
    for arm, (model_config, result) in runs.items():
        rows.append({
            "variant": arm,
            "tgs_map": result.eval_result.tgs_map,
            "best_threshold": result.eval_result.best_threshold,
            "delta_pp": (result.eval_result.tgs_map - baseline) * 100.0,
            "batch_order_hash": _run_hash(result.fold_reports, "batch_order_hash"),
            "shared_init_hash": _run_hash(result.fold_reports, "shared_init_hash"),
        })
    table = pd.DataFrame(rows)
    table.to_csv(os.path.join(out, "ablation.csv"), index=False, float_format="%.6g")
    only_quantum = sorted(names["quantum"] - names["classical"])
    write_json(os.path.join(out, "ablation.json"), {
        "rows": rows,
        "only_classical": sorted(names["classical"] - names["quantum"]),
        "only_quantum": only_quantum,
        "non_gate_diff": [n for n in only_quantum if ".gate" not in n],
        "batch_order_match": rows[0]["batch_order_hash"] == rows[1]["batch_order_hash"],
        "shared_init_match": rows[0]["shared_init_hash"] == rows[1]["shared_init_hash"],
    })
    click.echo(table.to_csv(index=False, float_format="%.6g"), nl=False)


@cli.group()
def diagnose():
    """Circuit, training-gradient and landscape diagnostics."""


@diagnose.command()
@click.option("--x", "x_values", callback=_float_list, default=None, help="Comma-separated inputs.  [default: zeros]")
@click.option("--angles", callback=_float_list, default=None,
              help="Comma-separated layers*qubits*3 angles (phi, theta, omega per qubit).  [default: zeros]")
@click.option("--qubits", type=click.IntRange(2, 10), default=4, show_default=True, help="Register size.")
@click.option("--layers", type=click.IntRange(min=1), default=2, show_default=True, help="Variational layers.")
@click.option("--reupload/--no-reupload", default=True, show_default=True, help="Data re-uploading.")
@click.option("--encoding", type=click.Choice(ENCODING_KINDS), default="unit", show_default=True,
              help="Per-layer encoding multipliers.")
@click.option("--upstream", callback=_float_list, default=None,
              help="Comma-separated coefficients on the expectations.  [default: ones]")
@handle_errors
def circuit(x_values, angles, qubits: int, layers: int, reupload: bool, encoding: str, upstream):
    """Prints expectations and parameter-shift gradients as kind,index,value rows."""
    x = np.zeros(qubits) if x_values is None else np.asarray(x_values)
    upstream = np.ones(qubits) if upstream is None else np.asarray(upstream)
    shape = (layers, qubits, 3)
    if angles is None:
        angle_array = np.zeros(shape)
    elif len(angles) != int(np.prod(shape)):
        raise click.BadParameter(f"needs {int(np.prod(shape))} values, got {len(angles)}", param_hint="--angles")
    else:
        angle_array = np.asarray(angles).reshape(shape)
    if len(x) != qubits or len(upstream) != qubits:
        raise click.BadParameter(f"--x and --upstream need {qubits} values each")
    params = CircuitParams(qubits, layers, angle_array, reupload, encoding_scales(encoding, layers))
    expectations = run_circuit(x, params)
    d_angles, d_x = circuit_gradients(x, params, upstream)
    click.echo("kind,index,value")
    for i, value in enumerate(expectations.tolist()):
        click.echo(f"expectation,{i},{_fmt(value)}")
    for i, value in enumerate(d_x):
        click.echo(f"d_x,{i},{_fmt(value)}")
    for i, value in enumerate(d_angles.ravel()):
        click.echo(f"d_angle,{i},{_fmt(value)}")


@diagnose.command()
@click.option("--run", "run_dir", type=click.Path(exists=True, file_okay=False), required=True, help="Run directory.")
@handle_errors
def gradients(run_dir: str):
    """Summarises logged quantum gradient variance against the 2^-n floor."""
    with open(os.path.join(run_dir, "config.json"), "r") as f:
        n_qubits = int(json.load(f)["model"]["qubits"])
    logs = sorted(glob.glob(os.path.join(run_dir, "fold*", "log.csv")))
    if not logs:
        raise FileNotFoundError(f"no fold logs under {run_dir}")
    variance = pd.concat([pd.read_csv(path) for path in logs], ignore_index=True)["q_grad_var"].dropna()
    if variance.empty:
        raise ValueError("the run has no quantum parameters")
    floor = barren_plateau_floor(n_qubits)
    click.echo("metric,value")
    for key, value in (("n_qubits", n_qubits), ("bp_floor", floor),
                       ("min_variance", variance.min()), ("median_variance", variance.median()),
                       ("min_ratio", variance.min() / floor), ("median_ratio", variance.median() / floor)):
        click.echo(f"{key},{_fmt(value)}")


@diagnose.command()
@click.option("--qubits", "qubit_counts", callback=_int_list, default="2,4,6,8", show_default=True,
              help="Comma-separated register sizes.")
@click.option("--layers", type=click.IntRange(min=1), default=2, show_default=True, help="Variational layers.")
@click.option("--samples", type=click.IntRange(min=2), default=200, show_default=True, help="Random draws per size.")
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True, help="Sampling seed.")
@handle_errors
def landscape(qubit_counts: List[int], layers: int, samples: int, seed: int):
    """Variance of d<Z_0>/d(theta) over random circuits, per register size."""
    click.echo("n_qubits,variance,bp_floor,ratio")
    for n_qubits, variance, floor in gradient_variance_scan(qubit_counts, layers, samples, seed):
        click.echo(f"{n_qubits},{_fmt(variance)},{_fmt(floor)},{_fmt(variance / floor)}")


@cli.group()
def rle():
    """Run-length mask codec over stdin/stdout (PGM masks, salt = 255)."""


@rle.command()
@click.option("--height", type=click.IntRange(min=1), default=101, show_default=True, help="Mask height.")
@click.option("--width", type=click.IntRange(min=1), default=101, show_default=True, help="Mask width.")
@handle_errors
def decode(height: int, width: int):
    """Reads a run-length label on stdin and writes a PGM mask to stdout."""
    label = click.get_text_stream("stdin").read().strip()
    mask = decode_rle(label, height, width)
    stdout = click.get_binary_stream("stdout")
    stdout.write(write_pgm_bytes(mask * 255))
    stdout.flush()


@rle.command()
@click.option("--height", type=click.IntRange(min=1), default=None, help="Expected mask height.  [default: any]")
@click.option("--width", type=click.IntRange(min=1), default=None, help="Expected mask width.  [default: any]")
@handle_errors
def encode(height: Optional[int], width: Optional[int]):
    """Reads a PGM mask (0/1 or 0/255) on stdin and writes its run-length label."""
    pixels = read_pgm_bytes(click.get_binary_stream("stdin").read())
    if (height and pixels.shape[0] != height) or (width and pixels.shape[1] != width):
        raise click.UsageError(f"mask is {pixels.shape[0]}x{pixels.shape[1]}, expected {height}x{width}")
    mask = np.where(pixels == 255, 1, pixels)
    try:
        label = encode_rle(mask)
    except ValueError as e:
        raise click.UsageError(str(e)) from e
    click.echo(label)


if __name__ == "__main__":
    cli()
