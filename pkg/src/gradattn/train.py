"""Training, evaluation and gradient-diagnosis loops used by the CLI."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import Dataset, EvalLoader, load_cifar_bin, load_idx, split_and_batch, synthetic_dataset
from .errors import ContractError, NumericError
from .graddiag import (
    aggregate_over_steps,
    collect_layer_grad_norms,
    grad_flow_report,
    gradient_health_score,
    records_to_csv,
)
from .layers import cross_entropy
from .metrics import MetricBundle, PredictionSet, evaluate
from .models import ModelGraph, build_model
from .optim import AdamState, EarlyStopState, PlateauState, adam_step, early_stop_update, plateau_update

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("epoch", "train_acc", "val_acc", "train_loss", "val_loss", "lr")


def load_dataset(cfg: RunConfig) -> Dataset:
    """Materialize the configured dataset; raises OSError for unreadable paths."""
    if cfg.dataset == "synthetic":
        ds = synthetic_dataset(cfg.synthetic_classes, cfg.synthetic_per_class,
                               cfg.synthetic_size, cfg.synthetic_size, seed=cfg.seed)
    elif cfg.dataset == "fashion_mnist":
        root = Path(cfg.data_path)
        images = _first_existing(root, ["train-images-idx3-ubyte", "train-images-idx3-ubyte.gz"])
        labels = _first_existing(root, ["train-labels-idx1-ubyte", "train-labels-idx1-ubyte.gz"])
        ds = load_idx(images, labels, num_classes=10, name="fashion_mnist")
    elif cfg.dataset == "idx":
        ds = load_idx(cfg.data_path, cfg.labels_path)
    else:
        root = Path(cfg.data_path)
        paths = sorted(root.glob("data_batch_*.bin")) if root.is_dir() else [root]
        if not paths:
            raise FileNotFoundError(f"no CIFAR-10 batches under {root}")
        ds = load_cifar_bin(paths)
    if cfg.subset:
        ds = ds.sample(cfg.subset, seed=cfg.seed)
    return ds


def _first_existing(root: Path, names) -> Path:
    for n in names:
        if (root / n).exists():
            return root / n
    raise FileNotFoundError(f"none of {names} found under {root}")


def build_from_config(cfg: RunConfig, ds_shape: tuple, num_classes: int) -> ModelGraph:
    _, c, h, _ = ds_shape
    width = cfg.width_config(c, h, num_classes)
    return build_model(cfg.model, width, cfg.encoder_config() if cfg.model == "gradattn" else None, cfg.seed)


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict(model: ModelGraph, loader: EvalLoader) -> tuple[PredictionSet, float]:
    """Eval-mode pass; returns predictions and the mean cross-entropy."""
    model.eval()
    probs, labels, loss_sum = [], [], 0.0
    with T.no_grad():
        for xb, yb in loader:
            logits, _ = model(T.Tensor(xb))
            if not np.all(np.isfinite(logits.data)):
                raise NumericError("non-finite logits in evaluation pass")
            loss_sum += float(cross_entropy(logits, yb).data) * len(yb)
            probs.append(_softmax_np(logits.data))
            labels.append(yb)
    n = sum(len(y) for y in labels)
    return PredictionSet(np.concatenate(probs), np.concatenate(labels)), loss_sum / n


def final_bundle(model: ModelGraph, train_eval: EvalLoader, val: EvalLoader) -> MetricBundle:
    train_preds, _ = predict(model, train_eval)
    train_acc = float((train_preds.predictions() == train_preds.labels).mean())
    val_preds, val_loss = predict(model, val)
    return evaluate(val_preds, loss=val_loss, train_acc=train_acc)


# -- checkpoint plumbing ----------------------------------------------------------------

def _checkpoint_tensors(model: ModelGraph, adam: AdamState | None) -> dict:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    if adam is not None:
        for k in adam.m:
            tensors[f"optim.m.{k}"] = adam.m[k]
            tensors[f"optim.v.{k}"] = adam.v[k]
    return tensors


def write_checkpoint(path, model, cfg: RunConfig, adam=None, plateau=None, early=None, epoch=None) -> None:
    meta = {"epoch": epoch, "model_name": model.name}
    if adam is not None:
        meta["adam"] = adam.scalars()
    if plateau is not None:
        meta["plateau"] = asdict(plateau)
    if early is not None:
        meta["early_stop"] = asdict(early)
    save_checkpoint(path, _checkpoint_tensors(model, adam), cfg.to_dict(), meta)


def read_checkpoint(path, ds: Dataset | None = None) -> tuple[ModelGraph, RunConfig, dict]:
    """Rebuild the model described by a checkpoint and load its weights."""
    tensors, config, meta = load_checkpoint(path)
    cfg = RunConfig.from_dict(config)
    weights = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    num_classes = weights["head.fc.bias"].shape[0]
    stem = weights["stem.conv.weight"]
    if ds is not None and ds.num_classes != num_classes:
        raise ContractError(f"dataset has {ds.num_classes} classes, checkpoint head has {num_classes}")
    input_size = ds.images.shape[2] if ds is not None else cfg.synthetic_size
    model = build_from_config(cfg, (1, stem.shape[1], input_size, input_size), num_classes)
    model.load_state_dict(weights)
    meta["optim_tensors"] = {k: v for k, v in tensors.items() if k.startswith("optim.")}
    return model, cfg, meta


# -- training -----------------------------------------------------------------------------

@dataclass
class TrainResult:
    epochs_run: int
    best_epoch: int
    bundle: MetricBundle
    stopped_early: bool


def _fmt(x: float) -> str:
    return repr(float(x))


def train_run(cfg: RunConfig, out_dir, ds: Dataset | None = None, echo=print) -> TrainResult:
    """Train to early stop or ``max_epochs`` and write all run artifacts to ``out_dir``.

    Artifacts: ``config.yaml``, ``metrics.csv``, ``gradflow.csv``,
    ``gradflow.json``, ``checkpoint.bin`` (best val accuracy) and
    ``metrics.json`` (final bundle on the val split).
    """
    if ds is None:
        ds = load_dataset(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")

    with T.precision(cfg.precision):
        model = build_from_config(cfg, ds.images.shape, ds.num_classes)
        train_loader, val_loader = split_and_batch(ds, cfg.split_config())
        train_eval = EvalLoader(ds, train_loader.indices, cfg.batch_size)
        adam = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
        plateau = PlateauState(cfg.lr, cfg.plateau_patience, cfg.plateau_factor, cfg.plateau_threshold)
        early = EarlyStopState(patience=cfg.early_stop_patience)

        best_state = None
        step = 0
        grad_history = []
        metrics_fh = open(out / "metrics.csv", "w", newline="")
        flow_fh = open(out / "gradflow.csv", "w", newline="")
        writer = csv.writer(metrics_fh, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        try:
            epoch = 0
            for epoch in range(1, cfg.max_epochs + 1):
                t0 = time.perf_counter()
                model.train()
                correct, seen, loss_sum = 0, 0, 0.0
                for xb, yb in train_loader.batches(epoch - 1):
                    model.zero_grad()
                    logits, _ = model(T.Tensor(xb))
                    loss = cross_entropy(logits, yb)
                    lval = float(loss.data)
                    if not math.isfinite(lval):
                        _dump_numeric_failure(out, epoch, step, lval, model)
                        raise NumericError(f"non-finite loss {lval} at epoch {epoch}, step {step}")
                    T.backward(loss)
                    if step % cfg.gradflow_every == 0:
                        records = collect_layer_grad_norms(model, step)
                        grad_history.extend(records)
                        records_to_csv(records, flow_fh)
                    adam_step(model.params, adam)
                    correct += int((logits.data.argmax(axis=1) == yb).sum())
                    seen += len(yb)
                    loss_sum += lval * len(yb)
                    step += 1

                try:
                    val_preds, val_loss = predict(model, val_loader)
                except NumericError:
                    _dump_numeric_failure(out, epoch, step, math.nan, model)
                    raise
                val_acc = float((val_preds.predictions() == val_preds.labels).mean())
                train_acc, train_loss = correct / seen, loss_sum / seen
                writer.writerow((epoch, _fmt(train_acc), _fmt(val_acc), _fmt(train_loss), _fmt(val_loss),
                                 _fmt(adam.lr)))
                metrics_fh.flush()
                echo(f"epoch {epoch} train_acc {train_acc:.4f} val_acc {val_acc:.4f} "
                     f"train_loss {train_loss:.4f} val_loss {val_loss:.4f} lr {adam.lr:.2e} "
                     f"({time.perf_counter() - t0:.1f}s)")

                improved = val_acc > early.best
                _, stop = early_stop_update(early, val_acc)
                _, adam.lr = plateau_update(plateau, val_acc)
                if improved:
                    best_state = {k: v.copy() for k, v in model.state_dict().items()}
                    write_checkpoint(out / "checkpoint.bin", model, cfg, adam, plateau, early, epoch)
                if stop:
                    break
        finally:
            metrics_fh.close()
            flow_fh.close()

        if grad_history:
            (out / "gradflow.json").write_text(grad_flow_report(grad_history)["json"])
        model.load_state_dict(best_state)
        bundle = final_bundle(model, train_eval, val_loader)
    (out / "metrics.json").write_text(bundle.to_json())
    return TrainResult(epoch, early.best_epoch + 1, bundle, early.stop)


def _dump_numeric_failure(out: Path, epoch: int, step: int, loss: float, model: ModelGraph) -> None:
    finite = {k: bool(np.all(np.isfinite(p.data))) for k, p in model.params.items()}
    doc = {"epoch": epoch, "step": step, "loss": repr(loss),
           "nonfinite_params": [k for k, ok in finite.items() if not ok]}
    (out / "numeric_failure.json").write_text(json.dumps(doc, indent=2))


# -- diagnosis ----------------------------------------------------------------------------

def diagnose(model: ModelGraph, cfg: RunConfig, ds: Dataset, steps: int):
    """Run ``steps`` forward/backward passes without updating weights.

    Returns ``(per-step records, report on step-averaged norms)``.
    """
    if steps < 1:
        raise ContractError("diagnose needs at least one step (empty records)")
    train_loader, _ = split_and_batch(ds, cfg.split_config())
    saved = {k: v.copy() for k, v in model.state_dict().items()}
    records = []
    model.train()
    step = 0
    while step < steps:
        for xb, yb in train_loader:
            model.zero_grad()
            logits, _ = model(T.Tensor(xb))
            T.backward(cross_entropy(logits, yb))
            records.extend(collect_layer_grad_norms(model, step))
            step += 1
            if step >= steps:
                break
    model.load_state_dict(saved)  # batch-norm running stats drift in train mode
    return records, gradient_health_score(aggregate_over_steps(records))
