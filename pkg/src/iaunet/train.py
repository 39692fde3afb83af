"""Training loop: combined objective, staged learning-rate decay,
checkpointing at decay boundaries, and loss-curve logging."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import losses
from .config import RunConfig
from .data import BatchSpec, Dataset, resize_masks, sample_batch, split_identities
from .errors import ConfigurationError, NumericalError
from .model import IauNet
from .optim import Adam
from .tensor import Tape, Tensor, no_grad

log = logging.getLogger(__name__)

LOSS_CSV = "losses.csv"
FINAL_CHECKPOINT = "checkpoint_final.iaut"


@dataclass
class TrainResult:
    model: IauNet
    history: list
    checkpoint: Path
    train_ids: list
    test_ids: list
    epochs_run: int


def _attention_shapes(model: IauNet, dataset: Dataset, frames: int):
    """Feature resolution of each IAU stage, for mask resizing."""
    probe = np.zeros((1, frames, dataset.height, dataset.width, 3), dtype=np.float32)
    with no_grad():
        _, _, traces = model.forward(probe, training=False)
    return {idx: tr.attention.shape[2:4]
            for idx, tr in traces.items() if tr.attention is not None}


def train(cfg: RunConfig, dataset: Dataset, out_dir,
          early_stop_accuracy: float = None) -> TrainResult:
    """Train per the resolved config; returns the final model and history.

    ``early_stop_accuracy`` ends training once the epoch's running
    classification accuracy reaches the threshold.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    v = cfg.values

    n_train = v["data.train_ids"]
    if n_train > 0:
        train_ids, test_ids = split_identities(dataset.num_ids, n_train, cfg.seed)
    else:
        train_ids, test_ids = list(range(dataset.num_ids)), []
    label_of = {identity: i for i, identity in enumerate(train_ids)}

    weights = losses.LossWeights(v["train.lambda1"], v["train.lambda2"],
                                 v["train.margin"])
    spec = BatchSpec(v["train.batch.classes"], v["train.batch.per_class"],
                     v["model.frames"], v["train.stride"])
    if spec.per_class < 2 or spec.classes < 2:
        raise ConfigurationError(
            "batch-hard mining needs train.batch.classes >= 2 and per_class >= 2")
    if spec.classes > len(train_ids):
        raise ConfigurationError(
            f"train.batch.classes={spec.classes} but only {len(train_ids)} train identities")

    model = IauNet(cfg.model_config(num_ids=len(train_ids)), seed=cfg.seed)
    supervise_attention = (weights.lambda2 > 0
                           and v["model.part_mode"] == "attention"
                           and model.iau_blocks())
    if supervise_attention and any(s.masks is None for s in dataset.sequences):
        raise ConfigurationError(
            "part-attention supervision (train.lambda2 > 0) needs mask data")
    attn_shapes = _attention_shapes(model, dataset, spec.frames) \
        if supervise_attention else {}

    opt = Adam(model.named_params(), lr=v["train.lr"])
    rng = np.random.default_rng(np.random.PCG64(cfg.seed + 1))
    seqs_per_epoch = sum(len(dataset.by_identity(i)) for i in train_ids)
    steps_per_epoch = max(1, seqs_per_epoch // (spec.classes * spec.per_class))

    history = []
    csv_path = out / LOSS_CSV
    epochs_run = 0
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "l_cls", "l_tri", "l_p", "l_all"])
        for epoch in range(v["train.epochs"]):
            opt.lr = v["train.lr"] * v["train.decay"] ** (epoch // v["train.decay_every"])
            sums = np.zeros(4)
            correct = total = 0
            for step in range(steps_per_epoch):
                frames, masks, raw_labels, _ = sample_batch(dataset, spec, rng,
                                                            identities=train_ids)
                labels = np.asarray([label_of[i] for i in raw_labels])
                opt.zero_grad()
                with Tape() as tape:
                    logits, emb, traces = model.forward(frames, training=True)
                    l_cls = losses.cross_entropy(logits, labels)
                    l_tri = losses.batch_hard_triplet(emb, labels, weights.margin,
                                                      reduction="mean")
                    if supervise_attention:
                        terms = None
                        for idx, hw in attn_shapes.items():
                            small = resize_masks(masks, hw)
                            t = losses.part_attention_bce(traces[idx].attention, small)
                            terms = t if terms is None else terms + t
                        l_p = terms
                    else:
                        l_p = Tensor(np.float32(0.0))
                    loss = losses.total_loss(l_cls, l_tri, l_p, weights)
                    parts = [l_cls.item(), l_tri.item(), l_p.item(), loss.item()]
                    if not np.all(np.isfinite(parts)):
                        raise NumericalError(
                            f"non-finite loss at epoch {epoch} step {step}: "
                            f"cls={parts[0]} tri={parts[1]} p={parts[2]}")
                    tape.backward(loss)
                opt.step()
                sums += parts
                correct += int((logits.data.argmax(axis=1) == labels).sum())
                total += len(labels)
            means = sums / steps_per_epoch
            accuracy = correct / total
            writer.writerow([epoch] + [f"{m:.6g}" for m in means])
            history.append({"epoch": epoch, "l_cls": means[0], "l_tri": means[1],
                            "l_p": means[2], "l_all": means[3],
                            "accuracy": accuracy, "lr": opt.lr})
            epochs_run = epoch + 1
            if (epoch + 1) % v["train.decay_every"] == 0:
                model.save(out / f"checkpoint_epoch{epoch + 1:04d}.iaut")
            if epoch % 10 == 0 or epoch == v["train.epochs"] - 1:
                log.info("epoch %d: l_all=%.4f acc=%.3f lr=%.2e",
                         epoch, means[3], accuracy, opt.lr)
            if early_stop_accuracy is not None and accuracy >= early_stop_accuracy:
                log.info("early stop at epoch %d: accuracy %.3f", epoch, accuracy)
                break

    final = out / FINAL_CHECKPOINT
    model.save(final)
    (out / "config.resolved").write_text(cfg.to_text())
    return TrainResult(model, history, final, train_ids, test_ids, epochs_run)


def train_accuracy(model: IauNet, dataset: Dataset, identities,
                   label_of=None, frames: int = None) -> float:
    """Evaluation-mode classification accuracy over whole sequences."""
    ids = sorted(identities)
    label_of = label_of or {identity: i for i, identity in enumerate(ids)}
    correct = total = 0
    seqs = [s for s in dataset.sequences if s.identity in set(ids)]
    for lo in range(0, len(seqs), 16):
        chunk = seqs[lo:lo + 16]
        batch = np.stack([s.frames[:frames] if frames else s.frames for s in chunk])
        with no_grad():
            logits, _, _ = model.forward(batch, training=False)
        pred = logits.data.argmax(axis=1)
        want = np.asarray([label_of[s.identity] for s in chunk])
        correct += int((pred == want).sum())
        total += len(chunk)
    return correct / total
