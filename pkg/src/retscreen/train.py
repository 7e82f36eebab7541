"""Training regime: cross-entropy + L2 loss through Adam over balanced
batches, per-epoch evaluation and checkpointing, exact resume, and the
fine-tuning stage that switches to the natural class distribution.

One seeded generator drives the whole stochastic trajectory (batch draws,
augmentation, dropout masks); checkpoints capture its state, so a resumed run
reproduces the unbroken one bit for bit.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import (
    Checkpoint,
    EpochRecord,
    load_checkpoint,
    rng_from_state_bytes,
    rng_state_to_bytes,
    save_checkpoint,
)
from .dataio import N_GRADES, ImageId, LabelManifest
from .errors import ScreeningError
from .metrics import accuracy, confusion, quadratic_weighted_kappa
from .nnet import Network, NetworkSpec, ShapeMismatchError
from .sampler import (
    IDENTITY_AUGMENT,
    SamplingWeights,
    augment,
    build_sampling_weights,
    random_augment_spec,
    sample_batch,
    uniform_weights,
)


class NonFiniteLossError(ScreeningError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    batch_size: int = 32
    steps_per_epoch: int | None = None  # None: ceil(n_train / batch_size)
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    balanced_sampling: bool = True
    augment: bool = True
    eval_every: int = 1
    eval_train_samples: int = 256


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls(
            m={name: np.zeros_like(params.tensors[name]) for name in params.trainable},
            v={name: np.zeros_like(params.tensors[name]) for name in params.trainable},
        )


def adam_step(params, grads: dict[str, np.ndarray], state: AdamState, cfg: TrainConfig) -> None:
    """One Adam update over the trainable parameters, in place."""
    state.t += 1
    bc1 = 1.0 - cfg.adam_beta1**state.t
    bc2 = 1.0 - cfg.adam_beta2**state.t
    for name in params.trainable:
        if name not in grads:
            raise ShapeMismatchError(f"missing gradient for {name}")
        g = grads[name]
        theta = params.tensors[name]
        if g.shape != theta.shape:
            raise ShapeMismatchError(f"{name}: gradient {g.shape} vs parameter {theta.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.adam_beta1
        m += (1.0 - cfg.adam_beta1) * g
        v *= cfg.adam_beta2
        v += (1.0 - cfg.adam_beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        theta -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_epsilon)


@dataclass
class ArrayDataset:
    """In-memory dataset: preprocessed HxWx3 images keyed by image id."""

    images: dict[ImageId, np.ndarray]
    grades: dict[ImageId, int]

    def ids(self) -> list[ImageId]:
        return sorted(self.images)

    def manifest(self) -> LabelManifest:
        return LabelManifest(dict(self.grades))

    def subset(self, ids) -> "ArrayDataset":
        return ArrayDataset(
            images={i: self.images[i] for i in ids},
            grades={i: self.grades[i] for i in ids},
        )

    def __len__(self) -> int:
        return len(self.images)


def split_patients(ids, fractions, seed: int = 0) -> list[list[ImageId]]:
    """Partition image ids patient-wise (both eyes stay together) into groups
    of the given fractions; the last group absorbs the remainder."""
    if not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ValueError("fractions must sum to 1")
    patients = sorted({i.patient_id for i in ids})
    rng = np.random.default_rng(seed)
    rng.shuffle(patients)
    groups: list[list[ImageId]] = []
    start = 0
    for j, frac in enumerate(fractions):
        stop = len(patients) if j == len(fractions) - 1 else start + int(round(frac * len(patients)))
        chosen = set(patients[start:stop])
        groups.append(sorted(i for i in ids if i.patient_id in chosen))
        start = stop
    return groups


def one_hot(grades, dtype=np.float32) -> np.ndarray:
    return np.eye(N_GRADES, dtype=dtype)[np.asarray(grades, dtype=np.int64)]


def assemble_batch(dataset: ArrayDataset, ids, augment_on: bool, rng) -> tuple[np.ndarray, np.ndarray]:
    """Stack images into a (B, 3, S, S) float32 tensor plus one-hot labels,
    applying a fresh random rotation/flip per image when augmenting."""
    first = dataset.images[ids[0]]
    size = first.shape[0]
    x = np.empty((len(ids), 3, size, size), dtype=np.float32)
    grades = np.empty(len(ids), dtype=np.int64)
    for j, image_id in enumerate(ids):
        img = dataset.images[image_id]
        if augment_on:
            img = augment(img, random_augment_spec(rng))
        x[j] = img.transpose(2, 0, 1)
        grades[j] = dataset.grades[image_id]
    return x, one_hot(grades)


def evaluate_model(net: Network, dataset: ArrayDataset, ids=None, batch_size: int = 16):
    """Infer-mode kappa and accuracy over the given ids (defaults to all)."""
    ids = list(ids) if ids is not None else dataset.ids()
    truth = np.array([dataset.grades[i] for i in ids], dtype=np.int64)
    preds = np.empty(len(ids), dtype=np.int64)
    for start in range(0, len(ids), batch_size):
        chunk = ids[start : start + batch_size]
        x, _ = assemble_batch(dataset, chunk, augment_on=False, rng=None)
        probs, _ = net.forward(x, train=False)
        preds[start : start + len(chunk)] = probs.argmax(axis=1)
    cm = confusion(truth, preds)
    return quadratic_weighted_kappa(cm), accuracy(cm)


@dataclass
class TrainResult:
    net: Network
    history: list[EpochRecord]
    best_params: dict[str, np.ndarray]
    best_val_kappa: float
    baseline_val_kappa: float | None = None


def _make_checkpoint(net, adam, rng, epoch, history) -> Checkpoint:
    return Checkpoint(
        descriptor=net.spec.to_json(),
        tensors=net.params.copy_values(),
        adam_m={k: v.copy() for k, v in adam.m.items()},
        adam_v={k: v.copy() for k, v in adam.v.items()},
        adam_t=adam.t,
        rng_state=rng_state_to_bytes(rng),
        epoch=epoch,
        history=list(history),
    )


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_kappa", "val_kappa", "train_loss", "val_acc"])
        for rec in history:
            writer.writerow(
                [rec.epoch, repr(rec.train_kappa), repr(rec.val_kappa), repr(rec.train_loss), repr(rec.val_acc)]
            )


def read_history_csv(path) -> list[EpochRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            records.append(
                EpochRecord(
                    epoch=int(row["epoch"]),
                    train_kappa=float(row["train_kappa"]),
                    val_kappa=float(row["val_kappa"]),
                    train_loss=float(row["train_loss"]),
                    val_acc=float(row["val_acc"]),
                )
            )
    return records


def train(
    net: Network,
    train_set: ArrayDataset,
    val_set: ArrayDataset | None,
    cfg: TrainConfig,
    checkpoint_dir=None,
    resume: Checkpoint | None = None,
) -> TrainResult:
    """Run the training loop: per epoch, steps_per_epoch sampled batches
    through forward/backward/Adam, then infer-mode evaluation on a fixed
    train subsample and the validation set, a history record, and (when a
    checkpoint directory is given) latest/best checkpoints plus a history CSV
    mirror. Kappa is only ever a metric, never the loss."""
    if len(train_set) == 0:
        raise ValueError("empty training set")
    manifest = train_set.manifest()
    weights = build_sampling_weights(manifest) if cfg.balanced_sampling else uniform_weights(manifest)
    steps = cfg.steps_per_epoch or max(1, math.ceil(len(train_set) / cfg.batch_size))

    if resume is not None:
        if resume.descriptor != net.spec.to_json():
            raise ShapeMismatchError("checkpoint network descriptor does not match the network")
        net.params.load_values(resume.tensors)
        adam = AdamState(
            m={k: v.copy() for k, v in resume.adam_m.items()},
            v={k: v.copy() for k, v in resume.adam_v.items()},
            t=resume.adam_t,
        )
        rng = rng_from_state_bytes(resume.rng_state)
        start_epoch = resume.epoch
        history = list(resume.history)
    else:
        adam = AdamState.for_params(net.params)
        rng = np.random.default_rng(cfg.seed)
        start_epoch = 0
        history = []

    eval_rng = np.random.default_rng([cfg.seed, 101])
    train_ids = train_set.ids()
    subsample = list(train_ids)
    eval_rng.shuffle(subsample)
    subsample = sorted(subsample[: cfg.eval_train_samples])

    best_kappa = -np.inf
    best_params: dict[str, np.ndarray] | None = None
    for rec in history:
        ref = rec.val_kappa if val_set is not None else rec.train_kappa
        if np.isfinite(ref) and ref > best_kappa:
            best_kappa = ref

    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if checkpoint_dir is not None:
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(start_epoch, cfg.epochs):
        losses = []
        for step in range(steps):
            batch_ids = sample_batch(weights, cfg.batch_size, rng)
            x, y = assemble_batch(train_set, batch_ids, augment_on=cfg.augment, rng=rng)
            probs, trace = net.forward(x, train=True, rng=rng)
            loss = net.loss(trace, y)
            if not np.isfinite(loss):
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch} step {step}; "
                    f"batch ids: {[str(i) for i in batch_ids]}"
                )
            grads, _ = net.backward(trace, y)
            adam_step(net.params, grads, adam, cfg)
            losses.append(loss)

        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            train_kappa, _ = evaluate_model(net, train_set, subsample, cfg.batch_size)
            if val_set is not None and len(val_set) > 0:
                val_kappa, val_acc = evaluate_model(net, val_set, batch_size=cfg.batch_size)
            else:
                val_kappa, val_acc = float("nan"), float("nan")
            history.append(EpochRecord(epoch, train_kappa, val_kappa, float(np.mean(losses)), val_acc))
            ref = val_kappa if val_set is not None and len(val_set) > 0 else train_kappa
            if np.isfinite(ref) and ref > best_kappa:
                best_kappa = ref
                best_params = net.params.copy_values()
                if checkpoint_dir is not None:
                    save_checkpoint(
                        _make_checkpoint(net, adam, rng, epoch + 1, history),
                        checkpoint_dir / "best.ckpt",
                    )

        if checkpoint_dir is not None:
            save_checkpoint(
                _make_checkpoint(net, adam, rng, epoch + 1, history),
                checkpoint_dir / "latest.ckpt",
            )
            write_history_csv(history, checkpoint_dir / "history.csv")

    if best_params is None:
        best_params = net.params.copy_values()
        best_kappa = float("nan")
    return TrainResult(net=net, history=history, best_params=best_params, best_val_kappa=float(best_kappa))


def network_from_checkpoint(ckpt: Checkpoint) -> Network:
    net = Network.build(NetworkSpec.from_json(ckpt.descriptor))
    net.params.load_values(ckpt.tensors)
    return net


def finetune(
    ckpt: Checkpoint,
    train_set: ArrayDataset,
    val_set: ArrayDataset | None,
    cfg: TrainConfig,
    lr_scale: float = 0.1,
    checkpoint_dir=None,
) -> TrainResult:
    """Continue training from a checkpoint with balancing off (batches drawn
    uniformly, i.e. the natural class distribution) and a reduced learning
    rate. The starting parameters are evaluated first and kept as the best
    candidate, so the selected model never scores below the starting one on
    the validation set."""
    net = network_from_checkpoint(ckpt)
    ft_cfg = replace(
        cfg,
        balanced_sampling=False,
        learning_rate=cfg.learning_rate * lr_scale,
    )
    baseline = None
    if val_set is not None and len(val_set) > 0:
        baseline, _ = evaluate_model(net, val_set, batch_size=cfg.batch_size)
    baseline_params = net.params.copy_values()

    result = train(net, train_set, val_set, ft_cfg, checkpoint_dir=checkpoint_dir)
    if baseline is not None and (not np.isfinite(result.best_val_kappa) or baseline >= result.best_val_kappa):
        if checkpoint_dir is not None:
            snapshot = Checkpoint(
                descriptor=net.spec.to_json(),
                tensors=baseline_params,
                adam_m={},
                adam_v={},
                adam_t=0,
                rng_state=rng_state_to_bytes(np.random.default_rng(cfg.seed)),
                epoch=0,
                history=list(result.history),
            )
            save_checkpoint(snapshot, Path(checkpoint_dir) / "best.ckpt")
        result = TrainResult(
            net=result.net,
            history=result.history,
            best_params=baseline_params,
            best_val_kappa=float(baseline),
            baseline_val_kappa=float(baseline),
        )
    else:
        result = TrainResult(
            net=result.net,
            history=result.history,
            best_params=result.best_params,
            best_val_kappa=result.best_val_kappa,
            baseline_val_kappa=None if baseline is None else float(baseline),
        )
    return result


__all__ = [
    "AdamState",
    "ArrayDataset",
    "Checkpoint",
    "EpochRecord",
    "NonFiniteLossError",
    "TrainConfig",
    "TrainResult",
    "adam_step",
    "assemble_batch",
    "evaluate_model",
    "finetune",
    "load_checkpoint",
    "network_from_checkpoint",
    "one_hot",
    "read_history_csv",
    "save_checkpoint",
    "split_patients",
    "train",
    "write_history_csv",
]
