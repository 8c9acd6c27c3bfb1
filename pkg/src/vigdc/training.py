"""Training protocol: parent-grouped stratified splits, stratified k-fold,
early stopping + reduce-LR-on-plateau callbacks with best-weight
restoration, and test-set evaluation.

All quadrants of one parent image always land on the same side of any
split; quadrants of a pillar are near-duplicates and splitting them across
train/test would inflate scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import weights as weights_io
from .augment import AugmentConfig, augment, rng_for_sample
from .imaging import to_model_input
from .metrics import compute_metrics, mean_bce
from .tensor import OptimizerState, Tensor, optimizer_step, sigmoid_bce


@dataclass
class TrainConfig:
    max_epochs: int = 100
    batch_size: int = 6
    early_stop_patience: int = 20
    lr_plateau_patience: int = 6
    lr_factor: float = 0.1
    restore_best: bool = True
    learning_rate: float = 1e-3
    seed: int = 0

    def validate(self):
        if self.early_stop_patience / self.lr_plateau_patience <= 2:
            raise ValueError("early_stop_patience must exceed 2x lr_plateau_patience")
        if not 0.0 < self.lr_factor < 1.0:
            raise ValueError("lr_factor must lie in (0, 1)")
        if self.max_epochs <= 0 or self.batch_size <= 0:
            raise ValueError("max_epochs and batch_size must be positive")


@dataclass
class FoldPlan:
    k: int
    seed: int
    folds: list                       # k disjoint lists of sample ids
    class_counts: list = field(default_factory=list)  # per fold: {label: count}


class SplitError(ValueError):
    pass


def _groups_by_parent(samples):
    """(parent_id, label, [sample ids]) groups; singletons for parentless samples."""
    groups = {}
    order = []
    for s in samples:
        key = s.parent_id if s.parent_id is not None else s.id
        if key not in groups:
            groups[key] = (s.label, [])
            order.append(key)
        groups[key][1].append(s.id)
    return [(k, groups[k][0], groups[k][1]) for k in order]


def split_train_test(samples, test_frac=0.10, seed=0):
    """Stratified parent-grouped split; returns (train ids, test ids)."""
    groups = _groups_by_parent(samples)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for label in (0, 1):
        cls = [g for g in groups if g[1] == label]
        if not cls:
            raise SplitError(f"class {label} absent from manifest")
        idx = rng.permutation(len(cls))
        n_test = max(1, int(round(test_frac * len(cls))))
        for rank, i in enumerate(idx):
            (test if rank < n_test else train).extend(cls[i][2])
    return train, test


def stratified_kfold(samples, k=5, seed=0) -> FoldPlan:
    """Parent-grouped stratified partition into k validation folds."""
    groups = _groups_by_parent(samples)
    folds = [[] for _ in range(k)]
    rng = np.random.default_rng(seed)
    for label in (0, 1):
        cls = [g for g in groups if g[1] == label]
        if len(cls) < k:
            raise SplitError(f"class {label} has {len(cls)} parent groups, fewer than k={k}")
        idx = rng.permutation(len(cls))
        for rank, i in enumerate(idx):
            folds[rank % k].extend(cls[i][2])
    by_id = {s.id: s for s in samples}
    counts = [{0: sum(1 for sid in f if by_id[sid].label == 0),
               1: sum(1 for sid in f if by_id[sid].label == 1)} for f in folds]
    return FoldPlan(k=k, seed=seed, folds=folds, class_counts=counts)


class TrainingController:
    """Callback automaton: reduce-LR-on-plateau plus early stopping.

    Feed validation losses epoch by epoch via ``update``; reads back
    ``learning_rate``, ``best_epoch``, and whether to stop. "Improvement"
    means strictly lower validation loss than the best seen.
    """

    def __init__(self, learning_rate, lr_patience=6, lr_factor=0.1,
                 stop_patience=20, max_epochs=100):
        self.learning_rate = learning_rate
        self.lr_patience = lr_patience
        self.lr_factor = lr_factor
        self.stop_patience = stop_patience
        self.max_epochs = max_epochs
        self.best_loss = np.inf
        self.best_epoch = None
        self.epoch = 0
        self._since_best = 0
        self._since_lr_event = 0
        self.lr_drop_epochs = []

    def update(self, val_loss):
        """Register one finished epoch; returns True when training must stop."""
        self.epoch += 1
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = self.epoch
            self._since_best = 0
            self._since_lr_event = 0
        else:
            self._since_best += 1
            self._since_lr_event += 1
            if self._since_lr_event >= self.lr_patience:
                self.learning_rate *= self.lr_factor
                self.lr_drop_epochs.append(self.epoch)
                self._since_lr_event = 0
        return self._since_best >= self.stop_patience or self.epoch >= self.max_epochs


class TrainingDiverged(RuntimeError):
    pass


def _batch_tensors(images, labels):
    x = Tensor(to_model_input(images))
    y = Tensor(np.asarray(labels, dtype=np.float32).reshape(-1, 1))
    return x, y


def evaluate_scores(graph, images, batch_size=32):
    """Infer-mode class-1 scores for a stack of uint8 tiles."""
    scores = []
    for i in range(0, len(images), batch_size):
        scores.append(graph.predict(Tensor(to_model_input(images[i:i + batch_size]))))
    return np.concatenate(scores)


def train_model(graph, train_data, val_data, config: TrainConfig,
                augment_config: AugmentConfig | None = None, log=None):
    """Train with shuffled mini-batches and the plateau/early-stop callbacks.

    ``train_data`` / ``val_data`` are (ids, images, labels) triples with
    uint8 tiles. Returns (best_weights, history); history rows are dicts of
    (epoch, train_loss, val_loss, lr). Augmentation applies to the training
    fold only.
    """
    config.validate()
    train_ids, train_images, train_labels = train_data
    _, val_images, val_labels = val_data
    if set(train_ids) & set(val_data[0]):
        raise SplitError("training and validation folds overlap")
    train_labels = np.asarray(train_labels)
    val_labels = np.asarray(val_labels)

    controller = TrainingController(config.learning_rate, config.lr_plateau_patience,
                                    config.lr_factor, config.early_stop_patience,
                                    config.max_epochs)
    params = graph.parameters()
    opt = OptimizerState(params, learning_rate=config.learning_rate)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(1,)))

    history = []
    best_weights = weights_io.graph_state(graph)
    n = len(train_ids)
    for epoch in range(1, config.max_epochs + 1):
        opt.learning_rate = controller.learning_rate
        order = shuffle_rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch_images = []
            for i in idx:
                img = train_images[i]
                if augment_config is not None:
                    rng = rng_for_sample(augment_config.seed, train_ids[i], epoch)
                    img, _ = augment(img, int(train_labels[i]), augment_config, rng)
                batch_images.append(img)
            x, y = _batch_tensors(batch_images, train_labels[idx])
            for p in params.values():
                p.zero_grad()
            logits = graph.forward(x, mode="train")
            _, loss = sigmoid_bce(logits, y)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            optimizer_step(opt)
            losses.append(loss_val)

        val_scores = evaluate_scores(graph, val_images)
        val_loss = mean_bce(val_scores, val_labels)
        if not np.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        stop = controller.update(val_loss)
        if controller.best_epoch == epoch:
            best_weights = weights_io.graph_state(graph)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)),
               "val_loss": val_loss, "lr": opt.learning_rate}
        history.append(row)
        if log is not None:
            log(row)
        if stop:
            break

    if config.restore_best:
        weights_io.load_state(graph, best_weights)
    return best_weights, {"epochs": history,
                          "best_epoch": controller.best_epoch,
                          "lr_drop_epochs": controller.lr_drop_epochs,
                          "stopped_epoch": controller.epoch}


def evaluate_model(graph, images, labels):
    """Infer-mode metric report over a test set of uint8 tiles."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty test set")
    scores = evaluate_scores(graph, images)
    return compute_metrics(scores, labels), scores


def aggregate_fold_reports(reports, epochs_per_fold):
    """Table-style aggregation over folds: min/mean rows per metric."""
    aucs = [r.auc for r in reports]
    return {
        "mean_epochs": float(np.mean(epochs_per_fold)),
        "min_auc": min(aucs) if all(a is not None for a in aucs) else None,
        "fn_at_95_mean": float(np.mean([r.fn_at_95 for r in reports])),
        "fn_at_95_max": max(r.fn_at_95 for r in reports),
        "fp_at_10_mean": float(np.mean([r.fp_at_10 for r in reports])),
        "fp_at_10_max": max(r.fp_at_10 for r in reports),
        "mean_precision_at_full_recall": float(np.mean([r.precision_at_full_recall for r in reports])),
        "min_accuracy": min(r.accuracy for r in reports),
        "mean_loss": float(np.mean([r.mean_bce for r in reports])),
    }
