"""CNN multi-speaker classifier with an "other" rejection class.

Layers: conv 3x3x32 -> maxpool 2x2 -> conv 3x3x64 -> maxpool 2x2 -> dense 1024
-> dropout 50% -> dense n_classes -> softmax. Convolutions use same padding
and stride 1; ReLU follows both convolutions and the first dense layer.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .engine import Adam, ShapeError, Tensor, grad, no_grad, ops
from .engine.nn import Conv2d, Dense, Module
from .rng import stream

log = logging.getLogger(__name__)

OTHER = "other"


class CnnModel(Module):
    """Parameters and label table of the recognizer.

    ``labels[i]`` is the speaker id of class ``i``; exactly one entry is
    ``"other"``. ``input_size``/``channels``/``hidden`` shrink the network for
    tests; the defaults are the full-size model.
    """

    def __init__(self, labels: Sequence[str], seed: int = 0, input_size: int = 64,
                 channels: tuple[int, int] = (32, 64), hidden: int = 1024, std: float = 0.05,
                 dropout: float = 0.5):
        labels = list(labels)
        if len(labels) < 2:
            raise ValueError(f"need at least 2 classes, got {len(labels)}")
        if labels.count(OTHER) != 1:
            raise ValueError(f"label table needs exactly one {OTHER!r} entry: {labels}")
        if input_size % 4:
            raise ValueError("input_size must be divisible by 4")
        rng = stream(seed, "cnn-init")
        self.labels = labels
        self.input_size = input_size
        self.channels = tuple(channels)
        self.hidden = hidden
        self.dropout = dropout
        self.conv1 = Conv2d(1, channels[0], 3, rng, pad=1, std=std, truncated=True)
        self.conv2 = Conv2d(channels[0], channels[1], 3, rng, pad=1, std=std, truncated=True)
        flat = (input_size // 4) ** 2 * channels[1]
        self.fc1 = Dense(flat, hidden, rng, std, truncated=True)
        self.fc2 = Dense(hidden, len(labels), rng, std, truncated=True)

    @property
    def n_classes(self) -> int:
        return len(self.labels)

    @property
    def other_index(self) -> int:
        return self.labels.index(OTHER)

    def _as_input(self, batch) -> Tensor:
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch))
        s = self.input_size
        if x.ndim == 3:
            x = x.reshape(x.shape[0], s, s, 1) if x.shape[1:] == (s, s) else x
        if x.shape[1:] != (s, s, 1):
            raise ShapeError(f"recognizer expects (N, {s}, {s}) patches, got {x.shape}")
        return x

    def features(self, batch) -> Tensor:
        """L5 activations (after ReLU, before dropout), shape (N, hidden)."""
        x = self._as_input(batch)
        n, s = x.shape[0], self.input_size
        c1, c2 = self.channels
        h = ops.maxpool2x2(ops.relu(self.conv1(x)))
        assert h.shape == (n, s // 2, s // 2, c1), h.shape
        h = ops.maxpool2x2(ops.relu(self.conv2(h)))
        assert h.shape == (n, s // 4, s // 4, c2), h.shape
        return ops.relu(self.fc1(h.reshape(n, (s // 4) ** 2 * c2)))

    def logits(self, batch, rng: Optional[np.random.Generator] = None) -> Tensor:
        h = self.features(batch)
        if self.training and self.dropout > 0:
            if rng is None:
                raise ValueError("train-mode forward needs a dropout rng")
            h = ops.dropout(h, self.dropout, rng)
        return self.fc2(h)

    def forward(self, batch, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Class probabilities, shape (N, n_classes)."""
        return ops.softmax(self.logits(batch, rng), axis=1)

    __call__ = forward


def build_cnn(labels_or_n: Sequence[str] | int, seed: int = 0, **kw) -> CnnModel:
    """Recognizer for ``n`` classes (``n-1`` speakers plus "other") or an explicit label table."""
    if isinstance(labels_or_n, int):
        if labels_or_n < 2:
            raise ValueError(f"need at least 2 classes, got {labels_or_n}")
        labels = [f"spk{i:02d}" for i in range(labels_or_n - 1)] + [OTHER]
    else:
        labels = list(labels_or_n)
    return CnnModel(labels, seed=seed, **kw)


def cross_entropy(logits: Tensor, y: np.ndarray) -> Tensor:
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(y)), y] = 1.0
    return -(ops.log_softmax(logits, axis=1) * Tensor(onehot, dtype=logits.dtype)).sum() * (1.0 / len(y))


@dataclass
class RecTrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    dropout: float = 0.5
    train_fraction: float = 0.8
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must be in (0, 1)")


@dataclass
class RecMetrics:
    """``train_loss[0]`` is the loss of the untrained model on the training split."""

    train_loss: list[float] = field(default_factory=list)
    test_accuracy: list[float] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.test_accuracy[-1]


def split_indices(labels: np.ndarray, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified split; every class gets at least one train and one test item."""
    rng = stream(seed, "split")
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < 2:
            raise ValueError(f"class {c} has {len(idx)} patch(es); need >= 2 to split")
        idx = rng.permutation(idx)
        k = min(max(1, int(round(train_fraction * len(idx)))), len(idx) - 1)
        train.append(idx[:k])
        test.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


class NonFiniteLoss(RuntimeError):
    pass


def _batched_loss(model: CnnModel, x: np.ndarray, y: np.ndarray, batch: int = 128) -> float:
    total = 0.0
    with no_grad():
        for i in range(0, len(x), batch):
            total += cross_entropy(model.logits(x[i:i + batch]), y[i:i + batch]).item() * len(x[i:i + batch])
    return total / len(x)


def train_recognizer(x: np.ndarray, y: np.ndarray, labels: Sequence[str], cfg: RecTrainConfig = RecTrainConfig(),
                     model: Optional[CnnModel] = None, **model_kw) -> tuple[CnnModel, RecMetrics]:
    """Fit the recognizer with Adam on a stratified split of ``(x, y)``.

    ``x`` holds (N, 64, 64) patches and ``y`` class indices into ``labels``.
    Training stops after ``cfg.epochs`` or when test accuracy has not improved
    for ``cfg.patience`` epochs.
    """
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    missing = set(range(len(labels))) - set(np.unique(y).tolist())
    if missing:
        raise ValueError(f"classes without data: {sorted(labels[i] for i in missing)}")
    tr, te = split_indices(y, cfg.train_fraction, cfg.seed)
    if model is None:
        model = build_cnn(labels, seed=cfg.seed, dropout=cfg.dropout, **model_kw)
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr, betas=cfg.betas)
    order_rng = stream(cfg.seed, "rec-order")
    drop_rng = stream(cfg.seed, "rec-dropout")

    metrics = RecMetrics()
    model.eval()
    metrics.train_loss.append(_batched_loss(model, x[tr], y[tr]))
    metrics.test_accuracy.append(evaluate(model, x[te], y[te]).accuracy)
    best, stale = metrics.test_accuracy[0], 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        perm = order_rng.permutation(tr)
        losses = []
        for i in range(0, len(perm), cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            loss = cross_entropy(model.logits(x[idx], drop_rng), y[idx])
            if not math.isfinite(loss.item()):
                raise NonFiniteLoss(f"epoch {epoch}, batch {i // cfg.batch_size}: loss {loss.item()}")
            opt.step(grad(loss, params))
            losses.append(loss.item() * len(idx))
        model.eval()
        metrics.train_loss.append(sum(losses) / len(perm))
        acc = evaluate(model, x[te], y[te]).accuracy
        metrics.test_accuracy.append(acc)
        log.info("epoch %d loss %.4f test accuracy %.4f", epoch, metrics.train_loss[-1], acc)
        if acc > best:
            best, stale = acc, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return model, metrics


def predict_proba(model: CnnModel, x: np.ndarray, batch: int = 128) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(x), batch):
            out.append(model.forward(np.asarray(x[i:i + batch], dtype=model.fc2.w.dtype)).data)
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, model.n_classes))


def deep_features(model: CnnModel, x: np.ndarray, batch: int = 128) -> np.ndarray:
    """L5 activations for a stack of patches, shape (N, hidden)."""
    out = []
    with no_grad():
        for i in range(0, len(x), batch):
            out.append(model.features(np.asarray(x[i:i + batch], dtype=model.fc1.w.dtype)).data)
    return np.concatenate(out) if out else np.zeros((0, model.hidden))


def deep_feature(model: CnnModel, patch) -> np.ndarray:
    values = getattr(patch, "values", patch)
    return deep_features(model, np.asarray(values)[None])[0]


@dataclass
class Evaluation:
    accuracy: float
    confusion: np.ndarray  # rows ground truth, columns prediction


def confusion_matrix(y_true, y_pred, n_rows: int, n_cols: Optional[int] = None) -> np.ndarray:
    m = np.zeros((n_rows, n_cols or n_rows), dtype=np.int64)
    np.add.at(m, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return m


def evaluate(model: CnnModel, x: np.ndarray, y: np.ndarray) -> Evaluation:
    if len(x) == 0:
        raise ValueError("evaluate needs at least one patch")
    pred = predict_proba(model, x).argmax(axis=1)
    cm = confusion_matrix(y, pred, model.n_classes)
    return Evaluation(float(np.trace(cm) / cm.sum()), cm)


def recognizer_from_state(state: dict, labels: Sequence[str]) -> CnnModel:
    """Rebuild a recognizer whose architecture is implied by checkpoint shapes."""
    c1 = state["conv1.w"].shape[3]
    c2 = state["conv2.w"].shape[3]
    flat, hidden = state["fc1.w"].shape
    size = 4 * int(round(math.sqrt(flat / c2)))
    if state["fc2.w"].shape[1] != len(labels):
        raise ValueError(f"checkpoint has {state['fc2.w'].shape[1]} classes, label table {len(labels)}")
    m = CnnModel(labels, input_size=size, channels=(c1, c2), hidden=hidden)
    m.load_state_dict(state)
    m.eval()
    return m
