"""Downstream evaluation: stratified few-shot splits, linear probing and fine-tuning."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diagnostics import _encoder, extract_features, fit_to_input
from .errors import ValidationError
from .volume_data import seeded_rng


@dataclass
class ProbeResult:
    mode: str
    auc: float | None
    accuracy: float
    n_train: int
    n_test: int
    seed: int
    per_class: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def rank_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC with midranks for ties; labels must contain both 0 and 1."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    n_pos, n_neg = int((y == 1).sum()), int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("labels: AUC is undefined for a single-class label set")
    order = np.argsort(s, kind="stable")
    ranks = np.empty(s.size)
    sorted_s = s[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def stratified_split(labels: Sequence[int], test_frac: float = 0.3, train_frac: float = 1.0, seed: int = 0):
    """Per-class split into (train, test) indices; the train part keeps floor(train_frac * n_c) per class."""
    y = np.asarray(labels)
    if not 0 < test_frac < 1:
        raise ValidationError(f"test_frac: must be in (0, 1), got {test_frac}")
    if not 0 < train_frac <= 1:
        raise ValidationError(f"train_frac: must be in (0, 1], got {train_frac}")
    rng = seeded_rng(seed, 0x5B)
    train, test = [], []
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        n_test = max(1, int(round(test_frac * idx.size)))
        pool = idx[n_test:]
        test.extend(idx[:n_test].tolist())
        train.extend(pool[: int(np.floor(train_frac * pool.size + 1e-9))].tolist())
    return np.array(sorted(train), dtype=int), np.array(sorted(test), dtype=int)


def _check_labels(y) -> np.ndarray:
    y = np.asarray(y).astype(int)
    if np.unique(y).size < 2:
        raise ValidationError("labels: AUC is undefined for a single-class label set")
    return y


def _score(mode, probs, y_test, seed, n_train) -> ProbeResult:
    pred = probs.argmax(axis=1)
    acc = float((pred == y_test).mean())
    classes = np.unique(y_test)
    per_class = {int(c): float((pred[y_test == c] == c).mean()) for c in classes}
    auc = rank_auc(probs[:, 1], y_test) if probs.shape[1] == 2 and classes.size == 2 else None
    return ProbeResult(mode, auc, acc, n_train, int(y_test.size), seed, per_class)


def train_linear_head(
    X: np.ndarray, y: np.ndarray, n_classes: int, epochs: int = 300, lr: float = 0.05, weight_decay: float = 1e-3, seed: int = 0
) -> tuple[nn.Linear, np.ndarray, np.ndarray]:
    """Full-batch AdamW on standardized features; returns (head, mean, std)."""
    mu = X.mean(axis=0)
    sd = X.std(axis=0) + 1e-6
    Xt = torch.from_numpy((X - mu) / sd).float()
    yt = torch.from_numpy(y).long()
    gen = torch.Generator().manual_seed(seed)
    head = nn.Linear(X.shape[1], n_classes)
    with torch.no_grad():
        head.weight.normal_(0, 0.01, generator=gen)
        head.bias.zero_()
    opt = torch.optim.AdamW(head.parameters(), lr=lr, weight_decay=weight_decay)
    for _ in range(epochs):
        opt.zero_grad()
        F.cross_entropy(head(Xt), yt).backward()
        opt.step()
    return head, mu, sd


def linear_probe(
    model: nn.Module,
    volumes: Sequence,
    labels: Sequence[int],
    train_idx=None,
    test_idx=None,
    epochs: int = 300,
    seed: int = 0,
    features: np.ndarray | None = None,
) -> ProbeResult:
    """Frozen encoder, one linear head on the pooled stage-4 feature."""
    y = _check_labels(labels)
    if train_idx is None or test_idx is None:
        train_idx, test_idx = stratified_split(y, seed=seed)
    X = extract_features(model, volumes) if features is None else np.asarray(features, dtype=np.float64)
    n_classes = int(y.max()) + 1
    head, mu, sd = train_linear_head(X[train_idx], y[train_idx], n_classes, epochs, seed=seed)
    with torch.no_grad():
        probs = F.softmax(head(torch.from_numpy((X[test_idx] - mu) / sd).float()), dim=1).numpy()
    return _score("LP", probs, y[test_idx], seed, int(len(train_idx)))


class _Classifier(nn.Module):
    def __init__(self, encoder: nn.Module, n_classes: int):
        super().__init__()
        self.encoder = encoder
        self.norm = nn.LayerNorm(encoder.cfg.out_width)
        self.head = nn.Linear(encoder.cfg.out_width, n_classes)

    def forward(self, x):
        return self.head(self.norm(self.encoder(x).pooled))


def fine_tune(
    model: nn.Module,
    volumes: Sequence,
    labels: Sequence[int],
    train_idx=None,
    test_idx=None,
    epochs: int = 10,
    seed: int = 0,
    lr: float = 2e-4,
    batch_size: int = 8,
) -> ProbeResult:
    """Train every encoder layer plus a linear head; the input model is left untouched."""
    y = _check_labels(labels)
    if train_idx is None or test_idx is None:
        train_idx, test_idx = stratified_split(y, seed=seed)
    enc = copy.deepcopy(_encoder(model))
    for p in enc.parameters():
        p.requires_grad_(True)
    torch.manual_seed(seed)
    clf = _Classifier(enc, int(y.max()) + 1)
    data = torch.from_numpy(np.stack([fit_to_input(v, enc) for v in volumes]))[:, None]
    opt = torch.optim.AdamW(clf.parameters(), lr=lr, weight_decay=0.05)
    rng = seeded_rng(seed, 0xF7)
    yt = torch.from_numpy(y).long()
    clf.train()
    for _ in range(epochs):
        order = rng.permutation(train_idx)
        for i in range(0, order.size, batch_size):
            b = order[i:i + batch_size]
            opt.zero_grad()
            F.cross_entropy(clf(data[b]), yt[b]).backward()
            opt.step()
    clf.eval()
    with torch.no_grad():
        probs = torch.cat([F.softmax(clf(data[test_idx[i:i + 16]]), 1) for i in range(0, len(test_idx), 16)]).numpy()
    return _score("FT", probs, y[test_idx], seed, int(len(train_idx)))
