"""Analysis instruments: attention-distance entropy, attention maps, pooled features, cluster metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .encoder import SwinEncoder3D, attention_modules
from .errors import ValidationError
from .semantic_attention import compute_satt
from .volume_data import Volume, save_volume

DISTANCE_METRIC = "attention-weighted mean Euclidean token-grid distance per query (within window)"


def _encoder(model: nn.Module) -> SwinEncoder3D:
    return model if isinstance(model, SwinEncoder3D) else model.encoder


def _batch_tensor(batch, enc: SwinEncoder3D) -> torch.Tensor:
    dtype = enc.embed.pos_embed.dtype
    if isinstance(batch, torch.Tensor):
        x = batch
    else:
        items = [fit_to_input(v, enc) for v in batch]
        x = torch.from_numpy(np.stack(items))
    if x.dim() == 3:
        x = x[None]
    if x.dim() == 4:
        x = x[:, None]
    return x.to(dtype)


def fit_to_input(v, enc: SwinEncoder3D) -> np.ndarray:
    """Center-crop a volume to the encoder input shape."""
    data = v.data if isinstance(v, Volume) else np.asarray(v, dtype=np.float32)
    want = enc.cfg.input_shape
    if any(n < w for n, w in zip(data.shape, want)):
        raise ValidationError(f"volume: shape {data.shape} is smaller than encoder input {want}")
    sl = tuple(slice((n - w) // 2, (n - w) // 2 + w) for n, w in zip(data.shape, want))
    return np.ascontiguousarray(data[sl], dtype=np.float32)


# --- attention-distance entropy ---------------------------------------------


def window_distances(window) -> np.ndarray:
    coords = np.stack(np.meshgrid(*[np.arange(w) for w in window], indexing="ij"), -1).reshape(-1, 3)
    return np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=-1)


def mean_query_distances(attn: np.ndarray, dist: np.ndarray) -> np.ndarray:
    """attn (..., heads, T, T) -> per-head pooled attention-weighted query distances, shape (heads, M)."""
    attn = np.asarray(attn, dtype=np.float64)
    heads = attn.shape[-3]
    d = (attn * dist).sum(axis=-1)
    return np.moveaxis(d, -2, 0).reshape(heads, -1)


def normalized_entropy(values: np.ndarray, d_max: float, bins: int) -> float:
    """Shannon entropy of the B-bin histogram over [0, d_max], divided by ln B."""
    if bins < 2:
        raise ValidationError(f"bins: must be >= 2, got {bins}")
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ValidationError("batch: no attention distances to histogram")
    if d_max <= 0:
        return 0.0
    counts, _ = np.histogram(np.clip(values, 0.0, d_max), bins=bins, range=(0.0, d_max))
    p = counts[counts > 0] / counts.sum()
    h = float(-(p * np.log(p)).sum())
    return max(0.0, h / math.log(bins))


@dataclass
class EntropyReport:
    entries: list[dict]
    bins: int
    metric: str = DISTANCE_METRIC

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def by_stage(self) -> dict[int, list[float]]:
        out: dict[int, list[float]] = {}
        for e in self.entries:
            out.setdefault(e["stage"], []).append(e["entropy"])
        return out


@torch.no_grad()
def attention_distance_entropy(model: nn.Module, batch, bins: int = 16) -> EntropyReport:
    if bins < 2:
        raise ValidationError(f"bins: must be >= 2, got {bins}")
    enc = _encoder(model)
    x = _batch_tensor(batch, enc)
    if x.shape[0] == 0:
        raise ValidationError("batch: empty")
    layers = attention_modules(enc)
    was_training = enc.training
    enc.eval()
    for _, _, m in layers:
        m.record = True
    try:
        enc(x)
        entries = []
        for stage, layer, m in layers:
            dist = window_distances(m.window)
            pooled = mean_query_distances(m.last_attn.double().cpu().numpy(), dist)
            for head in range(pooled.shape[0]):
                entries.append(
                    {
                        "stage": stage,
                        "layer": layer,
                        "head": head,
                        "entropy": normalized_entropy(pooled[head], float(dist.max()), bins),
                    }
                )
    finally:
        for _, _, m in layers:
            m.record = False
            m.last_attn = None
        enc.train(was_training)
    return EntropyReport(entries, bins)


# --- attention maps and features ---------------------------------------------


@dataclass
class AttentionMap:
    values: np.ndarray
    grid_shape: tuple[int, int, int]
    source: str = "pretrained"
    raw: np.ndarray | None = field(default=None, repr=False)

    def save(self, path) -> None:
        save_volume(self.values.astype(np.float32), path)


def minmax_normalize(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    if hi <= lo:
        return np.zeros_like(a, dtype=np.float32)
    return ((a - lo) / (hi - lo)).astype(np.float32)


@torch.no_grad()
def extract_attention_map(model: nn.Module, volume, source: str = "pretrained") -> AttentionMap:
    enc = _encoder(model)
    if enc.sa is None:
        raise ValidationError("model: no semantic attention module to read attention from", field="encoder.sa_stage")
    was_training = enc.training
    enc.eval()
    try:
        out = enc(_batch_tensor([volume], enc))
    finally:
        enc.train(was_training)
    grid = enc.cfg.stage_grid(enc.tap_stage)
    satt = compute_satt(out.cls_attention[0]).double().cpu().numpy().reshape(grid)
    return AttentionMap(minmax_normalize(satt), grid, source, raw=satt)


@torch.no_grad()
def extract_features(model: nn.Module, volumes) -> np.ndarray:
    """Pooled stage-4 embedding(s); a single volume gives a 1-D vector."""
    enc = _encoder(model)
    single = isinstance(volumes, (Volume, np.ndarray)) and np.ndim(getattr(volumes, "data", volumes)) == 3
    vols = [volumes] if single else list(volumes)
    was_training = enc.training
    enc.eval()
    try:
        feats = [enc(_batch_tensor([v], enc)).pooled[0].double().cpu().numpy() for v in vols]
    finally:
        enc.train(was_training)
    return feats[0] if single else np.stack(feats)


# --- clustering --------------------------------------------------------------


@dataclass
class ClusterReport:
    intra_mean: float
    intra_sd: float
    inter_mean: float
    inter_sd: float
    n_classes: int
    dim: int

    @property
    def ratio(self) -> float:
        return self.inter_mean / self.intra_mean if self.intra_mean > 0 else math.inf

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inter_intra_ratio"] = self.ratio if math.isfinite(self.ratio) else None
        return d


def cluster_metrics(features: Sequence, labels: Sequence[int]) -> ClusterReport:
    """Population-convention intra (sample to own centroid) and inter (centroid pairs) distances."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValidationError(f"features: expected (n, d) matching {y.shape[0]} labels, got {X.shape}")
    classes = np.unique(y)
    if classes.size < 2:
        raise ValidationError("labels: need at least two classes")
    centroids = np.stack([X[y == c].mean(axis=0) for c in classes])
    own = centroids[np.searchsorted(classes, y)]
    intra = np.linalg.norm(X - own, axis=1)
    i, j = np.triu_indices(classes.size, k=1)
    inter = np.linalg.norm(centroids[i] - centroids[j], axis=1)
    return ClusterReport(
        float(intra.mean()), float(intra.std()), float(inter.mean()), float(inter.std()), int(classes.size), X.shape[1]
    )
