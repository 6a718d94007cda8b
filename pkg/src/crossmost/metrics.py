"""Evaluation: per-branch accuracy, multi-view accuracy, sharpness/bias diagnostics."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .objectives import IMAGE, PseudoBatch
from .synthdata import Sample
from .tokenizer import patchify_image, tokenize_points


def prediction_entropy(p: np.ndarray) -> float:
    """Mean KL divergence of each prediction row from uniform; larger is sharper."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    c = p.shape[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(c * p), 0.0)
    return float(terms.sum(axis=1).mean())


def prediction_bias(predictions: np.ndarray, n_classes: int) -> float:
    """KL divergence of the predicted-label histogram from uniform."""
    counts = np.bincount(np.asarray(predictions, dtype=np.int64), minlength=n_classes)
    j = counts / counts.sum()
    nz = j > 0
    return float((j[nz] * np.log(n_classes * j[nz])).sum())


@dataclass
class PseudoStats:
    """Running counts over an epoch's stream of pseudo-label batches."""

    n: int = 0
    accepted: int = 0
    accepted_img: int = 0
    agree: int = 0

    def update(self, pseudo: PseudoBatch, q_img: torch.Tensor, q_pcl: torch.Tensor) -> None:
        acc = pseudo.accepted
        self.n += int(acc.numel())
        self.accepted += int(acc.sum())
        self.accepted_img += int((acc & (pseudo.source == IMAGE)).sum())
        self.agree += int((q_img.argmax(-1) == q_pcl.argmax(-1)).sum())

    def summary(self) -> dict[str, float]:
        if self.n == 0:
            return {"source_img_frac": 0.0, "agreement": 0.0, "accepted_frac": 0.0}
        return {
            # fraction among accepted labels; 0 when nothing passed the threshold
            "source_img_frac": self.accepted_img / self.accepted if self.accepted else 0.0,
            "agreement": self.agree / self.n,
            "accepted_frac": self.accepted / self.n,
        }


def pseudolabel_stats(batches) -> dict[str, float]:
    """``batches`` yields (PseudoBatch, q_img, q_pcl) triples."""
    stats = PseudoStats()
    for pseudo, q_img, q_pcl in batches:
        stats.update(pseudo, q_img, q_pcl)
    return stats.summary()


@dataclass
class MetricRecord:
    epoch: int
    acc_image: float
    acc_image_star: float
    acc_pcl: float
    pred_entropy_img: float
    pred_entropy_pcl: float
    pred_bias_img: float
    pred_bias_pcl: float
    source_img_frac: float = 0.0
    agreement: float = 0.0
    accepted_frac: float = 0.0
    losses: dict[str, float] = field(default_factory=dict)
    student: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


class SplitTokens:
    """Clean (unaugmented) tokens of a split, computed once and reused every epoch."""

    def __init__(self, samples: list[Sample], n_groups: int, group_size: int, patch_size: int):
        self.samples = samples
        self.labels = np.array([s.label for s in samples])
        self.sample_ids = np.array([s.sample_id for s in samples])
        pts = np.stack([s.pcl.points for s in samples])
        tok = tokenize_points(pts, n_groups, group_size)
        self.groups = torch.from_numpy(tok.groups)
        self.centers = torch.from_numpy(tok.centers)
        views = np.stack([s.view_stack() for s in samples])  # (S, V, P, P)
        self.n_views = views.shape[1]
        self.patches = torch.from_numpy(patchify_image(views, patch_size).astype(np.float32))  # (S, V, K, D)


@torch.no_grad()
def embed_split(model, tokens: SplitTokens, batch_size: int = 256) -> tuple[torch.Tensor, torch.Tensor]:
    """Image embeddings (S, V, d) for every view and point embeddings (S, d)."""
    model.eval()
    dtype = next(model.parameters()).dtype
    s, v = tokens.patches.shape[:2]
    flat = tokens.patches.reshape(s * v, *tokens.patches.shape[2:]).to(dtype)
    img = torch.cat([model.encode_image(flat[i : i + batch_size]).embed for i in range(0, s * v, batch_size)])
    pcl = torch.cat(
        [
            model.encode_points(tokens.groups[i : i + batch_size].to(dtype), tokens.centers[i : i + batch_size].to(dtype)).embed
            for i in range(0, s, batch_size)
        ]
    )
    return img.reshape(s, v, -1), pcl


@torch.no_grad()
def accuracy_branches(model, tokens: SplitTokens) -> dict[str, float]:
    """Accuracy (image view 0, image multi-view mean, point cloud) plus entropy/bias per branch."""
    img, pcl = embed_split(model, tokens)
    star = torch.nn.functional.normalize(img.mean(dim=1), dim=-1)
    logits_img = model.classify(img[:, 0])
    logits_star = model.classify(star)
    logits_pcl = model.classify(pcl)
    labels = torch.from_numpy(tokens.labels)
    c = logits_img.shape[1]
    pred_img, pred_pcl = logits_img.argmax(-1), logits_pcl.argmax(-1)
    return {
        "acc_image": float((pred_img == labels).double().mean()),
        "acc_image_star": float((logits_star.argmax(-1) == labels).double().mean()),
        "acc_pcl": float((pred_pcl == labels).double().mean()),
        "pred_entropy_img": prediction_entropy(logits_img.double().softmax(-1).numpy()),
        "pred_entropy_pcl": prediction_entropy(logits_pcl.double().softmax(-1).numpy()),
        "pred_bias_img": prediction_bias(pred_img.numpy(), c),
        "pred_bias_pcl": prediction_bias(pred_pcl.numpy(), c),
    }


EMBEDDING_HEADER = ["sample_id", "modality", "label", "prediction"]


@torch.no_grad()
def dump_embeddings(model, tokens: SplitTokens, path: str | Path) -> int:
    """One CSV row per (sample, modality); image rows use view 0. Returns the row count."""
    img, pcl = embed_split(model, tokens)
    rows = 0
    d = pcl.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EMBEDDING_HEADER + [f"e{i}" for i in range(d)])
        for modality, emb in (("image", img[:, 0]), ("pcl", pcl)):
            preds = model.classify(emb).argmax(-1).numpy()
            for sid, label, pred, vec in zip(tokens.sample_ids, tokens.labels, preds, emb.numpy()):
                writer.writerow([int(sid), modality, int(label), int(pred)] + [repr(float(x)) for x in vec])
                rows += 1
    return rows


def is_finite_record(record: dict) -> bool:
    vals = [v for v in record.values() if isinstance(v, float)]
    return all(math.isfinite(v) for v in vals)
