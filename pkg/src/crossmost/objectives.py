"""Loss terms and the joint pseudo-label rule.

All functions take torch tensors; logits are raw classifier outputs, ``q``/``p``
arguments named as softmax are probability rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .config import ObjectiveConfig
from .errors import ConfigurationError, DomainError

IMAGE, PCL = 0, 1
LOG_GUARD = 1e-12
LOSS_KEYS = ("cls", "align", "fair", "mim", "mpm", "lg")


@dataclass
class PseudoBatch:
    labels: torch.Tensor  # (B,) long
    scores: torch.Tensor  # (B,)
    source: torch.Tensor  # (B,) long, IMAGE or PCL
    accepted: torch.Tensor  # (B,) bool


def _check_rows(q: torch.Tensor, name: str) -> None:
    if not torch.allclose(q.sum(dim=-1), torch.ones((), dtype=q.dtype), atol=1e-5):
        raise DomainError(f"{name} rows must sum to 1")


def joint_pseudo_labels(
    q_img: torch.Tensor,
    q_pcl: torch.Tensor,
    threshold: float,
    mode: str = "cross_modal",
    generator: torch.Generator | None = None,
) -> PseudoBatch:
    """Per sample, take the label of the more confident modality (ties go to the image).

    ``pseudo_image_only`` / ``pseudo_point_only`` always take one modality and
    ``pseudo_random`` picks one uniformly; in those modes the score is the
    chosen modality's confidence.
    """
    q_img, q_pcl = torch.as_tensor(q_img), torch.as_tensor(q_pcl)
    _check_rows(q_img, "q_img")
    _check_rows(q_pcl, "q_pcl")
    conf_img, lab_img = q_img.max(dim=-1)
    conf_pcl, lab_pcl = q_pcl.max(dim=-1)
    if mode in ("cross_modal", "unimodal_image", "unimodal_point"):
        pick_img = conf_img >= conf_pcl
        scores = torch.maximum(conf_img, conf_pcl)
    else:
        if mode == "pseudo_image_only":
            pick_img = torch.ones_like(conf_img, dtype=torch.bool)
        elif mode == "pseudo_point_only":
            pick_img = torch.zeros_like(conf_img, dtype=torch.bool)
        elif mode == "pseudo_random":
            pick_img = torch.rand(conf_img.shape, generator=generator) < 0.5
        else:
            raise ConfigurationError(f"unknown pseudo-label mode {mode!r}")
        scores = torch.where(pick_img, conf_img, conf_pcl)
    labels = torch.where(pick_img, lab_img, lab_pcl)
    source = torch.where(pick_img, IMAGE, PCL)
    return PseudoBatch(labels, scores, source, scores > threshold)


def loss_cls(pseudo: PseudoBatch, p_img: torch.Tensor, p_pcl: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of both branches against accepted joint labels, divided by the full batch."""
    ce = F.cross_entropy(p_img, pseudo.labels, reduction="none") + F.cross_entropy(p_pcl, pseudo.labels, reduction="none")
    return (ce * pseudo.accepted.to(ce.dtype)).sum() / p_img.shape[0]


def loss_unimodal(q: torch.Tensor, p: torch.Tensor, threshold: float) -> torch.Tensor:
    conf, labels = q.max(dim=-1)
    keep = (conf >= threshold).to(p.dtype)
    return (F.cross_entropy(p, labels, reduction="none") * keep).sum() / p.shape[0]


def loss_align(x: torch.Tensor, y: torch.Tensor, tau: float) -> torch.Tensor:
    """Symmetric InfoNCE over the BxB cosine-similarity matrix."""
    if tau <= 0:
        raise ConfigurationError("alignment temperature must be positive")
    sim = x @ y.t() / tau
    target = torch.arange(sim.shape[0], device=sim.device)
    return 0.5 * F.cross_entropy(sim, target) + 0.5 * F.cross_entropy(sim.t(), target)


def _fair_term(p: torch.Tensor) -> torch.Tensor:
    mean = p.mean(dim=0).clamp_min(LOG_GUARD)
    return -mean.log().mean()


def loss_fair(p_img: torch.Tensor | None, p_pcl: torch.Tensor | None) -> torch.Tensor:
    """Negative mean log of batch-averaged softmax, summed over the given branches."""
    terms = [_fair_term(p) for p in (p_img, p_pcl) if p is not None]
    return sum(terms)


def _l1(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.numel() == 0:  # nothing masked
        return pred.sum() * 0.0
    return (pred - target).abs().mean()


def loss_mim(z: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    return _l1(z, sigma)


def loss_mpm(w: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return _l1(w, y)


def _lg_term(glob: torch.Tensor, local: torch.Tensor, owner: torch.Tensor) -> torch.Tensor:
    return ((glob[owner] - local) ** 2).sum(dim=-1).mean()


def loss_lg_align(x, u, u_owner, y, v, v_owner) -> torch.Tensor:
    """Squared distance between each projected masked token and its sample's global embedding.

    ``u_owner``/``v_owner`` give the batch row of every local embedding. Either
    modality may be passed as ``None`` to drop its term.
    """
    terms = []
    if x is not None and u is not None and u.shape[0]:
        terms.append(_lg_term(x, u, u_owner))
    if y is not None and v is not None and v.shape[0]:
        terms.append(_lg_term(y, v, v_owner))
    if not terms:
        ref = x if x is not None else y
        return ref.sum() * 0.0
    return sum(terms)


def total_loss(components: dict[str, torch.Tensor], cfg: ObjectiveConfig) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum over enabled components plus a float breakdown for logging."""
    total = None
    breakdown = {}
    for key in LOSS_KEYS:
        value = components.get(key)
        if value is None:
            continue
        if not torch.is_tensor(value):
            value = torch.as_tensor(float(value))
        breakdown[f"l_{key}"] = float(value.detach())
        weight = getattr(cfg, f"lambda_{key}")
        if weight == 0:
            continue
        term = weight * value
        total = term if total is None else total + term
    if total is None:
        ref = next((v for v in components.values() if torch.is_tensor(v)), torch.zeros(()))
        total = ref.new_zeros(()) if torch.is_tensor(ref) else torch.zeros(())
    return total, breakdown
