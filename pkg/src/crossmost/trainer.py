"""Two-stage training: contrastive pretrain-align, then EMA teacher-student self-training."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import objectives as obj
from .checkpoint import save_pair
from .config import RunConfig, config_hash
from .errors import ConfigurationError, DivergenceError
from .metrics import MetricRecord, PseudoStats, SplitTokens, accuracy_branches, embed_split
from .model import CrossModalModel, prototypes_from_embeddings
from .synthdata import (
    DatasetSplit,
    Sample,
    augment_img_strong,
    augment_img_weak,
    augment_pcl_strong,
    augment_pcl_weak,
    sample_rng,
)
from .tokenizer import (
    index_sets_to_mask,
    mask_image_patches,
    mask_point_blocks,
    patchify_image,
    tokenize_points,
)

log = logging.getLogger(__name__)

NO_DECAY = ("cls_token", "msk_token", "pos_embed", "cls_pos")


# ---------------------------------------------------------------------------
# optimization


def param_groups(model: CrossModalModel, weight_decay: float, layer_decay: float) -> list[dict]:
    """One group per (layer, decay) pair; ``lr_scale`` = layer_decay ** (depth - layer)."""
    groups: dict[tuple[int, bool], dict] = {}
    for name, p in model.named_parameters():
        layer = model.layer_id(name)
        decay = p.ndim >= 2 and not name.endswith(NO_DECAY)
        key = (layer, decay)
        if key not in groups:
            groups[key] = {
                "params": [],
                "names": [],
                "layer": layer,
                "lr_scale": layer_decay ** (model.depth - layer),
                "weight_decay": weight_decay if decay else 0.0,
            }
        groups[key]["params"].append(p)
        groups[key]["names"].append(name)
    return [groups[k] for k in sorted(groups)]


def make_optimizer(model: CrossModalModel, lr: float, weight_decay: float, layer_decay: float) -> torch.optim.AdamW:
    groups = param_groups(model, weight_decay, layer_decay)
    for g in groups:
        g["lr"] = lr * g["lr_scale"]
    return torch.optim.AdamW(groups, lr=lr, betas=(0.9, 0.999), eps=1e-8, foreach=False)


def effective_lr(base_lr: float, batch_size: int) -> float:
    return base_lr * batch_size / 256


def cosine_lr(step: int, total: int, peak: float, warmup: int) -> float:
    if total <= 0:
        return peak
    if step < warmup:
        return peak * (step + 1) / warmup
    progress = (step - warmup) / max(1, total - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for g in optimizer.param_groups:
        g["lr"] = lr * g.get("lr_scale", 1.0)


@torch.no_grad()
def ema_update(teacher: torch.nn.Module, student: torch.nn.Module, momentum: float) -> None:
    """teacher <- momentum * teacher + (1 - momentum) * student, for every parameter."""
    if not 0.0 <= momentum <= 1.0:
        raise ConfigurationError(f"EMA momentum must be in [0,1], got {momentum}")
    for t, s in zip(teacher.parameters(), student.parameters()):
        if t.shape != s.shape:
            raise ConfigurationError("teacher and student shapes differ")
        t.mul_(momentum).add_(s.detach(), alpha=1.0 - momentum)


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    """Tensors for one self-training step. ``weak_*`` feed the teacher, the rest the student."""

    weak_patches: torch.Tensor
    weak_groups: torch.Tensor
    weak_centers: torch.Tensor
    patches: torch.Tensor
    groups: torch.Tensor
    centers: torch.Tensor
    img_mask: torch.Tensor
    pcl_mask: torch.Tensor
    sample_ids: list[int] = field(default_factory=list)
    labels: torch.Tensor | None = None  # evaluation only, never used by the losses

    def to(self, dtype: torch.dtype) -> "Batch":
        conv = {k: (v.to(dtype) if torch.is_tensor(v) and v.is_floating_point() else v) for k, v in self.__dict__.items()}
        return Batch(**conv)


def prepare_batch(samples: list[Sample], cfg: RunConfig, epoch: int) -> Batch:
    """Augment, tokenize and mask a batch; every random draw comes from the sample's own stream."""
    aug, tk = cfg.aug, cfg.tokenizer
    weak_img, strong_img, weak_pts, strong_pts, rngs = [], [], [], [], []
    for s in samples:
        rng = sample_rng(cfg.seed, s.sample_id, "train", epoch)
        view = s.views[int(rng.integers(len(s.views)))].pixels
        weak_img.append(augment_img_weak(view, rng, aug))
        strong_img.append(augment_img_strong(view, rng, aug))
        weak_pts.append(augment_pcl_weak(s.pcl, rng, aug).points)
        strong_pts.append(augment_pcl_strong(s.pcl, rng, aug).points)
        rngs.append(rng)
    weak_tok = tokenize_points(np.stack(weak_pts), tk.n_groups, tk.group_size)
    strong_tok = tokenize_points(np.stack(strong_pts), tk.n_groups, tk.group_size)
    strong_patches = patchify_image(np.stack(strong_img), tk.patch_size)
    k_img = strong_patches.shape[1]
    img_sets = [mask_image_patches(k_img, rng, tk.img_mask_ratio) for rng in rngs]
    pcl_sets = [mask_point_blocks(c, rng, tk.pcl_mask_ratio) for c, rng in zip(strong_tok.centers, rngs)]
    return Batch(
        weak_patches=torch.from_numpy(patchify_image(np.stack(weak_img), tk.patch_size).astype(np.float32)),
        weak_groups=torch.from_numpy(weak_tok.groups),
        weak_centers=torch.from_numpy(weak_tok.centers),
        patches=torch.from_numpy(strong_patches.astype(np.float32)),
        groups=torch.from_numpy(strong_tok.groups),
        centers=torch.from_numpy(strong_tok.centers),
        img_mask=torch.from_numpy(index_sets_to_mask(img_sets, k_img)),
        pcl_mask=torch.from_numpy(index_sets_to_mask(pcl_sets, tk.n_groups)),
        sample_ids=[s.sample_id for s in samples],
        labels=torch.tensor([s.label for s in samples]),
    )


def epoch_order(n: int, seed: int, epoch: int, tag: str = "shuffle") -> np.ndarray:
    return sample_rng(seed, 0, tag, epoch).permutation(n)


# ---------------------------------------------------------------------------
# stage 1: pretrain-align


def build_model(cfg: RunConfig) -> CrossModalModel:
    torch.manual_seed(cfg.seed)
    return CrossModalModel.from_config(cfg)


def _pretrain_batch(samples: list[Sample], cfg: RunConfig, epoch: int):
    tk = cfg.tokenizer
    imgs, pts, rngs = [], [], []
    for s in samples:
        rng = sample_rng(cfg.seed, s.sample_id, "pretrain", epoch)
        view = s.views[int(rng.integers(len(s.views)))].pixels
        if rng.uniform() < cfg.trainer.pretrain_strong_frac:
            imgs.append(augment_img_strong(view, rng, cfg.aug))
            pts.append(augment_pcl_strong(s.pcl, rng, cfg.aug).points)
        else:
            imgs.append(augment_img_weak(view, rng, cfg.aug))
            pts.append(augment_pcl_weak(s.pcl, rng, cfg.aug).points)
        rngs.append(rng)
    tok = tokenize_points(np.stack(pts), tk.n_groups, tk.group_size)
    patches = patchify_image(np.stack(imgs), tk.patch_size).astype(np.float32)
    img_mask = pcl_mask = None
    if cfg.trainer.pretrain_mask_frac > 0:
        # mask a random subset of the batch the same way the student will be masked later;
        # separate coins per modality, otherwise "both masked" becomes a pairing shortcut
        k_img = patches.shape[1]
        frac = cfg.trainer.pretrain_mask_frac
        on = [(rng.uniform() < frac, rng.uniform() < frac) for rng in rngs]
        empty = np.array([], dtype=np.int64)
        img_sets = [mask_image_patches(k_img, rng, tk.img_mask_ratio) if m[0] else empty for m, rng in zip(on, rngs)]
        pcl_sets = [mask_point_blocks(c, rng, tk.pcl_mask_ratio) if m[1] else empty for m, c, rng in zip(on, tok.centers, rngs)]
        img_mask = torch.from_numpy(index_sets_to_mask(img_sets, k_img))
        pcl_mask = torch.from_numpy(index_sets_to_mask(pcl_sets, tk.n_groups))
    return torch.from_numpy(patches), torch.from_numpy(tok.groups), torch.from_numpy(tok.centers), img_mask, pcl_mask


def pretrain_align(samples: list[Sample], cfg: RunConfig, model: CrossModalModel | None = None) -> tuple[CrossModalModel, list[float]]:
    """Train both encoders with the symmetric alignment loss only. Returns (model, per-epoch mean loss)."""
    if not samples:
        raise ConfigurationError("pretrain split is empty")
    tr = cfg.trainer
    model = model if model is not None else build_model(cfg)
    history: list[float] = []
    if tr.pretrain_epochs == 0:
        return model, history
    bs = tr.pretrain_batch_size
    steps_per_epoch = len(samples) // bs
    if steps_per_epoch == 0:
        raise ConfigurationError("pretrain split is smaller than one batch")
    total = steps_per_epoch * tr.pretrain_epochs
    opt = make_optimizer(model, tr.pretrain_lr, tr.weight_decay, 1.0)
    step = 0
    model.train()
    for epoch in range(tr.pretrain_epochs):
        if tr.pretrain_freeze_image_after >= 0 and epoch >= tr.pretrain_freeze_image_after:
            model.image.requires_grad_(False)
        order = epoch_order(len(samples), cfg.seed, epoch, "pretrain")
        losses = []
        for i in range(steps_per_epoch):
            chunk = [samples[j] for j in order[i * bs : (i + 1) * bs]]
            patches, groups, centers, img_mask, pcl_mask = _pretrain_batch(chunk, cfg, epoch)
            set_lr(opt, cosine_lr(step, total, tr.pretrain_lr, int(tr.warmup_frac * total)))
            x = model.encode_image(patches, img_mask).embed
            y = model.encode_points(groups, centers, pcl_mask).embed
            loss = obj.loss_align(x, y, cfg.objective.tau)
            if not torch.isfinite(loss):
                raise DivergenceError(f"pretrain loss became {float(loss)} at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
            step += 1
        history.append(float(np.mean(losses)))
        log.info("pretrain epoch %d loss %.4f", epoch, history[-1])
    model.image.requires_grad_(True)
    return model, history


def init_classifier_from_prototypes(model: CrossModalModel, exemplars: list[Sample], cfg: RunConfig) -> torch.Tensor:
    """Set the classifier to per-class prototypes averaged over both modalities of clean exemplars."""
    tk = cfg.tokenizer
    tokens = SplitTokens(exemplars, tk.n_groups, tk.group_size, tk.patch_size)
    img, pcl = embed_split(model, tokens)
    labels = np.concatenate([tokens.labels, tokens.labels])
    proto = prototypes_from_embeddings(torch.cat([img.mean(dim=1), pcl]), labels, cfg.data.n_classes)
    model.set_classifier(proto.to(model.classifier.dtype))
    return proto


# data fields that only shape the downstream splits, never the initialization
_DOWNSTREAM_DATA = ("views", "train_per_class", "test_per_class", "shift_occlusion", "shift_noise_std")


def init_fingerprint(cfg: RunConfig) -> str:
    """Hash of the config fields the pretrained, prototype-initialized model depends on."""
    d = cfg.to_dict()
    tr = d["trainer"]
    relevant = {
        "seed": d["seed"],
        "data": {k: v for k, v in d["data"].items() if k not in _DOWNSTREAM_DATA},
        "aug": d["aug"],
        "tokenizer": d["tokenizer"],
        # the logit scale only enters through classify, which pretraining never calls
        "model": {k: v for k, v in d["model"].items() if k != "logit_scale"},
        "tau": d["objective"]["tau"],
        "trainer": {k: v for k, v in tr.items() if k.startswith("pretrain") or k in ("weight_decay", "warmup_frac")},
    }
    return config_hash(relevant)


def build_initial_model(ds: DatasetSplit, cfg: RunConfig) -> tuple[CrossModalModel, list[float]]:
    model, history = pretrain_align(ds.pretrain, cfg)
    init_classifier_from_prototypes(model, ds.exemplars, cfg)
    return model, history


# ---------------------------------------------------------------------------
# stage 2: self-training


@dataclass
class TrainState:
    student: CrossModalModel
    teacher: CrossModalModel
    optimizer: torch.optim.Optimizer
    step: int = 0
    total_steps: int = 0

    @classmethod
    def from_model(cls, model: CrossModalModel, cfg: RunConfig, total_steps: int = 0) -> "TrainState":
        tr = cfg.trainer
        student = model
        student.requires_grad_(True)
        teacher = student.clone()
        opt = make_optimizer(student, effective_lr(tr.base_lr, tr.batch_size), tr.weight_decay, tr.layer_decay)
        return cls(student, teacher, opt, 0, total_steps)


@torch.no_grad()
def teacher_predictions(teacher: CrossModalModel, batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
    teacher.eval()
    q_img = teacher.classify(teacher.encode_image(batch.weak_patches).embed).softmax(-1)
    q_pcl = teacher.classify(teacher.encode_points(batch.weak_groups, batch.weak_centers).embed).softmax(-1)
    return q_img, q_pcl


def student_losses(student: CrossModalModel, batch: Batch, q_img, q_pcl, cfg: RunConfig, step: int = 0):
    """Student forward on the strong, masked pair and every loss component.

    Returns (components, pseudo) where ``pseudo`` is the PseudoBatch that gated
    the classification loss.
    """
    o = cfg.objective
    use_img = o.mode != "unimodal_point"
    use_pcl = o.mode != "unimodal_image"
    comps: dict[str, torch.Tensor] = {}
    xo = student.encode_image(batch.patches, batch.img_mask) if use_img else None
    yo = student.encode_points(batch.groups, batch.centers, batch.pcl_mask) if use_pcl else None
    p_img = student.classify(xo.embed) if use_img else None
    p_pcl = student.classify(yo.embed) if use_pcl else None

    if o.mode == "unimodal_image":
        conf, lab = q_img.max(-1)
        pseudo = obj.PseudoBatch(lab, conf, torch.full_like(lab, obj.IMAGE), conf >= o.threshold)
        comps["cls"] = obj.loss_unimodal(q_img, p_img, o.threshold)
    elif o.mode == "unimodal_point":
        conf, lab = q_pcl.max(-1)
        pseudo = obj.PseudoBatch(lab, conf, torch.full_like(lab, obj.PCL), conf >= o.threshold)
        comps["cls"] = obj.loss_unimodal(q_pcl, p_pcl, o.threshold)
    else:
        gen = torch.Generator().manual_seed(int(sample_rng(cfg.seed, step, "mask").integers(2**62)))
        pseudo = obj.joint_pseudo_labels(q_img, q_pcl, o.threshold, o.mode, generator=gen)
        comps["cls"] = obj.loss_cls(pseudo, p_img, p_pcl)
        comps["align"] = obj.loss_align(xo.embed, yo.embed, o.tau)

    comps["fair"] = obj.loss_fair(p_img.softmax(-1) if use_img else None, p_pcl.softmax(-1) if use_pcl else None)
    u = v = u_owner = v_owner = None
    if use_img:
        # reconstruction targets live in the branch's standardized input space
        target = student.image.standardize(batch.patches)[batch.img_mask]
        comps["mim"] = obj.loss_mim(student.image.decode(xo.msk_out), target)
        u, u_owner = student.image.project(xo.msk_out), xo.msk_owner
    if use_pcl:
        target = student.point.standardize(batch.groups, batch.centers)[0][batch.pcl_mask].flatten(1)
        comps["mpm"] = obj.loss_mpm(student.point.decode(yo.msk_out), target)
        v, v_owner = student.point.project(yo.msk_out), yo.msk_owner
    comps["lg"] = obj.loss_lg_align(
        xo.embed if use_img else None, u, u_owner, yo.embed if use_pcl else None, v, v_owner
    )
    return comps, pseudo


def selftrain_step(state: TrainState, batch: Batch, cfg: RunConfig, stats: PseudoStats | None = None) -> dict:
    """One update: teacher pseudo-labels, student losses, optimizer step, EMA. Returns a log record."""
    tr = cfg.trainer
    # (a) teacher on the weak view, no masks
    q_img, q_pcl = teacher_predictions(state.teacher, batch)
    # (b)-(d) pseudo-labels and student losses on the strong, masked view
    state.student.train()
    comps, pseudo = student_losses(state.student, batch, q_img, q_pcl, cfg, state.step)
    loss, breakdown = obj.total_loss(comps, cfg.objective)
    if not torch.isfinite(loss):
        raise DivergenceError(f"self-training loss became {float(loss)} at step {state.step}")
    # (e) student update
    peak = effective_lr(tr.base_lr, tr.batch_size)
    lr = cosine_lr(state.step, state.total_steps, peak, int(tr.warmup_frac * state.total_steps))
    set_lr(state.optimizer, lr)
    state.optimizer.zero_grad(set_to_none=True)
    if loss.requires_grad:
        loss.backward()
    state.optimizer.step()
    # (f) teacher follows the student
    ema_update(state.teacher, state.student, tr.ema_momentum)
    if stats is not None:
        stats.update(pseudo, q_img, q_pcl)
    acc = pseudo.accepted
    record = {
        "step": state.step,
        "lr": lr,
        **breakdown,
        "loss": float(loss.detach()),
        "accepted_frac": float(acc.float().mean()),
        "source_img_frac": float((acc & (pseudo.source == obj.IMAGE)).sum() / max(1, int(acc.sum()))),
    }
    state.step += 1
    return record


@torch.no_grad()
def initial_pseudo_stats(teacher: CrossModalModel, samples: list[Sample], cfg: RunConfig) -> dict[str, float]:
    """Pseudo-label statistics of the initial teacher over one weakly augmented pass."""
    stats = PseudoStats()
    bs = cfg.trainer.batch_size
    for i in range(0, len(samples), bs):
        batch = prepare_batch(samples[i : i + bs], cfg, epoch=0)
        q_img, q_pcl = teacher_predictions(teacher, batch)
        if cfg.objective.mode == "unimodal_image":
            conf, lab = q_img.max(-1)
            pseudo = obj.PseudoBatch(lab, conf, torch.full_like(lab, obj.IMAGE), conf >= cfg.objective.threshold)
        elif cfg.objective.mode == "unimodal_point":
            conf, lab = q_pcl.max(-1)
            pseudo = obj.PseudoBatch(lab, conf, torch.full_like(lab, obj.PCL), conf >= cfg.objective.threshold)
        else:
            gen = torch.Generator().manual_seed(cfg.seed)
            pseudo = obj.joint_pseudo_labels(q_img, q_pcl, cfg.objective.threshold, cfg.objective.mode, gen)
        stats.update(pseudo, q_img, q_pcl)
    return stats.summary()


def _eval_record(epoch, state, test_tokens, cfg, pseudo_summary, losses) -> MetricRecord:
    main, other = (state.teacher, state.student) if cfg.trainer.eval_model == "teacher" else (state.student, state.teacher)
    m = accuracy_branches(main, test_tokens)
    return MetricRecord(epoch=epoch, **m, **pseudo_summary, losses=losses, student=accuracy_branches(other, test_tokens) if other is not main else {})


def _write_jsonl(path: Path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def run_selftraining(
    ds: DatasetSplit,
    cfg: RunConfig,
    init_model: CrossModalModel,
    out_dir: str | Path | None = None,
) -> list[MetricRecord]:
    """Epoch loop around :func:`selftrain_step` with evaluation after every epoch.

    Writes ``metrics.jsonl`` (one record per epoch, epoch 0 = initialization),
    ``steps.jsonl`` (per-step loss breakdown) and best/final checkpoints when
    ``out_dir`` is given.
    """
    tr, tk = cfg.trainer, cfg.tokenizer
    train = ds.train
    bs = tr.batch_size
    steps_per_epoch = len(train) // bs
    if tr.epochs and steps_per_epoch == 0:
        raise ConfigurationError("train split is smaller than one batch")
    state = TrainState.from_model(init_model, cfg, total_steps=steps_per_epoch * tr.epochs)
    test_tokens = SplitTokens(ds.test, tk.n_groups, tk.group_size, tk.patch_size)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        for name in ("metrics.jsonl", "steps.jsonl"):
            (out / name).write_text("")
    config = cfg.to_dict()
    records = []
    record = _eval_record(0, state, test_tokens, cfg, initial_pseudo_stats(state.teacher, train, cfg), {})
    records.append(record)
    best_pcl, last_good = -1.0, None
    if out is not None:
        _write_jsonl(out / "metrics.jsonl", record.to_dict())
    for epoch in range(1, tr.epochs + 1):
        order = epoch_order(len(train), cfg.seed, epoch)
        stats = PseudoStats()
        step_logs = []
        for i in range(steps_per_epoch):
            batch = prepare_batch([train[j] for j in order[i * bs : (i + 1) * bs]], cfg, epoch)
            try:
                rec = selftrain_step(state, batch, cfg, stats)
            except DivergenceError as exc:
                exc.last_good_checkpoint = str(last_good) if last_good else None
                raise
            rec["epoch"] = epoch
            step_logs.append(rec)
            if out is not None:
                _write_jsonl(out / "steps.jsonl", rec)
        losses = {k: float(np.mean([r[k] for r in step_logs])) for k in step_logs[0] if k.startswith("l_")}
        record = _eval_record(epoch, state, test_tokens, cfg, stats.summary(), losses)
        records.append(record)
        log.info("epoch %d img %.3f img* %.3f pcl %.3f", epoch, record.acc_image, record.acc_image_star, record.acc_pcl)
        if out is not None:
            _write_jsonl(out / "metrics.jsonl", record.to_dict())
            if record.acc_pcl > best_pcl:
                best_pcl = record.acc_pcl
                last_good = save_pair(state.student, state.teacher, out / "checkpoints" / "best", config, state.step, {"epoch": epoch})
    if out is not None:
        save_pair(state.student, state.teacher, out / "checkpoints" / "final", config, state.step, {"epoch": tr.epochs})
    return records
