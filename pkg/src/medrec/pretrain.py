"""Stage-1 self-supervised pretraining over the pooled multi-center records.

Two tasks drive the shared backbone: multi-label reconstruction of masked
diagnosis/procedure codes, and an in-batch contrastive alignment between
projected diagnosis and procedure representations of the same record. The
combined objective is mask loss + gamma * contrastive loss; model selection
uses masked-diagnosis ranking quality on the validation split.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import save_tensors
from .data import (Batch, MultiCenterDataset, collate, derived_rng, epoch_rng,
                   iter_batches, validation_rng)
from .encoder import BackboneParams, EncoderConfig, encode, init_backbone, init_linear
from .metrics import average_precision
from .optim import Adam

log = logging.getLogger(__name__)

_HEADS_TAG = 13
_BACKBONE_TAG = 17


@dataclass
class PretrainConfig:
    contrastive_weight: float = 1e-2   # gamma
    temperature: float = 0.8           # tau
    batch_size: int = 64
    learning_rate: float = 5e-4
    mask_ratio: float = 0.15
    max_epochs: int = 30
    patience: int = 5
    min_epochs: int = 1  # early stopping cannot fire before this epoch
    seed: int = 42
    mask_task: bool = True             # False: contrastive-only ablation
    contrastive_task: bool = True      # False: mask-only ablation
    shared_heads: bool = False         # share hidden layers across task heads
    include_positive_in_denominator: bool = False

    def validate(self) -> None:
        if self.contrastive_weight < 0:
            raise ValueError("contrastive_weight must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if not (0.0 < self.mask_ratio < 1.0):
            raise ValueError("mask_ratio must lie in (0, 1)")
        if self.max_epochs < 1 or self.patience < 1 or self.min_epochs < 1:
            raise ValueError("max_epochs, patience and min_epochs must be positive")


@dataclass
class TwoLayerMLP:
    """Affine -> ReLU -> affine."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def apply(self, x: Tensor) -> Tensor:
        return ad.matmul(ad.relu(ad.matmul(x, self.w1) + self.b1), self.w2) + self.b2

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{n}": getattr(self, n) for n in ("w1", "b1", "w2", "b2")}


class PretrainHeads:
    """Mask-prediction heads and contrastive projectors.

    With shared_heads the two mask heads share one hidden layer (their output
    layers stay vocabulary-specific) and the two projectors likewise share a
    hidden layer.
    """

    def __init__(self, n_diagnoses: int, n_procedures: int, embed_dim: int,
                 seed: int, shared_heads: bool = False):
        rng = derived_rng(seed, _HEADS_TAG)
        c = embed_dim
        mask_hidden_d = init_linear(rng, c, c)
        mask_hidden_p = mask_hidden_d if shared_heads else init_linear(rng, c, c)
        self.mask_d = TwoLayerMLP(*mask_hidden_d, *init_linear(rng, c, n_diagnoses))
        self.mask_p = TwoLayerMLP(*mask_hidden_p, *init_linear(rng, c, n_procedures))
        proj_hidden_d = init_linear(rng, c, c)
        proj_hidden_p = proj_hidden_d if shared_heads else init_linear(rng, c, c)
        self.proj_d = TwoLayerMLP(*proj_hidden_d, *init_linear(rng, c, c))
        self.proj_p = TwoLayerMLP(*proj_hidden_p, *init_linear(rng, c, c))
        self.shared_heads = shared_heads

    def tensors(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for mlp, prefix in ((self.mask_d, "mask_d"), (self.mask_p, "mask_p"),
                            (self.proj_d, "proj_d"), (self.proj_p, "proj_p")):
            for t in mlp.named(prefix).values():
                seen.setdefault(id(t), t)
        return list(seen.values())


def mask_loss(r_d: Tensor, r_p: Tensor, batch: Batch, heads: PretrainHeads) -> Tensor:
    """BCE of both mask heads against the multi-hot masked-code targets,
    summed over the vocabulary and averaged over the batch."""
    loss_d = ad.bce_with_logits(heads.mask_d.apply(r_d), batch.diag_targets)
    loss_p = ad.bce_with_logits(heads.mask_p.apply(r_p), batch.proc_targets)
    return loss_d + loss_p


def contrastive_loss(r_d: Tensor, r_p: Tensor, heads: PretrainHeads,
                     temperature: float,
                     include_positive_in_denominator: bool = False) -> Tensor:
    """Symmetric in-batch contrastive loss over projected representations.

    Cosine similarities are scaled by 1/temperature. By default the positive
    pair is excluded from each denominator; the flag switches to the form
    that keeps it in.
    """
    if r_d.shape[0] < 2:
        raise ValueError("contrastive loss needs a batch of at least 2 records")
    u_d = ad.l2_normalize(heads.proj_d.apply(r_d))
    u_p = ad.l2_normalize(heads.proj_p.apply(r_p))
    sim = ad.matmul(u_d, ad.transpose_last2(u_p)) * (1.0 / temperature)
    exclude = not include_positive_in_denominator
    positives = ad.diag(sim)
    loss_dp = ad.mean(ad.logsumexp_rows(sim, exclude_diagonal=exclude) - positives)
    loss_pd = ad.mean(ad.logsumexp_rows(ad.transpose_last2(sim),
                                        exclude_diagonal=exclude) - positives)
    return loss_dp + loss_pd


def projection_cosines(r_d: Tensor, r_p: Tensor, heads: PretrainHeads) -> np.ndarray:
    """(B, B) cosine matrix between projected tower outputs (no gradients)."""
    u_d = ad.l2_normalize(heads.proj_d.apply(r_d)).data
    u_p = ad.l2_normalize(heads.proj_p.apply(r_p)).data
    return u_d @ u_p.T


def pretrain_objective(batch: Batch, backbone: BackboneParams, heads: PretrainHeads,
                       cfg: PretrainConfig) -> tuple[Tensor | None, float, float]:
    """Combined stage-1 loss on one batch.

    Returns (loss tensor or None when both tasks are disabled, mask component,
    contrastive component). Both tasks read the same forward pass.
    """
    use_contrastive = cfg.contrastive_task and cfg.contrastive_weight > 0
    if not cfg.mask_task and not use_contrastive:
        return None, 0.0, 0.0
    r_d, r_p = encode(backbone, batch)
    loss = None
    mask_val = 0.0
    contrastive_val = 0.0
    if cfg.mask_task:
        loss = mask_loss(r_d, r_p, batch, heads)
        mask_val = loss.item()
    if use_contrastive:
        contrastive = contrastive_loss(r_d, r_p, heads, cfg.temperature,
                                       cfg.include_positive_in_denominator)
        contrastive_val = contrastive.item()
        weighted = contrastive * cfg.contrastive_weight
        loss = weighted if loss is None else loss + weighted
    return loss, mask_val, contrastive_val


def _collate_pretrain(records, dataset: MultiCenterDataset, cfg: PretrainConfig,
                      enc_cfg: EncoderConfig, rng) -> Batch:
    if cfg.mask_task:
        return collate(records, dataset.vocabs, "pretrain", enc_cfg.max_len,
                       mask_ratio=cfg.mask_ratio, rng=rng)
    # contrastive-only ablation trains on unmasked inputs
    return collate(records, dataset.vocabs, "tune", enc_cfg.max_len)


def masked_prediction_score(dataset: MultiCenterDataset, backbone: BackboneParams,
                            heads: PretrainHeads, cfg: PretrainConfig,
                            enc_cfg: EncoderConfig, split: str = "validation") -> float:
    """Mean average precision of masked-diagnosis reconstruction on a split.

    Masking uses a stream fixed by the seed so every epoch scores the same
    masked inputs.
    """
    records = dataset.pooled_records(split)
    rng = validation_rng(cfg.seed)
    scores: list[float] = []
    for chunk in iter_batches(records, cfg.batch_size):
        batch = collate(chunk, dataset.vocabs, "pretrain", enc_cfg.max_len,
                        mask_ratio=cfg.mask_ratio, rng=rng)
        r_d, _ = encode(backbone, batch)
        probs = ad.sigmoid(heads.mask_d.apply(r_d)).data
        for row in range(batch.n_records):
            if batch.diag_targets[row].sum() > 0:
                scores.append(average_precision(batch.diag_targets[row], probs[row]))
    return float(np.mean(scores)) if scores else 0.0


def _validation_contrastive_loss(dataset, backbone, heads, cfg, enc_cfg) -> float:
    records = dataset.pooled_records("validation")
    losses = []
    for chunk in iter_batches(records, cfg.batch_size, min_size=2):
        batch = collate(chunk, dataset.vocabs, "tune", enc_cfg.max_len)
        r_d, r_p = encode(backbone, batch)
        losses.append(contrastive_loss(r_d, r_p, heads, cfg.temperature,
                                       cfg.include_positive_in_denominator).item())
    return float(np.mean(losses)) if losses else 0.0


def alignment_probe(dataset: MultiCenterDataset, backbone: BackboneParams,
                    heads: PretrainHeads, cfg: PretrainConfig,
                    enc_cfg: EncoderConfig, split: str = "validation",
                    max_records: int = 256) -> tuple[float, float]:
    """(mean positive-pair cosine, mean negative-pair cosine) of projections."""
    records = dataset.pooled_records(split)[:max_records]
    rng = validation_rng(cfg.seed)
    pos, neg = [], []
    for chunk in iter_batches(records, cfg.batch_size, min_size=2):
        batch = collate(chunk, dataset.vocabs, "pretrain", enc_cfg.max_len,
                        mask_ratio=cfg.mask_ratio, rng=rng)
        cos = projection_cosines(*encode(backbone, batch), heads)
        b = cos.shape[0]
        off_diag = ~np.eye(b, dtype=bool)
        pos.extend(np.diagonal(cos).tolist())
        neg.extend(cos[off_diag].tolist())
    return float(np.mean(pos)), float(np.mean(neg))


@dataclass
class PretrainResult:
    backbone: BackboneParams
    heads: PretrainHeads
    history: list[dict]
    best_epoch: int
    best_score: float


def run_pretrain(dataset: MultiCenterDataset, cfg: PretrainConfig,
                 enc_cfg: EncoderConfig,
                 heads: PretrainHeads | None = None) -> PretrainResult:
    """Train the backbone on the pooled training records of all centers.

    Early-stops on the masked-diagnosis score (or on validation contrastive
    loss for the mask-free ablation) and restores the best epoch's weights.
    With both tasks disabled the initial weights are returned untouched.
    `heads` is normally built internally; pass one to start from custom
    task-head weights.
    """
    cfg.validate()
    enc_cfg.validate()
    vocabs = dataset.vocabs
    backbone = init_backbone(vocabs.n_diagnoses, vocabs.n_procedures, enc_cfg,
                             seed=_backbone_seed(cfg.seed))
    if heads is None:
        heads = PretrainHeads(vocabs.n_diagnoses, vocabs.n_procedures,
                              enc_cfg.embed_dim, cfg.seed, cfg.shared_heads)
    train_records = dataset.pooled_records("train")
    if not train_records:
        raise ValueError("dataset has no training records")

    use_contrastive = cfg.contrastive_task and cfg.contrastive_weight > 0
    if not cfg.mask_task and not use_contrastive:
        return PretrainResult(backbone, heads, [], best_epoch=0, best_score=0.0)

    params = backbone.tensors() + heads.tensors()
    optimizer = Adam(params, learning_rate=cfg.learning_rate)
    best_score = -np.inf
    best_epoch = 0
    best_state = _snapshot(params)
    stale = 0
    history: list[dict] = []

    for epoch in range(1, cfg.max_epochs + 1):
        rng = epoch_rng(cfg.seed, epoch)
        epoch_loss = epoch_mask = epoch_contrastive = 0.0
        n_batches = 0
        for chunk in iter_batches(train_records, cfg.batch_size, rng=rng,
                                  min_size=2 if use_contrastive else 1):
            batch = _collate_pretrain(chunk, dataset, cfg, enc_cfg, rng)
            optimizer.zero_grad()
            loss, mask_val, contrastive_val = pretrain_objective(batch, backbone,
                                                                 heads, cfg)
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item()
            epoch_mask += mask_val
            epoch_contrastive += contrastive_val
            n_batches += 1

        if cfg.mask_task:
            score = masked_prediction_score(dataset, backbone, heads, cfg, enc_cfg)
        else:
            score = -_validation_contrastive_loss(dataset, backbone, heads, cfg, enc_cfg)
        history.append({
            "epoch": epoch,
            "train_loss": epoch_loss / max(n_batches, 1),
            "mask_loss": epoch_mask / max(n_batches, 1),
            "contrastive_loss": epoch_contrastive / max(n_batches, 1),
            "val_score": score,
        })
        log.info("pretrain epoch %d: loss=%.4f val=%.4f", epoch,
                 history[-1]["train_loss"], score)
        if score > best_score:
            best_score = score
            best_epoch = epoch
            best_state = _snapshot(params)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience and epoch >= cfg.min_epochs:
                break

    _restore(params, best_state)
    return PretrainResult(backbone, heads, history, best_epoch, float(best_score))


def _backbone_seed(seed: int) -> int:
    # fresh-start regimes derive the same backbone init from the same seed
    return int(np.random.SeedSequence([seed, _BACKBONE_TAG]).generate_state(1)[0])


def backbone_init_seed(seed: int) -> int:
    """Public handle on the backbone init derivation (shared across regimes)."""
    return _backbone_seed(seed)


def _snapshot(params: list[Tensor]) -> list[np.ndarray]:
    return [p.data.copy() for p in params]


def _restore(params: list[Tensor], state: list[np.ndarray]) -> None:
    for p, data in zip(params, state):
        p.data = data.copy()


def save_backbone(path, backbone: BackboneParams, meta: dict | None = None) -> None:
    """Serialize backbone tensors plus its encoder config and init note."""
    full_meta = {
        "encoder": {
            "embed_dim": backbone.config.embed_dim,
            "n_layers": backbone.config.n_layers,
            "n_heads": backbone.config.n_heads,
            "max_len": backbone.config.max_len,
            "shared_towers": backbone.config.shared_towers,
        },
        "init": "uniform[-1/sqrt(fan_in), 1/sqrt(fan_in)], zero biases",
    }
    full_meta.update(meta or {})
    save_tensors(path, {name: t.data for name, t in backbone.named_tensors().items()},
                 full_meta)


def load_backbone(path) -> BackboneParams:
    from .checkpoint import load_tensors

    tensors, meta = load_tensors(path)
    enc = meta["encoder"]
    cfg = EncoderConfig(embed_dim=enc["embed_dim"], n_layers=enc["n_layers"],
                        n_heads=enc["n_heads"], max_len=enc["max_len"],
                        shared_towers=enc["shared_towers"])
    backbone = init_backbone(tensors["E_d"].shape[0] - 2,
                             tensors["E_p"].shape[0] - 2, cfg, seed=0)
    for name, tensor in backbone.named_tensors().items():
        tensor.data = tensors[name].copy()
    return backbone
