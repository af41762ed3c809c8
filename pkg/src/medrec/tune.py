"""Stage-2 adaptation and inference.

The default regime keeps the pretrained backbone frozen and trains, per
center, only a pair of prompt embedding blocks (prepended to each tower's
input after the CLS position) and a fresh recommendation head. Alternative
regimes cover full per-center finetuning, head-only tuning on the frozen
backbone, one pooled model trained from scratch, and one fresh model per
center. Inference thresholds the per-medication probabilities.
"""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_tensors, save_tensors
from .data import (MultiCenterDataset, Record, collate, derived_rng, epoch_rng,
                   iter_batches, stable_center_key)
from .encoder import (BackboneParams, EncoderConfig, encode, init_backbone,
                      init_linear, uniform_init)
from .metrics import jaccard, threshold_set
from .optim import Adam
from .pretrain import backbone_init_seed

log = logging.getLogger(__name__)

REGIMES = ("prompt", "finetune", "finetune-freeze", "full-train", "single-train")
_ADAPTER_TAG = 19
_TUNE_TAG = 29
_SHARED_KEY = "__shared__"


class MissingArtifactError(RuntimeError):
    """A required upstream artifact (backbone, store, dataset) is absent."""


@dataclass
class TuneConfig:
    prompt_count: int = 2       # b
    learning_rate: float = 5e-4
    batch_size: int = 64
    threshold: float = 0.3
    regime: str = "prompt"
    max_epochs: int = 30
    patience: int = 5
    seed: int = 42

    def validate(self) -> None:
        if self.prompt_count < 0:
            raise ValueError("prompt_count must be >= 0")
        if not (0.0 < self.threshold < 1.0):
            raise ValueError("threshold must lie in (0, 1)")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; choose from {REGIMES}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")


class CenterAdapter:
    """Per-center tunables: prompt blocks (b x c per tower) and the head.

    The recommendation head maps the concatenated tower outputs (2c) through
    a ReLU hidden layer (c) to per-medication logits.
    """

    def __init__(self, center_id: str, n_medications: int, embed_dim: int,
                 prompt_count: int, seed: int):
        rng = derived_rng(seed, _ADAPTER_TAG, stable_center_key(center_id))
        c = embed_dim
        b = prompt_count
        self.center_id = center_id
        self.prompt_count = b
        self.prompt_d = Tensor(uniform_init(rng, (b, c), c), requires_grad=True)
        self.prompt_p = Tensor(uniform_init(rng, (b, c), c), requires_grad=True)
        self.head_w1, self.head_b1 = init_linear(rng, 2 * c, c)
        self.head_w2, self.head_b2 = init_linear(rng, c, n_medications)

    def head_tensors(self) -> list[Tensor]:
        return [self.head_w1, self.head_b1, self.head_w2, self.head_b2]

    def tensors(self) -> list[Tensor]:
        prompts = [self.prompt_d, self.prompt_p] if self.prompt_count else []
        return prompts + self.head_tensors()

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        if self.prompt_count:
            out["prompt_d"] = self.prompt_d
            out["prompt_p"] = self.prompt_p
        out.update({"head.w1": self.head_w1, "head.b1": self.head_b1,
                    "head.w2": self.head_w2, "head.b2": self.head_b2})
        return out

    def tunable_parameter_count(self) -> int:
        return sum(t.size for t in self.tensors())

    def apply_head(self, r_d: Tensor, r_p: Tensor) -> Tensor:
        z = ad.concat_last([r_d, r_p])
        hidden = ad.relu(ad.matmul(z, self.head_w1) + self.head_b1)
        return ad.matmul(hidden, self.head_w2) + self.head_b2


def recommend_logits(batch, backbone: BackboneParams,
                     adapter: CenterAdapter) -> tuple[Tensor, np.ndarray]:
    """Per-medication logits and probabilities for a collated batch."""
    if batch.n_prompt != adapter.prompt_count:
        raise ValueError("batch prompt slots do not match the adapter")
    prompts = (adapter.prompt_d, adapter.prompt_p) if adapter.prompt_count else (None, None)
    r_d, r_p = encode(backbone, batch, *prompts)
    logits = adapter.apply_head(r_d, r_p)
    return logits, ad.sigmoid(logits.detach()).data


def tune_loss(batch, backbone: BackboneParams, adapter: CenterAdapter) -> Tensor:
    """Multi-label BCE against the prescribed-medication targets."""
    logits, _ = recommend_logits(batch, backbone, adapter)
    return ad.bce_with_logits(logits, batch.med_targets)


class CenterModelStore:
    """One shared (or per-center) backbone plus per-center adapters."""

    def __init__(self, regime: str, prompt_count: int,
                 shared_backbone: BackboneParams | None = None):
        self.regime = regime
        self.prompt_count = prompt_count
        self.shared_backbone = shared_backbone
        self.center_backbones: dict[str, BackboneParams] = {}
        self.adapters: dict[str, CenterAdapter] = {}

    @property
    def centers(self) -> tuple[str, ...]:
        return tuple(sorted(self.adapters.keys()))

    def backbone_for(self, center_id: str) -> BackboneParams:
        if center_id in self.center_backbones:
            return self.center_backbones[center_id]
        if self.shared_backbone is None:
            raise MissingArtifactError(f"no backbone available for center {center_id!r}")
        return self.shared_backbone

    def adapter_for(self, center_id: str) -> CenterAdapter:
        if center_id not in self.adapters:
            raise MissingArtifactError(f"no adapter tuned for center {center_id!r}")
        return self.adapters[center_id]

    def parameter_audit(self) -> dict[str, int]:
        """Per-center count of parameters that stage 2 actually tuned."""
        audit = {}
        for center, adapter in self.adapters.items():
            n = adapter.tunable_parameter_count()
            if self.regime == "finetune-freeze":
                n = sum(t.size for t in adapter.head_tensors())
            elif self.regime in ("finetune", "single-train", "full-train"):
                n += sum(t.size for t in self.backbone_for(center).tensors())
            audit[center] = n
        return audit


def infer(record: Record, center_id: str, store: CenterModelStore,
          vocabs, threshold: float = 0.3) -> set[int]:
    """Recommended medication ids: those with probability above the threshold."""
    probs = infer_probabilities(record, center_id, store, vocabs)
    return threshold_set(probs, threshold)


def infer_probabilities(record: Record, center_id: str, store: CenterModelStore,
                        vocabs) -> np.ndarray:
    adapter = store.adapter_for(center_id)
    backbone = store.backbone_for(center_id)
    batch = collate([record], vocabs, "tune", backbone.config.max_len,
                    n_prompt=adapter.prompt_count)
    _, probs = recommend_logits(batch, backbone, adapter)
    return probs[0]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _validation_jaccard(records: list[Record], vocabs, backbone, adapter,
                        batch_size: int, threshold: float) -> float:
    scores = []
    for chunk in iter_batches(records, batch_size):
        batch = collate(chunk, vocabs, "tune", backbone.config.max_len,
                        n_prompt=adapter.prompt_count)
        _, probs = recommend_logits(batch, backbone, adapter)
        for row, record in enumerate(chunk):
            scores.append(jaccard(set(record.medications),
                                  threshold_set(probs[row], threshold)))
    return float(np.mean(scores)) if scores else 0.0


def _fit(train_records: list[Record], val_records: list[Record], vocabs,
         backbone: BackboneParams, adapter: CenterAdapter, params: list[Tensor],
         cfg: TuneConfig, stream_key: str) -> list[dict]:
    """Adam loop with early stopping on validation Jaccard at the threshold.

    Restores the best-epoch values of `params` before returning. When the
    validation split is empty the (negated) training loss selects the epoch.
    """
    optimizer = Adam(params, learning_rate=cfg.learning_rate)
    best_score = -np.inf
    best_state = [p.data.copy() for p in params]
    stale = 0
    history: list[dict] = []
    for epoch in range(1, cfg.max_epochs + 1):
        rng = epoch_rng(cfg.seed, epoch, stream_key)
        total = 0.0
        n_batches = 0
        for chunk in iter_batches(train_records, cfg.batch_size, rng=rng):
            batch = collate(chunk, vocabs, "tune", backbone.config.max_len,
                            n_prompt=adapter.prompt_count)
            optimizer.zero_grad()
            loss = ad.bce_with_logits(
                adapter.apply_head(*encode(backbone, batch,
                                           *((adapter.prompt_d, adapter.prompt_p)
                                             if adapter.prompt_count else (None, None)))),
                batch.med_targets)
            loss.backward()
            optimizer.step()
            total += loss.item()
            n_batches += 1
        train_loss = total / max(n_batches, 1)
        if val_records:
            score = _validation_jaccard(val_records, vocabs, backbone, adapter,
                                        cfg.batch_size, cfg.threshold)
        else:
            score = -train_loss
        history.append({"epoch": epoch, "train_loss": train_loss, "val_score": score})
        if score > best_score:
            best_score = score
            best_state = [p.data.copy() for p in params]
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    for p, data in zip(params, best_state):
        p.data = data.copy()
    return history


def run_tune(dataset: MultiCenterDataset, backbone: BackboneParams | None,
             cfg: TuneConfig,
             enc_cfg: EncoderConfig | None = None) -> tuple[CenterModelStore, dict]:
    """Dispatch one training regime over the dataset.

    prompt:          per center, train prompts + head; backbone frozen.
    finetune:        per center, deep-copy the backbone and train everything.
    finetune-freeze: per center, train the head only; backbone frozen.
    full-train:      one fresh model on pooled data (no pretraining).
    single-train:    one fresh model per center on its own data.

    The pretrained backbone is required except for the two fresh-start
    regimes. Returns (store, history keyed by center or "__shared__").
    """
    cfg.validate()
    vocabs = dataset.vocabs
    if cfg.regime in ("prompt", "finetune", "finetune-freeze"):
        if backbone is None:
            raise MissingArtifactError(
                f"regime {cfg.regime!r} requires a pretrained backbone")
        enc_cfg = backbone.config
    else:
        if enc_cfg is None:
            raise ValueError("fresh-start regimes need an encoder config")
        enc_cfg.validate()

    histories: dict[str, list[dict]] = {}

    if cfg.regime == "full-train":
        fresh = init_backbone(vocabs.n_diagnoses, vocabs.n_procedures, enc_cfg,
                              seed=backbone_init_seed(cfg.seed))
        store = CenterModelStore(cfg.regime, 0, shared_backbone=fresh)
        adapter = CenterAdapter(_SHARED_KEY, vocabs.n_medications,
                                enc_cfg.embed_dim, 0, cfg.seed)
        histories[_SHARED_KEY] = _fit(dataset.pooled_records("train"),
                                      dataset.pooled_records("validation"),
                                      vocabs, fresh, adapter,
                                      fresh.tensors() + adapter.tensors(),
                                      cfg, _SHARED_KEY)
        for center in dataset.centers:
            store.adapters[center] = adapter
        return store, histories

    prompt_count = cfg.prompt_count if cfg.regime == "prompt" else 0
    store = CenterModelStore(
        cfg.regime, prompt_count,
        shared_backbone=backbone if cfg.regime in ("prompt", "finetune-freeze") else None)

    if cfg.regime in ("prompt", "finetune-freeze") and backbone is not None:
        backbone.set_requires_grad(False)  # freezing contract

    for center in dataset.centers:
        train_records = dataset.split_records(center, "train")
        val_records = dataset.split_records(center, "validation")
        adapter = CenterAdapter(center, vocabs.n_medications, enc_cfg.embed_dim,
                                prompt_count, cfg.seed)
        if cfg.regime == "prompt":
            center_backbone = backbone
            params = adapter.tensors()
        elif cfg.regime == "finetune-freeze":
            center_backbone = backbone
            params = adapter.head_tensors()
        elif cfg.regime == "finetune":
            center_backbone = backbone.copy()
            center_backbone.set_requires_grad(True)
            store.center_backbones[center] = center_backbone
            params = center_backbone.tensors() + adapter.tensors()
        else:  # single-train
            seed = backbone_init_seed(cfg.seed) + stable_center_key(center) % (2 ** 16)
            center_backbone = init_backbone(vocabs.n_diagnoses, vocabs.n_procedures,
                                            enc_cfg, seed=seed)
            store.center_backbones[center] = center_backbone
            params = center_backbone.tensors() + adapter.tensors()
        histories[center] = _fit(train_records, val_records, vocabs,
                                 center_backbone, adapter, params, cfg, center)
        store.adapters[center] = adapter
        log.info("tuned center %s (%s): best val %.4f", center, cfg.regime,
                 max((h["val_score"] for h in histories[center]), default=0.0))

    if cfg.regime in ("prompt", "finetune-freeze") and backbone is not None:
        backbone.set_requires_grad(True)
    return store, histories


# ---------------------------------------------------------------------------
# store files
# ---------------------------------------------------------------------------

def save_store(store: CenterModelStore, out_dir,
               backbone_checkpoint_path=None, extra_meta: dict | None = None) -> None:
    """Write manifest + backbone checkpoint + one adapter file per center.

    For regimes that freeze the backbone, the original pretrained checkpoint
    file is copied verbatim so its bytes are preserved exactly. Per-center
    backbones (finetune / single-train) are stored inside the adapter files.
    """
    out = Path(out_dir)
    (out / "adapters").mkdir(parents=True, exist_ok=True)
    files: dict[str, str] = {}

    if store.shared_backbone is not None:
        backbone_file = out / "backbone.ckpt"
        if backbone_checkpoint_path is not None and store.regime in (
                "prompt", "finetune-freeze"):
            shutil.copyfile(backbone_checkpoint_path, backbone_file)
        else:
            from .pretrain import save_backbone

            save_backbone(backbone_file, store.shared_backbone)
        files["backbone"] = "backbone.ckpt"

    enc_cfg = None
    written: set[int] = set()
    for center in store.centers:
        adapter = store.adapters[center]
        if id(adapter) in written:
            continue
        written.add(id(adapter))
        name = adapter.center_id if adapter.center_id == _SHARED_KEY else center
        tensors = {f"adapter.{k}": t.data for k, t in adapter.named_tensors().items()}
        meta = {"center": name, "prompt_count": adapter.prompt_count}
        if center in store.center_backbones:
            bb = store.center_backbones[center]
            tensors.update({k: t.data for k, t in bb.named_tensors().items()})
            meta["has_backbone"] = True
            enc_cfg = bb.config
        save_tensors(out / "adapters" / f"{name}.ckpt", tensors, meta)
        files[name] = f"adapters/{name}.ckpt"

    if enc_cfg is None:
        ref = store.shared_backbone
        enc_cfg = ref.config if ref is not None else EncoderConfig()
    manifest = {
        "regime": store.regime,
        "prompt_count": store.prompt_count,
        "centers": list(store.centers),
        "shared_adapter": store.regime == "full-train",
        "encoder": {
            "embed_dim": enc_cfg.embed_dim, "n_layers": enc_cfg.n_layers,
            "n_heads": enc_cfg.n_heads, "max_len": enc_cfg.max_len,
            "shared_towers": enc_cfg.shared_towers,
        },
        "files": files,
    }
    manifest.update(extra_meta or {})
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _adapter_from_tensors(tensors: dict, meta: dict, center: str,
                          embed_dim: int) -> CenterAdapter:
    b = meta["prompt_count"]
    n_med = tensors["adapter.head.b2"].shape[0]
    adapter = CenterAdapter(center, n_med, embed_dim, b, seed=0)
    for key, t in adapter.named_tensors().items():
        t.data = tensors[f"adapter.{key}"].copy()
    return adapter


def load_store(store_dir) -> CenterModelStore:
    """Rebuild a CenterModelStore from a directory written by save_store."""
    from .pretrain import load_backbone

    root = Path(store_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise MissingArtifactError(f"{store_dir}: missing manifest.json")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    enc = manifest["encoder"]
    enc_cfg = EncoderConfig(embed_dim=enc["embed_dim"], n_layers=enc["n_layers"],
                            n_heads=enc["n_heads"], max_len=enc["max_len"],
                            shared_towers=enc["shared_towers"])
    shared = None
    if "backbone" in manifest["files"]:
        shared = load_backbone(root / manifest["files"]["backbone"])
    store = CenterModelStore(manifest["regime"], manifest["prompt_count"],
                             shared_backbone=shared)

    if manifest.get("shared_adapter"):
        tensors, meta = load_tensors(root / manifest["files"][_SHARED_KEY])
        adapter = _adapter_from_tensors(tensors, meta, _SHARED_KEY, enc_cfg.embed_dim)
        for center in manifest["centers"]:
            store.adapters[center] = adapter
        return store

    for center in manifest["centers"]:
        tensors, meta = load_tensors(root / manifest["files"][center])
        store.adapters[center] = _adapter_from_tensors(tensors, meta, center,
                                                       enc_cfg.embed_dim)
        if meta.get("has_backbone"):
            backbone = init_backbone(tensors["E_d"].shape[0] - 2,
                                     tensors["E_p"].shape[0] - 2, enc_cfg, seed=0)
            for name, tensor in backbone.named_tensors().items():
                tensor.data = tensors[name].copy()
            store.center_backbones[center] = backbone
    return store
