"""Twin transformer set-encoders over diagnosis and procedure codes.

Both towers run the same stack of post-norm transformer layers (shared
parameters by default) over embedded code sets laid out as
[CLS, prompt slots, codes, padding]. No positional embedding is used, so the
CLS readout is invariant to the order of codes within a set. Padding is
removed from attention with a large negative additive bias on masked keys.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Batch, derived_rng

ATTENTION_MASK_BIAS = -1e30
_INIT_TAG = 7


@dataclass
class EncoderConfig:
    embed_dim: int = 300        # c
    n_layers: int = 2           # K
    n_heads: int = 2            # A
    max_len: int = 100
    shared_towers: bool = True  # False trains separate tower parameters

    def validate(self) -> None:
        if self.embed_dim < 1 or self.n_layers < 1 or self.n_heads < 1:
            raise ValueError("encoder dimensions must be positive")
        if self.embed_dim % self.n_heads != 0:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.max_len < 2:
            raise ValueError("max_len must allow CLS plus at least one code")


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_linear(rng: np.random.Generator, n_in: int, n_out: int) -> tuple[Tensor, Tensor]:
    w = Tensor(uniform_init(rng, (n_in, n_out), n_in), requires_grad=True)
    b = Tensor(np.zeros(n_out), requires_grad=True)
    return w, b


@dataclass
class LayerParams:
    """One transformer layer: attention projections, FFN and two layer norms."""

    wq: Tensor  # (c, c), per-head column blocks of width c/A
    wk: Tensor
    wv: Tensor
    wo: Tensor  # (c, c)
    w1: Tensor  # (c, c)
    b1: Tensor  # (c,)
    w2: Tensor  # (c, c)
    b2: Tensor  # (c,)
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{name}": getattr(self, name)
                for name in ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2",
                             "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias")}


def _init_layer(rng: np.random.Generator, c: int) -> LayerParams:
    wq = Tensor(uniform_init(rng, (c, c), c), requires_grad=True)
    wk = Tensor(uniform_init(rng, (c, c), c), requires_grad=True)
    wv = Tensor(uniform_init(rng, (c, c), c), requires_grad=True)
    wo = Tensor(uniform_init(rng, (c, c), c), requires_grad=True)
    w1, b1 = init_linear(rng, c, c)
    w2, b2 = init_linear(rng, c, c)
    ones = lambda: Tensor(np.ones(c), requires_grad=True)
    zeros = lambda: Tensor(np.zeros(c), requires_grad=True)
    return LayerParams(wq, wk, wv, wo, w1, b1, w2, b2,
                       ones(), zeros(), ones(), zeros())


@dataclass
class BackboneParams:
    """Embedding tables plus the encoder layer stack(s).

    Embedding tables have two reserved trailing rows (CLS, then MASK). With
    shared towers, layers_p is the same list object as layers_d.
    """

    e_d: Tensor
    e_p: Tensor
    layers_d: list[LayerParams]
    layers_p: list[LayerParams]
    config: EncoderConfig

    def named_tensors(self) -> dict[str, Tensor]:
        out = {"E_d": self.e_d, "E_p": self.e_p}
        for i, layer in enumerate(self.layers_d):
            out.update(layer.named(f"encoder.layer{i}"))
        if self.layers_p is not self.layers_d:
            for i, layer in enumerate(self.layers_p):
                out.update(layer.named(f"encoder2.layer{i}"))
        return out

    def tensors(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.tensors():
            t.requires_grad = flag

    def copy(self) -> "BackboneParams":
        clone = init_backbone(self.e_d.shape[0] - 2, self.e_p.shape[0] - 2,
                              self.config, seed=0)
        for name, tensor in clone.named_tensors().items():
            tensor.data = self.named_tensors()[name].data.copy()
        return clone


def init_backbone(n_diagnoses: int, n_procedures: int, cfg: EncoderConfig,
                  seed: int) -> BackboneParams:
    """Fresh backbone with fan-in uniform embeddings/weights and zero biases."""
    cfg.validate()
    rng = derived_rng(seed, _INIT_TAG)
    c = cfg.embed_dim
    e_d = Tensor(uniform_init(rng, (n_diagnoses + 2, c), c), requires_grad=True)
    e_p = Tensor(uniform_init(rng, (n_procedures + 2, c), c), requires_grad=True)
    layers_d = [_init_layer(rng, c) for _ in range(cfg.n_layers)]
    layers_p = layers_d if cfg.shared_towers else [_init_layer(rng, c)
                                                   for _ in range(cfg.n_layers)]
    return BackboneParams(e_d, e_p, layers_d, layers_p, cfg)


def attention_mask_bias(mask: np.ndarray) -> Tensor:
    """(B, L) bool key mask -> (B, 1, L) additive pre-softmax bias."""
    return Tensor(np.where(mask, 0.0, ATTENTION_MASK_BIAS)[:, None, :])


def attention(q: Tensor, k: Tensor, v: Tensor, mask_bias: Tensor | None = None) -> Tensor:
    """softmax(Q K^T / sqrt(d)) V with masked key positions pushed to -inf."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = ad.matmul(q, ad.transpose_last2(k)) * scale
    if mask_bias is not None:
        scores = scores + mask_bias
    return ad.matmul(ad.softmax(scores), v)


def multi_head(x: Tensor, layer: LayerParams, mask_bias: Tensor | None,
               n_heads: int) -> Tensor:
    """Per-head attention over column blocks of the projections, concatenated
    and mixed by the output projection."""
    c = x.shape[-1]
    head_dim = c // n_heads
    heads = []
    for a in range(n_heads):
        lo, hi = a * head_dim, (a + 1) * head_dim
        q = ad.matmul(x, ad.slice_last(layer.wq, lo, hi))
        k = ad.matmul(x, ad.slice_last(layer.wk, lo, hi))
        v = ad.matmul(x, ad.slice_last(layer.wv, lo, hi))
        heads.append(attention(q, k, v, mask_bias))
    merged = heads[0] if n_heads == 1 else ad.concat_last(heads)
    return ad.matmul(merged, layer.wo)


def transformer_layer(x: Tensor, layer: LayerParams, mask_bias: Tensor | None,
                      n_heads: int) -> Tensor:
    """Post-norm block: LN(x + MHA(x)), then LN(m + FFN(m))."""
    m = ad.layer_norm(x + multi_head(x, layer, mask_bias, n_heads),
                      layer.ln1_gain, layer.ln1_bias)
    ffn = ad.matmul(ad.relu(ad.matmul(m, layer.w1) + layer.b1), layer.w2) + layer.b2
    return ad.layer_norm(m + ffn, layer.ln2_gain, layer.ln2_bias)


def encode_tower(ids: np.ndarray, mask: np.ndarray, table: Tensor,
                 layers: list[LayerParams], n_heads: int,
                 prompt: Tensor | None = None) -> Tensor:
    """Run one tower and return the position-0 (CLS) vectors, (B, c)."""
    x = ad.embedding(table, ids)
    if prompt is not None and prompt.shape[0] > 0:
        x = ad.splice_rows(x, 1, prompt)
    bias = attention_mask_bias(mask)
    for layer in layers:
        x = transformer_layer(x, layer, bias, n_heads)
    return ad.row_at(x, 0)


def encode(backbone: BackboneParams, batch: Batch,
           prompt_d: Tensor | None = None,
           prompt_p: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Encode a collated batch into (r_d, r_p), each (B, c)."""
    n_heads = backbone.config.n_heads
    r_d = encode_tower(batch.diag_ids, batch.diag_mask, backbone.e_d,
                       backbone.layers_d, n_heads, prompt_d)
    r_p = encode_tower(batch.proc_ids, batch.proc_mask, backbone.e_p,
                       backbone.layers_p, n_heads, prompt_p)
    return r_d, r_p
