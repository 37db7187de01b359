"""Pre-norm transformer blocks and the per-modality encoder/decoder/classifier.

One ``ModalityModel`` owns every parameter for a single signal modality under
the checkpoint namespace ``modality/<m>/...``: a linear patch embedding with
learned positional embeddings, an encoder and a decoder stack of identical
pre-norm blocks, a per-token output projection back to signal space, and a
small sigmoid classifier on the latent vector.

Block composition (eval mode):

    X'  = LayerNorm(X)
    X'' = LayerNorm(X' + MHSA(X'))
    out = X'' + ReLU(X'' W1 + b1) W2 + b2

with dropout applied to the MHSA and FCN outputs in training mode. Attention
uses separate key/query/value projections per head; scores are scaled by
1/sqrt(d_k) and heads are concatenated then projected.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorgrad as tg
from .tensorgrad import Tensor


@dataclass
class TransformerConfig:
    """Backbone dimensions; defaults are the full desk-scale model."""

    num_layers: int = 5
    num_heads: int = 4
    d_model: int = 32
    d_ffn_hidden: int = 16
    d_latent: int = 32
    d_cls_hidden: int = 16
    dropout_rate: float = 0.25
    patch_size: int = 128
    num_tokens: int = 30

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise ValueError("d_model must be divisible by num_heads")
        if self.d_latent != self.d_model:
            # decoder conditioning adds the latent straight onto positional slots
            raise ValueError("d_latent must equal d_model")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def d_k(self) -> int:
        return self.d_model // self.num_heads

    @property
    def epoch_samples(self) -> int:
        return self.patch_size * self.num_tokens

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "TransformerConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def _glorot(rng, fan_in, fan_out, shape=None):
    scale = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.standard_normal(shape or (fan_in, fan_out)) * scale


def _init_block(params, rng, prefix, cfg):
    d, dk, h = cfg.d_model, cfg.d_k, cfg.d_ffn_hidden
    params[f"{prefix}/ln1/gamma"] = Tensor(np.ones(d), requires_grad=True)
    params[f"{prefix}/ln1/beta"] = Tensor(np.zeros(d), requires_grad=True)
    for i in range(cfg.num_heads):
        for role in ("key", "query", "value"):
            params[f"{prefix}/attn/head{i}/w_{role}"] = Tensor(
                _glorot(rng, d, dk), requires_grad=True)
    params[f"{prefix}/attn/w_out"] = Tensor(_glorot(rng, d, d), requires_grad=True)
    params[f"{prefix}/ln2/gamma"] = Tensor(np.ones(d), requires_grad=True)
    params[f"{prefix}/ln2/beta"] = Tensor(np.zeros(d), requires_grad=True)
    params[f"{prefix}/ffn/w1"] = Tensor(_glorot(rng, d, h), requires_grad=True)
    params[f"{prefix}/ffn/b1"] = Tensor(np.zeros(h), requires_grad=True)
    params[f"{prefix}/ffn/w2"] = Tensor(_glorot(rng, h, d), requires_grad=True)
    params[f"{prefix}/ffn/b2"] = Tensor(np.zeros(d), requires_grad=True)


def mhsa(x: Tensor, heads, w_out: Tensor, d_k: int) -> Tensor:
    """Multi-head self-attention over token axis -2.

    ``heads`` is a sequence of (w_key, w_query, w_value) projections, each
    d_model x d_k; per-head outputs are concatenated and projected by w_out.
    """
    scale = 1.0 / np.sqrt(d_k)
    outs = []
    for w_key, w_query, w_value in heads:
        k = x @ w_key
        q = x @ w_query
        v = x @ w_value
        scores = (k @ tg.swap_last_axes(q)) * scale
        outs.append(tg.softmax(scores, axis=-1) @ v)
    return tg.concat(outs, axis=-1) @ w_out


def transformer_block(x: Tensor, params: dict, prefix: str, cfg: TransformerConfig,
                      training: bool = False, rng=None) -> Tensor:
    heads = [(params[f"{prefix}/attn/head{i}/w_key"],
              params[f"{prefix}/attn/head{i}/w_query"],
              params[f"{prefix}/attn/head{i}/w_value"])
             for i in range(cfg.num_heads)]
    xp = tg.layer_norm(x, params[f"{prefix}/ln1/gamma"], params[f"{prefix}/ln1/beta"])
    attn = mhsa(xp, heads, params[f"{prefix}/attn/w_out"], cfg.d_k)
    attn = tg.dropout(attn, cfg.dropout_rate, training, rng)
    xpp = tg.layer_norm(xp + attn, params[f"{prefix}/ln2/gamma"],
                        params[f"{prefix}/ln2/beta"])
    ffn = tg.relu(xpp @ params[f"{prefix}/ffn/w1"] + params[f"{prefix}/ffn/b1"])
    ffn = ffn @ params[f"{prefix}/ffn/w2"] + params[f"{prefix}/ffn/b2"]
    ffn = tg.dropout(ffn, cfg.dropout_rate, training, rng)
    return xpp + ffn


class ModalityModel:
    """Encoder, decoder, and unimodal classifier for one signal modality."""

    def __init__(self, cfg: TransformerConfig, modality: str, params: dict):
        self.cfg = cfg
        self.modality = modality
        self.params = params

    @property
    def namespace(self) -> str:
        return f"modality/{self.modality}"

    @classmethod
    def create(cls, cfg: TransformerConfig, modality: str,
               rng: np.random.Generator) -> "ModalityModel":
        ns = f"modality/{modality}"
        p: dict[str, Tensor] = {}
        p[f"{ns}/embed/w"] = Tensor(_glorot(rng, cfg.patch_size, cfg.d_model),
                                    requires_grad=True)
        p[f"{ns}/embed/b"] = Tensor(np.zeros(cfg.d_model), requires_grad=True)
        for side in ("encoder", "decoder"):
            p[f"{ns}/{side}/pos"] = Tensor(
                rng.standard_normal((cfg.num_tokens, cfg.d_model)) * 0.02,
                requires_grad=True)
            for i in range(cfg.num_layers):
                _init_block(p, rng, f"{ns}/{side}/block{i}", cfg)
        p[f"{ns}/encoder/proj/w"] = Tensor(_glorot(rng, cfg.d_model, cfg.d_latent),
                                           requires_grad=True)
        p[f"{ns}/encoder/proj/b"] = Tensor(np.zeros(cfg.d_latent), requires_grad=True)
        p[f"{ns}/decoder/out/w"] = Tensor(_glorot(rng, cfg.d_model, cfg.patch_size),
                                          requires_grad=True)
        p[f"{ns}/decoder/out/b"] = Tensor(np.zeros(cfg.patch_size), requires_grad=True)
        p[f"{ns}/classifier/w1"] = Tensor(_glorot(rng, cfg.d_latent, cfg.d_cls_hidden),
                                          requires_grad=True)
        p[f"{ns}/classifier/b1"] = Tensor(np.zeros(cfg.d_cls_hidden), requires_grad=True)
        p[f"{ns}/classifier/w2"] = Tensor(_glorot(rng, cfg.d_cls_hidden, 1),
                                          requires_grad=True)
        p[f"{ns}/classifier/b2"] = Tensor(np.zeros(1), requires_grad=True)
        # input standardization stats, set by the trainer, never trained
        p[f"{ns}/norm/mean"] = Tensor(np.zeros(1))
        p[f"{ns}/norm/std"] = Tensor(np.ones(1))
        return cls(cfg, modality, p)

    @classmethod
    def from_params(cls, cfg: TransformerConfig, modality: str,
                    flat: dict) -> "ModalityModel":
        ns = f"modality/{modality}/"
        subset = {k: v for k, v in flat.items() if k.startswith(ns)}
        if not subset:
            raise KeyError(f"no parameters under namespace {ns!r}")
        return cls(cfg, modality, subset)

    # -- input standardization -------------------------------------------
    def set_norm_stats(self, mean: float, std: float) -> None:
        ns = self.namespace
        self.params[f"{ns}/norm/mean"] = Tensor(np.array([float(mean)]))
        self.params[f"{ns}/norm/std"] = Tensor(np.array([max(float(std), 1e-8)]))

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        """Z-score raw epochs; all-zero (omitted) epochs stay all-zero."""
        raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
        ns = self.namespace
        mean = self.params[f"{ns}/norm/mean"].data[0]
        std = self.params[f"{ns}/norm/std"].data[0]
        out = (raw - mean) / std
        omitted = ~raw.any(axis=-1)
        if omitted.any():
            out[omitted] = 0.0
        return out

    # -- forward passes ---------------------------------------------------
    def _as_batch(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        T = self.cfg.epoch_samples
        if x.ndim == 1:
            x = tg.reshape(x, (1, -1))
        if x.shape[-1] != T:
            raise tg.ShapeError(f"epoch length {x.shape[-1]} != {T}")
        return x

    def patch_embed(self, x, training: bool = False, rng=None) -> Tensor:
        """Non-overlapping patches, linear projection, plus positional embedding."""
        cfg = self.cfg
        ns = self.namespace
        x = self._as_batch(x)
        tokens = tg.reshape(x, (-1, cfg.num_tokens, cfg.patch_size))
        tokens = tokens @ self.params[f"{ns}/embed/w"] + self.params[f"{ns}/embed/b"]
        return tokens + self.params[f"{ns}/encoder/pos"]

    def _run_blocks(self, tokens: Tensor, side: str, training: bool, rng) -> Tensor:
        for i in range(self.cfg.num_layers):
            tokens = transformer_block(tokens, self.params,
                                       f"{self.namespace}/{side}/block{i}",
                                       self.cfg, training, rng)
        return tokens

    def encode(self, x, training: bool = False, rng=None) -> Tensor:
        """Epoch (B, T) -> latent (B, d_latent)."""
        ns = self.namespace
        tokens = self.patch_embed(x, training, rng)
        tokens = self._run_blocks(tokens, "encoder", training, rng)
        pooled = tg.mean_pool(tokens, axis=-2)
        return pooled @ self.params[f"{ns}/encoder/proj/w"] + self.params[f"{ns}/encoder/proj/b"]

    def decode(self, z: Tensor, training: bool = False, rng=None) -> Tensor:
        """Latent (B, d_latent) -> reconstructed epoch (B, T)."""
        cfg = self.cfg
        ns = self.namespace
        if not isinstance(z, Tensor):
            z = Tensor(np.atleast_2d(np.asarray(z, dtype=np.float64)))
        tokens = tg.reshape(z, (-1, 1, cfg.d_latent)) + self.params[f"{ns}/decoder/pos"]
        tokens = self._run_blocks(tokens, "decoder", training, rng)
        patches = tokens @ self.params[f"{ns}/decoder/out/w"] + self.params[f"{ns}/decoder/out/b"]
        return tg.reshape(patches, (-1, cfg.epoch_samples))

    def autoencode(self, x, training: bool = False, rng=None):
        z = self.encode(x, training, rng)
        return z, self.decode(z, training, rng)

    def classify(self, z: Tensor, training: bool = False, rng=None) -> Tensor:
        """Latent (B, d_latent) -> apnea probability (B,), strictly in (0, 1)."""
        ns = self.namespace
        hidden = tg.relu(z @ self.params[f"{ns}/classifier/w1"] + self.params[f"{ns}/classifier/b1"])
        hidden = tg.dropout(hidden, self.cfg.dropout_rate, training, rng)
        logits = hidden @ self.params[f"{ns}/classifier/w2"] + self.params[f"{ns}/classifier/b2"]
        return tg.reshape(tg.sigmoid(logits), (-1,))

    def trainable(self) -> dict:
        return {k: v for k, v in self.params.items() if v.requires_grad}
