"""Anomaly-Aware Fusion: the gated multimodal head.

Consumes one latent vector and one anomaly trace per modality. Each per-step
absolute reconstruction residual is mean-pooled into K bins before entering
the gates (feeding six raw 3840-length traces into a dense layer would be
impractical). For each modality m:

    h_m  = Tanh(W_m Z_m)                              internal feature, R^8
    Z'_m = sigmoid(W_Zm [Z_1..Z_M, pooled A_1..A_M])  gate, R^8
    h    = sum_m Z'_m * h_m                           elementwise
    yhat = sigmoid(W_c h + b_c)

Gates are independent sigmoids per modality, each conditioned on all latents
and all pooled anomaly traces. Absent modalities occupy zero-filled slots so
weight shapes stay static.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorgrad as tg
from .tensorgrad import Tensor

MODALITIES = ("ECG", "EEG", "EOG", "SPO2", "CO2", "RESP")


@dataclass
class AAFConfig:
    modalities: tuple = MODALITIES
    d_latent: int = 32
    d_gate_hidden: int = 8
    anomaly_pool_bins: int = 16

    @property
    def num_modalities(self) -> int:
        return len(self.modalities)

    @property
    def gate_input_dim(self) -> int:
        return self.num_modalities * (self.d_latent + self.anomaly_pool_bins)

    def to_dict(self) -> dict:
        return {"modalities": list(self.modalities), "d_latent": self.d_latent,
                "d_gate_hidden": self.d_gate_hidden,
                "anomaly_pool_bins": self.anomaly_pool_bins}

    @classmethod
    def from_dict(cls, d: dict) -> "AAFConfig":
        d = dict(d)
        d["modalities"] = tuple(d.get("modalities", MODALITIES))
        return cls(**{k: d[k] for k in ("modalities", "d_latent", "d_gate_hidden",
                                        "anomaly_pool_bins") if k in d})


def anomaly_trace(x: np.ndarray, xhat: np.ndarray) -> np.ndarray:
    """Per-step absolute distance |x - xhat| between a signal and its reconstruction."""
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ValueError(f"trace operands differ in shape: {x.shape} vs {xhat.shape}")
    return np.abs(x - xhat)


def pool_anomaly(trace: np.ndarray, bins: int) -> np.ndarray:
    """Mean of each of ``bins`` contiguous equal segments (last axis)."""
    trace = np.asarray(trace, dtype=np.float64)
    T = trace.shape[-1]
    if T % bins:
        raise ValueError(f"pool bins {bins} must divide trace length {T}")
    return trace.reshape(*trace.shape[:-1], bins, T // bins).mean(axis=-1)


@dataclass
class LatentBlock:
    """Per-epoch fusion inputs: M latent slots + M anomaly traces.

    Absent modalities keep zero-filled slots; ``present`` records which slots
    carry a real signal.
    """

    latents: np.ndarray  # (M, d_latent)
    traces: np.ndarray   # (M, T)
    present: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.latents.shape[0] != self.traces.shape[0]:
            raise ValueError("latent and trace slot counts differ")
        if (self.traces < 0).any():
            raise ValueError("anomaly traces must be non-negative")
        if self.present is None:
            self.present = np.ones(self.latents.shape[0], dtype=bool)

    def pooled(self, bins: int) -> np.ndarray:
        return pool_anomaly(self.traces, bins)


class AAFModel:
    """Gated fusion head; parameters live under the ``aaf/`` namespace."""

    def __init__(self, cfg: AAFConfig, params: dict):
        self.cfg = cfg
        self.params = params

    @classmethod
    def create(cls, cfg: AAFConfig, rng: np.random.Generator) -> "AAFModel":
        def glorot(fan_in, fan_out):
            return rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / (fan_in + fan_out))

        p: dict[str, Tensor] = {}
        for m in cfg.modalities:
            p[f"aaf/feature/{m}/w"] = Tensor(glorot(cfg.d_latent, cfg.d_gate_hidden),
                                             requires_grad=True)
            p[f"aaf/gate/{m}/w"] = Tensor(glorot(cfg.gate_input_dim, cfg.d_gate_hidden),
                                          requires_grad=True)
        p["aaf/out/w"] = Tensor(glorot(cfg.d_gate_hidden, 1), requires_grad=True)
        p["aaf/out/b"] = Tensor(np.zeros(1), requires_grad=True)
        return cls(cfg, p)

    @classmethod
    def from_params(cls, cfg: AAFConfig, flat: dict) -> "AAFModel":
        subset = {k: v for k, v in flat.items() if k.startswith("aaf/")}
        if not subset:
            raise KeyError("no parameters under namespace 'aaf/'")
        return cls(cfg, subset)

    def forward(self, latents, pooled_traces) -> Tensor:
        """Fuse per-modality latents and pooled anomaly traces into P(apnea).

        ``latents``: (M, d_latent) or (B, M, d_latent); ``pooled_traces``
        likewise with K bins. Returns probabilities of shape (B,).
        """
        cfg = self.cfg
        z = np.asarray(latents.data if isinstance(latents, Tensor) else latents,
                       dtype=np.float64)
        a = np.asarray(pooled_traces.data if isinstance(pooled_traces, Tensor)
                       else pooled_traces, dtype=np.float64)
        if z.ndim == 2:
            z, a = z[None], a[None]
        if z.shape[1] != cfg.num_modalities or a.shape[1] != cfg.num_modalities:
            raise ValueError(
                f"expected {cfg.num_modalities} modality slots, got {z.shape[1]}/{a.shape[1]}")

        gate_in = Tensor(np.concatenate(
            [z.reshape(z.shape[0], -1), a.reshape(a.shape[0], -1)], axis=-1))
        h = None
        for i, m in enumerate(cfg.modalities):
            h_m = tg.tanh(Tensor(z[:, i]) @ self.params[f"aaf/feature/{m}/w"])
            gate_m = tg.sigmoid(gate_in @ self.params[f"aaf/gate/{m}/w"])
            contrib = tg.mul(gate_m, h_m)
            h = contrib if h is None else h + contrib
        logits = h @ self.params["aaf/out/w"] + self.params["aaf/out/b"]
        return tg.reshape(tg.sigmoid(logits), (-1,))

    def gate_values(self, latents, pooled_traces) -> np.ndarray:
        """Per-modality gate activations (B, M, d_gate_hidden), for inspection."""
        cfg = self.cfg
        z = np.asarray(latents, dtype=np.float64)
        a = np.asarray(pooled_traces, dtype=np.float64)
        if z.ndim == 2:
            z, a = z[None], a[None]
        from scipy.special import expit

        gate_in = np.concatenate(
            [z.reshape(z.shape[0], -1), a.reshape(a.shape[0], -1)], axis=-1)
        return np.stack(
            [expit(gate_in @ self.params[f"aaf/gate/{m}/w"].data)
             for m in cfg.modalities], axis=1)

    def trainable(self) -> dict:
        return {k: v for k, v in self.params.items() if v.requires_grad}


def fuse_block(model: AAFModel, block: LatentBlock) -> float:
    """Single-epoch convenience wrapper around ``AAFModel.forward``."""
    probs = model.forward(block.latents, block.pooled(model.cfg.anomaly_pool_bins))
    return float(probs.data[0])
