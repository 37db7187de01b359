"""Two-step training: unimodal pretraining, then gated fusion on frozen parts.

Step 1 jointly minimizes alpha_m * reconstruction MSE + beta_m * BCE per
modality with Adam. Step 2 runs the frozen encoders/decoders in eval mode to
produce latents and pooled anomaly traces, then trains only the fusion head
under BCE. Every random draw (init, batch order, dropout) is keyed on the
config seed, so training is byte-reproducible.

Model inputs are per-modality z-scored with stats from the training split;
all-zero raw epochs (omitted channels) map to all-zero inputs and are skipped
during that modality's pretraining.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorgrad as tg
from .aaf import AAFConfig, AAFModel, anomaly_trace, pool_anomaly
from .checkpoint import load_checkpoint, save_checkpoint
from .dataio import DERIVED_AMP, DERIVED_RR
from .nnblocks import ModalityModel, TransformerConfig
from .rng import make_rng
from .sigprep import EPOCH_SAMPLES, MODALITIES
from .tensorgrad import Tensor

BCE_EPS = 1e-7


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the offending stage for diagnosis."""


@dataclass
class TrainConfig:
    """Loss weights, optimizer settings, and model dimensions for a run."""

    alpha: object = 1.0              # reconstruction weight, scalar or {modality: w}
    beta: object = 1.0               # classification weight, scalar or {modality: w}
    batch_size: int = 32
    pretrain_epochs: int = 20
    fusion_epochs: int = 20
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-7
    l2_lambda: float = 1e-3
    dropout_rate: float = 0.25
    grad_clip_norm: float = 0.0      # 0 disables the safety rail
    seed: int = 0
    folds: int = 5
    ecg_input: str = "waveform"      # waveform | rr | amplitude
    model: TransformerConfig = field(default_factory=TransformerConfig)
    anomaly_pool_bins: int = 16
    d_gate_hidden: int = 8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for w in (self.alpha, self.beta):
            values = w.values() if isinstance(w, dict) else [w]
            if any(v < 0 for v in values):
                raise ValueError("loss weights must be non-negative")
        if self.ecg_input not in ("waveform", "rr", "amplitude"):
            raise ValueError(f"unknown ecg_input {self.ecg_input!r}")
        if isinstance(self.model, dict):
            self.model = TransformerConfig.from_dict(self.model)
        self.model = dataclasses.replace(self.model, dropout_rate=self.dropout_rate)

    def weight_for(self, weights, modality: str) -> float:
        if isinstance(weights, dict):
            return float(weights.get(modality, 1.0))
        return float(weights)

    def aaf_config(self) -> AAFConfig:
        return AAFConfig(modalities=MODALITIES, d_latent=self.model.d_latent,
                         d_gate_hidden=self.d_gate_hidden,
                         anomaly_pool_bins=self.anomaly_pool_bins)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "model" in d:
            d["model"] = TransformerConfig.from_dict(d["model"])
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_reconstruction(x, xhat: Tensor) -> Tensor:
    """Sum of squared error over epochs and time, divided by N*T."""
    x = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(x))
    if x.shape != xhat.shape:
        raise tg.ShapeError(f"reconstruction shapes differ: {x.shape} vs {xhat.shape}")
    diff = xhat - x
    return tg.mean(tg.mul(diff, diff))


def loss_bce(y, yhat: Tensor) -> Tensor:
    """Mean binary cross entropy with [eps, 1-eps] clamping."""
    y = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=np.float64))
    p = tg.clip(yhat, BCE_EPS, 1.0 - BCE_EPS)
    return tg.mean(-(y * tg.log(p) + (1.0 - y) * tg.log(1.0 - p)))


# ---------------------------------------------------------------------------
# epoch assembly
# ---------------------------------------------------------------------------

def modality_matrix(bundles, modality: str, ecg_input: str = "waveform") -> np.ndarray:
    """Stack raw epochs of one modality across bundles into (n, 3840) float32."""
    rows = []
    for b in bundles:
        if modality == "ECG" and ecg_input != "waveform":
            key = DERIVED_RR if ecg_input == "rr" else DERIVED_AMP
            ch = b.derived[key]
        else:
            ch = b.channels[modality]
        n = len(b.labels)
        rows.append(ch.samples[:n * EPOCH_SAMPLES]
                    .reshape(n, EPOCH_SAMPLES).astype(np.float32))
    return np.concatenate(rows)


def labels_vector(bundles) -> np.ndarray:
    return np.concatenate([b.labels for b in bundles]).astype(np.float64)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# ---------------------------------------------------------------------------
# step 1: unimodal pretraining
# ---------------------------------------------------------------------------

def pretrain_unimodal(bundles, config: TrainConfig, modalities=MODALITIES):
    """Train one autoencoder+classifier per modality; returns (models, history).

    History rows: {"epoch", "modality", "loss_recon", "loss_cls"} with
    training-split running means per epoch.
    """
    if not bundles:
        raise ValueError("empty training dataset")
    labels = labels_vector(bundles)
    models: dict[str, ModalityModel] = {}
    history: list[dict] = []

    for modality in modalities:
        raw = modality_matrix(bundles, modality, config.ecg_input)
        present = raw.any(axis=1)
        if not present.any():
            raise ValueError(f"no non-omitted epochs for modality {modality}")
        model = ModalityModel.create(config.model, modality,
                                     make_rng(config.seed, "init", modality))
        stats = raw[present].astype(np.float64)
        model.set_norm_stats(stats.mean(), stats.std())
        models[modality] = model

        alpha = config.weight_for(config.alpha, modality)
        beta = config.weight_for(config.beta, modality)
        params = model.trainable()
        state = tg.AdamState()
        idx_present = np.flatnonzero(present)

        for epoch in range(config.pretrain_epochs):
            order_rng = make_rng(config.seed, "pretrain-order", modality, epoch)
            recon_sum = cls_sum = 0.0
            n_batches = 0
            for step, batch in enumerate(_batches(len(idx_present),
                                                  config.batch_size, order_rng)):
                bidx = idx_present[batch]
                xb = model.normalize(raw[bidx])
                yb = labels[bidx]
                drop_rng = make_rng(config.seed, "dropout", modality, epoch, step)
                try:
                    z = model.encode(xb, training=True, rng=drop_rng)
                    xhat = model.decode(z, training=True, rng=drop_rng)
                    yhat = model.classify(z, training=True, rng=drop_rng)
                    l_recon = loss_reconstruction(xb, xhat)
                    l_cls = loss_bce(yb, yhat)
                    loss = alpha * l_recon + beta * l_cls
                    tg.zero_grads(params)
                    loss.backward()
                except tg.NonFiniteError as exc:
                    raise TrainingDiverged(
                        f"{modality} pretraining diverged at epoch {epoch} "
                        f"step {step}: {exc}") from exc
                if config.grad_clip_norm:
                    tg.clip_global_norm(params, config.grad_clip_norm)
                tg.adam_step(params, state, lr=config.lr, beta1=config.adam_beta1,
                             beta2=config.adam_beta2, eps=config.adam_eps,
                             weight_decay_lambda=config.l2_lambda)
                recon_sum += l_recon.item()
                cls_sum += l_cls.item()
                n_batches += 1
            history.append({"epoch": epoch, "modality": modality,
                            "loss_recon": recon_sum / n_batches,
                            "loss_cls": cls_sum / n_batches})
    return models, history


# ---------------------------------------------------------------------------
# step 2: fusion training on frozen parts
# ---------------------------------------------------------------------------

def fusion_inputs(models: dict, bundles, config: TrainConfig,
                  eval_batch: int = 256):
    """Frozen eval-mode forward: latents (n, M, d) and pooled traces (n, M, K).

    Also returns labels (n,). Deterministic: no dropout, no rng.
    """
    labels = labels_vector(bundles)
    n = len(labels)
    cfg = config.model
    Z = np.zeros((n, len(MODALITIES), cfg.d_latent))
    A = np.zeros((n, len(MODALITIES), config.anomaly_pool_bins))
    for mi, modality in enumerate(MODALITIES):
        model = models[modality]
        raw = modality_matrix(bundles, modality, config.ecg_input)
        for start in range(0, n, eval_batch):
            xb = model.normalize(raw[start:start + eval_batch])
            z, xhat = model.autoencode(xb)
            Z[start:start + eval_batch, mi] = z.data
            trace = anomaly_trace(xb, xhat.data)
            A[start:start + eval_batch, mi] = pool_anomaly(trace, config.anomaly_pool_bins)
    return Z, A, labels


def train_fusion(bundles, models: dict, config: TrainConfig):
    """Train the fusion head only; encoder/decoder/classifier stay untouched.

    Returns (aaf_model, history) with per-epoch BCE rows.
    """
    missing = [m for m in MODALITIES if m not in models]
    if missing:
        raise ValueError(f"missing pretrained checkpoints for {missing}")
    frozen_before = {k: t.data.tobytes() for m in MODALITIES
                     for k, t in models[m].params.items()}

    Z, A, labels = fusion_inputs(models, bundles, config)
    aaf_model = AAFModel.create(config.aaf_config(), make_rng(config.seed, "init", "aaf"))
    params = aaf_model.trainable()
    state = tg.AdamState()
    history = []
    for epoch in range(config.fusion_epochs):
        order_rng = make_rng(config.seed, "fusion-order", epoch)
        total = 0.0
        n_batches = 0
        for batch in _batches(len(labels), config.batch_size, order_rng):
            try:
                yhat = aaf_model.forward(Z[batch], A[batch])
                loss = loss_bce(labels[batch], yhat)
                tg.zero_grads(params)
                loss.backward()
            except tg.NonFiniteError as exc:
                raise TrainingDiverged(
                    f"fusion training diverged at epoch {epoch}: {exc}") from exc
            if config.grad_clip_norm:
                tg.clip_global_norm(params, config.grad_clip_norm)
            tg.adam_step(params, state, lr=config.lr, beta1=config.adam_beta1,
                         beta2=config.adam_beta2, eps=config.adam_eps,
                         weight_decay_lambda=config.l2_lambda)
            total += loss.item()
            n_batches += 1
        history.append({"epoch": epoch, "loss_fusion": total / n_batches})

    frozen_after = {k: t.data.tobytes() for m in MODALITIES
                    for k, t in models[m].params.items()}
    if frozen_before != frozen_after:
        changed = [k for k in frozen_before if frozen_before[k] != frozen_after[k]]
        raise RuntimeError(f"freeze contract violated for {changed[:5]}")
    return aaf_model, history


def score_epochs(models: dict, aaf_model: AAFModel, bundles,
                 config: TrainConfig):
    """Fused apnea probabilities for every epoch; returns (scores, labels)."""
    Z, A, labels = fusion_inputs(models, bundles, config)
    return aaf_model.forward(Z, A).data, labels


# ---------------------------------------------------------------------------
# checkpoints and logs
# ---------------------------------------------------------------------------

def frozen_names(models: dict) -> set:
    return {k for m in models.values() for k in m.params}

def save_pretrained(ckpt_dir, models: dict, config: TrainConfig,
                    history=None) -> None:
    params = {}
    for m in models.values():
        params.update(m.params)
    meta = {"stage": "pretrained", "config": config.to_dict(),
            "epochs_trained": config.pretrain_epochs}
    save_checkpoint(ckpt_dir, params, frozen=set(), meta=meta)


def save_fused(ckpt_dir, models: dict, aaf_model: AAFModel,
               config: TrainConfig) -> None:
    params = {}
    for m in models.values():
        params.update(m.params)
    frozen = frozen_names(models)
    params.update(aaf_model.params)
    meta = {"stage": "fused", "config": config.to_dict(),
            "epochs_trained": config.fusion_epochs}
    save_checkpoint(ckpt_dir, params, frozen=frozen, meta=meta)


def load_models(ckpt_dir, trainable: bool = False):
    """Rebuild modality models (and the fusion head if present) from disk."""
    params, _, meta = load_checkpoint(ckpt_dir, requires_grad=trainable)
    config = TrainConfig.from_dict(meta["config"])
    models = {m: ModalityModel.from_params(config.model, m, params)
              for m in MODALITIES}
    aaf_model = None
    if any(k.startswith("aaf/") for k in params):
        aaf_model = AAFModel.from_params(config.aaf_config(), params)
    return models, aaf_model, config


def write_training_log(path, pretrain_history, fusion_history) -> None:
    """One CSV per run: epoch, split, per-modality losses, fusion loss."""
    recon_cols = [f"loss_recon_{m}" for m in MODALITIES]
    cls_cols = [f"loss_cls_{m}" for m in MODALITIES]
    by_epoch: dict[int, dict] = {}
    for row in pretrain_history:
        entry = by_epoch.setdefault(row["epoch"], {})
        entry[f"loss_recon_{row['modality']}"] = row["loss_recon"]
        entry[f"loss_cls_{row['modality']}"] = row["loss_cls"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "split"] + recon_cols + cls_cols + ["loss_fusion"])
        for epoch in sorted(by_epoch):
            entry = by_epoch[epoch]
            writer.writerow([epoch, "train"]
                            + [f"{entry.get(c, '')}" for c in recon_cols]
                            + [f"{entry.get(c, '')}" for c in cls_cols] + [""])
        for row in fusion_history:
            writer.writerow([row["epoch"], "train"] + [""] * 12
                            + [f"{row['loss_fusion']}"])
