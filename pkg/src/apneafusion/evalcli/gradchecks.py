"""Gradient integrity harness behind the ``gradcheck`` CLI command.

Checks every differentiable op against central finite differences, then the
two end-to-end losses on a tiny configuration: the joint unimodal loss
(reconstruction MSE + BCE) through encoder/decoder/classifier, and the fusion
BCE through the gated head. Op tolerance 1e-5, full-model tolerance 1e-4,
all in 64-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensorgrad as tg
from ..aaf import AAFConfig, AAFModel
from ..nnblocks import ModalityModel, TransformerConfig
from ..tensorgrad import Tensor, check_gradients
from ..trainer import loss_bce, loss_reconstruction

OP_TOL = 1e-5
MODEL_TOL = 1e-4
FD_STEP = 1e-5

TINY_TRANSFORMER = dict(num_layers=1, num_heads=2, d_model=8, d_ffn_hidden=4,
                        d_latent=8, d_cls_hidden=4, dropout_rate=0.25,
                        patch_size=16, num_tokens=4)
TINY_AAF = dict(d_latent=8, d_gate_hidden=4, anomaly_pool_bins=4)


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _op_cases():
    def weighted(build):
        def case(x, w):
            return tg.sum_(tg.mul(build(x), w))
        return case

    return {
        "add": weighted(lambda x: tg.add(x, tg.tanh(x))),
        "mul": weighted(lambda x: tg.mul(x, x)),
        "relu": weighted(tg.relu),
        "tanh": weighted(tg.tanh),
        "sigmoid": weighted(tg.sigmoid),
        "abs": weighted(tg.abs_),
        "log": weighted(lambda x: tg.log(tg.add(tg.mul(x, x), Tensor(0.5)))),
        "clip": weighted(lambda x: tg.clip(x, -0.8, 0.8)),
        "softmax": weighted(lambda x: tg.softmax(x, axis=-1)),
        "concat": lambda x, w: tg.sum_(tg.mul(tg.concat([x, tg.sigmoid(x)], axis=-1),
                                              tg.concat([w, w], axis=-1))),
        "mean_pool": lambda x, w: tg.sum_(tg.mul(tg.mean_pool(x, axis=-2),
                                                 tg.mean(w, axis=-2))),
        "matmul": lambda x, w: tg.sum_(tg.mul(x @ tg.swap_last_axes(x), w @ tg.swap_last_axes(w))),
        "layer_norm": lambda x, w: tg.sum_(tg.mul(
            tg.layer_norm(x, Tensor(np.ones(x.shape[-1]), requires_grad=True),
                          Tensor(np.zeros(x.shape[-1]), requires_grad=True)), w)),
        "dropout": lambda x, w: tg.sum_(tg.mul(
            tg.dropout(x, 0.25, training=True, rng=np.random.default_rng(13)), w)),
    }


def check_ops(num_tensors: int = 5) -> list:
    results = []
    for name, case in _op_cases().items():
        worst = 0.0
        for seed in range(num_tensors):
            rng = np.random.default_rng(seed)
            shape = (int(rng.integers(2, 4)), int(rng.integers(3, 6)))
            x = Tensor(rng.standard_normal(shape), requires_grad=True)
            w = Tensor(rng.standard_normal(shape))
            err = check_gradients(lambda: case(x, w), {"x": x}, FD_STEP)
            worst = max(worst, err)
        results.append(CheckResult(f"op/{name}", worst, OP_TOL))
    return results


def check_unimodal_loss() -> CheckResult:
    """Joint alpha*MSE + beta*BCE through the tiny encoder/decoder/classifier."""
    cfg = TransformerConfig(**TINY_TRANSFORMER)
    model = ModalityModel.create(cfg, "ECG", np.random.default_rng(0))
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, cfg.epoch_samples))
    y = np.array([0.0, 1.0, 1.0])

    def build():
        z = model.encode(x)
        xhat = model.decode(z)
        yhat = model.classify(z)
        return 1.0 * loss_reconstruction(x, xhat) + 1.0 * loss_bce(y, yhat)

    err = check_gradients(build, model.trainable(), FD_STEP)
    return CheckResult("loss/unimodal_joint", err, MODEL_TOL)


def check_fusion_loss() -> CheckResult:
    """Fusion BCE through all gates and the output layer."""
    cfg = AAFConfig(**TINY_AAF)
    model = AAFModel.create(cfg, np.random.default_rng(2))
    rng = np.random.default_rng(3)
    z = rng.standard_normal((4, cfg.num_modalities, cfg.d_latent))
    a = np.abs(rng.standard_normal((4, cfg.num_modalities, cfg.anomaly_pool_bins)))
    y = np.array([0.0, 1.0, 0.0, 1.0])

    def build():
        return loss_bce(y, model.forward(z, a))

    err = check_gradients(build, model.trainable(), FD_STEP)
    return CheckResult("loss/fusion_bce", err, MODEL_TOL)


def run_gradcheck() -> list:
    return check_ops() + [check_unimodal_loss(), check_fusion_loss()]
