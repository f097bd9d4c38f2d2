"""Finite-difference checks for every autodiff primitive and a composed stage-1 KEM."""
from __future__ import annotations

import numpy as np

from . import diffkernel as dk
from .fieldgen import GroundTruthBundle

TOLERANCE = 1e-4


def _t(rng, *shape, low=None):
    x = rng.normal(size=shape)
    if low is not None:
        x = rng.uniform(low, 1 - low, size=shape)
    return dk.Tensor(x)


def _scalar(build, rng):
    """Wrap ``build()`` (a non-scalar tensor) into a scalar via a frozen random target."""
    probe = build()
    target = rng.normal(size=probe.shape)
    return lambda: dk.mse_loss(build(), target)


def _case_conv2d(rng):
    k = int(rng.choice([1, 3, 5]))
    x, w, b = _t(rng, 2, 3, 5, 6), _t(rng, 4, 3, k, k), _t(rng, 4)
    return _scalar(lambda: dk.conv2d(x, w, b), rng), [x, w, b]


def _case_conv1d(rng):
    x, w, b = _t(rng, 2, 3, 7), _t(rng, 4, 3, 3), _t(rng, 4)
    return _scalar(lambda: dk.conv1d(x, w, b), rng), [x, w, b]


def _case_maxpool2(rng):
    # distinct values keep the argmax away from ties
    x = dk.Tensor(rng.permutation(2 * 3 * 6 * 8).reshape(2, 3, 6, 8) / 10.0 + rng.normal(size=(2, 3, 6, 8)) * 1e-3)
    return _scalar(lambda: dk.maxpool2(x), rng), [x]


def _case_upsample(rng):
    x = _t(rng, 2, 3, 4, 5)
    return _scalar(lambda: dk.upsample_bilinear2(x), rng), [x]


def _case_relu(rng):
    # keep inputs clear of the kink
    x = rng.normal(size=(3, 4, 5))
    x = dk.Tensor(np.where(np.abs(x) < 0.05, 0.05 * np.sign(x) + x, x))
    return _scalar(lambda: dk.relu(x), rng), [x]


def _case_sigmoid(rng):
    x = _t(rng, 3, 4, 5)
    return _scalar(lambda: dk.sigmoid(x), rng), [x]


def _case_add(rng):
    a, b = _t(rng, 3, 4), _t(rng, 3, 4)
    return _scalar(lambda: dk.add(a, b), rng), [a, b]


def _case_scale(rng):
    x = _t(rng, 3, 4)
    f = float(rng.normal())
    return _scalar(lambda: dk.scale(x, f), rng), [x]


def _case_reshape(rng):
    x = _t(rng, 2, 3, 4)
    return _scalar(lambda: dk.reshape(x, (6, 4)), rng), [x]


def _case_concat(rng):
    a, b = _t(rng, 2, 1, 3, 4), _t(rng, 2, 3, 3, 4)
    return _scalar(lambda: dk.concat_channels([a, b]), rng), [a, b]


def _case_dense(rng):
    x, w, b = _t(rng, 5, 6), _t(rng, 3, 6), _t(rng, 3)
    return _scalar(lambda: dk.dense(x, w, b), rng), [x, w, b]


def _case_mse(rng):
    x = _t(rng, 3, 4, 5)
    target = rng.normal(size=(3, 4, 5))
    return (lambda: dk.mse_loss(x, target)), [x]


def _case_bce(rng):
    p = _t(rng, 6, 1, low=0.05)
    y = rng.integers(0, 2, size=(6, 1)).astype(np.float64)
    return (lambda: dk.bce_loss(p, y)), [p]


def _case_kem_stage1(rng):
    from .netkem import BackboneConfig, KemConfig, KemModel, kem_loss
    seed = int(rng.integers(1 << 31))
    model = KemModel(BackboneConfig(width_scale=0.0625), KemConfig(stages=1, width_scale=0.03125),
                     seed=seed, dtype=np.float64)
    # zero-initialised biases put pre-activations of dead channels exactly on the
    # relu kink, where no derivative exists; jitter them off it
    for prm in model.params():
        prm.data += rng.normal(scale=0.1, size=prm.data.shape)
    image = _t(rng, 3, 8, 8)
    # targets close to the current output keep the loss small next to its
    # gradient, so central differences are not swamped by round-off
    with dk.no_grad():
        out = model(image)[1][0]
    gt = GroundTruthBundle([out.plant.data[0] + rng.normal(scale=0.1, size=(4, 4))],
                           [out.line.data[0] + rng.normal(scale=0.1, size=(4, 4))],
                           out.vectors.data + rng.normal(scale=0.1, size=(2, 4, 4)))
    tensors = [image] + model.params()
    return (lambda: kem_loss(model(image)[1], gt)), tensors


PRIMITIVES = {
    "conv2d": _case_conv2d,
    "conv1d": _case_conv1d,
    "maxpool2": _case_maxpool2,
    "upsample_bilinear2": _case_upsample,
    "relu": _case_relu,
    "sigmoid": _case_sigmoid,
    "add": _case_add,
    "scale": _case_scale,
    "reshape": _case_reshape,
    "concat_channels": _case_concat,
    "dense": _case_dense,
    "mse_loss": _case_mse,
    "bce_loss": _case_bce,
}
COMPOSED = {"kem_stage1": _case_kem_stage1}


def run_suite(seeds=range(20), names=None, max_entries=12, eps=1e-6) -> dict:
    """Max relative gradient error per case over ``seeds``."""
    cases = {**PRIMITIVES, **COMPOSED}
    names = list(cases) if names is None else list(names)
    report = {}
    for name in names:
        worst = 0.0
        for seed in seeds:
            rng = np.random.default_rng([seed, 2024])
            fn, tensors = cases[name](rng)
            worst = max(worst, dk.grad_check(fn, tensors, eps=eps, max_entries=max_entries, rng=rng))
        report[name] = worst
    return report


def failures(report: dict, tol: float = TOLERANCE) -> list:
    return [name for name, err in report.items() if not err < tol]
