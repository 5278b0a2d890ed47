"""Central finite-difference gradient checking.

Runs in float64: float32 differences are too noisy for the 1e-6
tolerances this project asserts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Parameter, Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    per_input: list = field(default_factory=list)  # (index, rel_err) for checked inputs
    skipped: list = field(default_factory=list)  # indices of frozen/non-grad inputs

    @property
    def passed(self):
        return self.max_rel_err <= self.tol


def _rel_err(a, n):
    return abs(a - n) / max(1.0, abs(a), abs(n))


def grad_check(f, inputs, eps=1e-6, tol=1e-6, max_coords_per_input=None, coord_seed=0):
    """Compare analytic gradients of ``f(*inputs)`` against central
    finite differences, coordinate by coordinate.

    ``inputs`` may mix Tensors and Parameters; frozen parameters and
    tensors without requires_grad are excluded from the report. With
    ``max_coords_per_input`` set, a seeded subset of coordinates is
    checked per input (for large models).
    """
    tensors = []
    check_idx = []
    skipped = []
    for i, x in enumerate(inputs):
        if isinstance(x, Parameter):
            t = Tensor(x.value.data.astype(np.float64), requires_grad=not x.frozen)
            (skipped if x.frozen else check_idx).append(i)
        else:
            t = Tensor(x.data.astype(np.float64), requires_grad=x.requires_grad)
            (check_idx if x.requires_grad else skipped).append(i)
        tensors.append(t)

    loss = f(*tensors)
    loss.backward()
    analytic = {i: np.array(tensors[i].grad) for i in check_idx}

    coord_rng = np.random.default_rng(coord_seed)
    report = GradCheckReport(max_rel_err=0.0, tol=tol, skipped=skipped)
    for i in check_idx:
        t = tensors[i]
        flat = t.data.reshape(-1)
        if max_coords_per_input is not None and flat.size > max_coords_per_input:
            coords = coord_rng.choice(flat.size, size=max_coords_per_input, replace=False)
        else:
            coords = range(flat.size)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            f_plus = float(f(*tensors).data)
            flat[c] = orig - eps
            f_minus = float(f(*tensors).data)
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            worst = max(worst, _rel_err(analytic[i].reshape(-1)[c], numeric))
        report.per_input.append((i, worst))
        report.max_rel_err = max(report.max_rel_err, worst)
    return report


def model_grad_check(model, images, loss_fn, eps=1e-6, tol=1e-5,
                     max_coords_per_input=8, coord_seed=0):
    """End-to-end finite-difference check of a model in float64.

    ``loss_fn(model, images_tensor)`` must return a scalar Tensor. Every
    unfrozen parameter plus the image input is perturbed; the model's
    parameters are restored afterwards.
    """
    params = [p for _, p in model.named_parameters() if not p.frozen]
    originals = [p.value for p in params]
    images = Tensor(np.asarray(images, dtype=np.float64), requires_grad=True)

    def f(img, *param_tensors):
        for p, t in zip(params, param_tensors):
            p.value = t
        return loss_fn(model, img)

    try:
        return grad_check(f, [images, *originals], eps=eps, tol=tol,
                          max_coords_per_input=max_coords_per_input,
                          coord_seed=coord_seed)
    finally:
        for p, v in zip(params, originals):
            p.value = v

