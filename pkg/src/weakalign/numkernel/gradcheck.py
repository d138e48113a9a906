"""Central finite-difference oracle for gradient verification.

The oracle only ever calls the forward path, so it stays independent of the
backward implementation it is used to check.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    """|a-b| / max(|a|, |b|, floor).

    The floor keeps central-difference roundoff (absolute noise around 1e-11
    at eps=1e-5 in double precision) from dominating components whose true
    gradient is itself near zero.
    """
    return abs(a - b) / max(abs(a), abs(b), floor)


def finite_difference(loss_fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of `loss_fn()` w.r.t. every element of
    `param`, perturbing in place. `loss_fn` must be a pure function of the
    current parameter values."""
    flat = param.data.reshape(-1)
    grad = np.zeros_like(flat, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = loss_fn().item()
        flat[i] = orig - eps
        down = loss_fn().item()
        flat[i] = orig
        grad[i] = (up - down) / (2.0 * eps)
    return grad.reshape(param.shape)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-5,
) -> dict[str, float]:
    """Max relative error per named parameter, analytic vs central differences.

    The analytic side is always the full backward pass. With `sample` set,
    only that many components per parameter are finite-differenced (chosen
    at random, always including the component with the largest analytic
    gradient); parameters smaller than the sample are covered exhaustively.

    `floor` bounds the error denominator from below: with a loss of
    magnitude L the oracle's own roundoff is about ulp(L)/(2*eps), so
    components whose true gradient sits near that resolution cannot be
    compared in purely relative terms.
    """
    loss = loss_fn()
    for p in params.values():
        p.grad = None
    loss.backward()
    analytic = {}
    for name, p in params.items():
        if p.grad is None:
            analytic[name] = np.zeros(p.shape, dtype=np.float64)
        else:
            analytic[name] = np.array(p.grad, dtype=np.float64)

    report: dict[str, float] = {}
    for name in sorted(params):
        p = params[name]
        flat = p.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        if sample is not None and sample < flat.size:
            if rng is None:
                rng = np.random.default_rng(0)
            idx = set(int(i) for i in rng.choice(flat.size, size=sample, replace=False))
            idx.add(int(np.argmax(np.abs(a_flat))))
            idx = sorted(idx)
        else:
            idx = range(flat.size)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
            fd = (up - down) / (2.0 * eps)
            worst = max(worst, relative_error(float(a_flat[i]), fd, floor=floor))
        report[name] = worst
    return report
