"""Finite-difference gradient checking for layer chains.

Everything runs in float64 here regardless of the working dtype, so the
check isolates derivation mistakes from float32 roundoff. Keep instances
small (the spec of this harness is <= 1e4 entries per tensor).
"""

from __future__ import annotations

import numpy as np

from .network import Network, ParameterSet, backward, forward


def grad_check(
    net: Network,
    params: ParameterSet,
    loss_fn,
    x: np.ndarray,
    *,
    step: float = 1e-4,
    max_coords_per_tensor: int = 24,
    check_input: bool = True,
    train: bool = True,
    zero_tol: float = 1e-6,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(output) -> (scalar, d_output)`` supplies the loss and its
    gradient; the relative error per coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).

    Two defenses keep non-smoothness from producing false alarms without
    hiding real derivation bugs:
      * coordinates where both magnitudes fall below ``zero_tol`` are
        skipped: structurally dead parameters (a conv bias feeding batch
        norm) have exactly zero analytic gradients whose numeric
        counterpart is pure float roundoff. A wrongly-zeroed analytic
        gradient still fails, since its numeric value sits far above the
        noise floor.
      * a failing coordinate is retried at smaller steps and the best
        attempt counts: a relu kink or max-pool argmax switch corrupts the
        central difference only while the step straddles it, whereas a
        backward-pass bug keeps the same error at every step size.
    """
    rng = rng or np.random.default_rng(0)
    params64 = params.astype(np.float64)
    x64 = np.asarray(x, dtype=np.float64)

    out, tape = forward(net, params64.copy(), x64, train=train)
    _, d_out = loss_fn(out)
    dx, grads = backward(tape, d_out, params64, need_dx=check_input)

    def loss_at(p: ParameterSet, xin: np.ndarray) -> float:
        y, _ = forward(net, p.copy(), xin, train=train)
        return float(loss_fn(y)[0])

    worst = 0.0

    def check_coord(analytic: float, bump) -> float:
        best = None
        for h in (step, step / 16.0, step / 128.0):
            plus = bump(+h)
            minus = bump(-h)
            numeric = (plus - minus) / (2.0 * h)
            if max(abs(analytic), abs(numeric)) < zero_tol:
                return 0.0
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            best = err if best is None else min(best, err)
            if best < 1e-5:
                break
        return best

    for name, layer_grads in grads.items():
        for key, grad in layer_grads.items():
            flat_g = grad.ravel()
            n = flat_g.size
            coords = (
                np.arange(n)
                if n <= max_coords_per_tensor
                else rng.choice(n, size=max_coords_per_tensor, replace=False)
            )
            base = params64.tensors[name][key]
            for c in coords:
                idx = np.unravel_index(c, base.shape)

                def bump(eps, idx=idx, name=name, key=key):
                    p = params64.copy()
                    p.tensors[name][key][idx] += eps
                    return loss_at(p, x64)

                worst = max(worst, check_coord(float(flat_g[c]), bump))

    if check_input and dx is not None:
        flat_dx = dx.ravel()
        n = flat_dx.size
        coords = (
            np.arange(n)
            if n <= max_coords_per_tensor
            else rng.choice(n, size=max_coords_per_tensor, replace=False)
        )
        for c in coords:
            idx = np.unravel_index(c, x64.shape)

            def bump(eps, idx=idx):
                x2 = x64.copy()
                x2[idx] += eps
                return loss_at(params64, x2)

            worst = max(worst, check_coord(float(flat_dx[c]), bump))

    return worst


def mse_loss_fn(target: np.ndarray):
    """Mean squared error against a fixed target, for gradient checks."""

    def fn(out):
        diff = out - target
        return float(np.mean(diff**2)), 2.0 * diff / diff.size

    return fn


def sum_loss_fn():
    """Plain sum of outputs; the simplest possible check signal."""

    def fn(out):
        return float(out.sum()), np.ones_like(out)

    return fn
