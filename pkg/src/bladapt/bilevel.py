"""
One-step bilevel hypergradients with a finite-difference mixed second derivative.

Everything here works on flat parameter maps (``dict[str, ndarray]``) and on
objectives of the form ``objective(upper, lower, batch) -> scalar Tensor``,
where ``upper``/``lower`` are maps of leaf tensors (buffers stay arrays).
The same code therefore drives the scalar toy problems used as oracles and
the encoder/decoder network.

Given an upper objective F and lower objective f::

    v'   = v - xi * grad_v f(u, v; tr)
    g    = grad_v' F(u, v'; val)
    mvp  = (grad_u f(u, v + eps g; tr) - grad_u f(u, v - eps g; tr)) / (2 eps)
    grad = grad_u F(u, v'; val) - xi * mvp
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional

import numpy as np

from .network import trainable_names
from .tensor import Tape, Tensor

Objective = Callable[[Mapping, Mapping, object], Tensor]

UPPER = "upper:"
LOWER = "lower:"


class DivergedStepError(ArithmeticError):
    """A gradient step produced non-finite values."""


class ToleranceError(ValueError):
    """Finite-difference step too small to resolve at the working precision."""


class StructureMismatchError(ValueError):
    """Two parameter maps that must share a layout do not."""


class FrozenParameterError(RuntimeError):
    """An update touched a parameter that is frozen in the current phase."""


def _wrap(params: Mapping[str, np.ndarray], prefix: str, wanted: bool) -> dict:
    out = {}
    for k, v in params.items():
        if wanted and not ".running_" in k:
            out[k] = Tensor(v, requires_grad=True, name=prefix + k)
        else:
            out[k] = v
    return out


def value_and_grad(objective: Objective, upper: Mapping, lower: Mapping, batch, wrt: Iterable[str] = ("upper", "lower")):
    """Evaluate ``objective(upper, lower, batch)`` and differentiate.

    Returns ``(loss, grad_upper, grad_lower)``; a side not listed in ``wrt``
    gets ``None``. Leaf names are namespaced internally, so ``upper`` and
    ``lower`` may use identical keys (as the meta-init and decoder do).
    """
    wrt = set(wrt)
    with Tape() as tape:
        U = _wrap(upper, UPPER, "upper" in wrt)
        L = _wrap(lower, LOWER, "lower" in wrt)
        loss = objective(U, L, batch)
    names = []
    if "upper" in wrt:
        names += [UPPER + k for k in trainable_names(upper)]
    if "lower" in wrt:
        names += [LOWER + k for k in trainable_names(lower)]
    # leaves the objective never touched still get a (zero) gradient
    for n in names:
        if n not in tape.leaves:
            side, key = (upper, n[len(UPPER):]) if n.startswith(UPPER) else (lower, n[len(LOWER):])
            tape.leaves[n] = Tensor(side[key], requires_grad=True, name=n)
    grads = tape.backward(loss, names) if names else {}
    gu = {n[len(UPPER):]: g for n, g in grads.items() if n.startswith(UPPER)} if "upper" in wrt else None
    gl = {n[len(LOWER):]: g for n, g in grads.items() if n.startswith(LOWER)} if "lower" in wrt else None
    return float(loss.item()), gu, gl


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    """Euclidean norm over all entries, scaled so tiny or huge values neither underflow nor overflow."""
    arrays = [np.asarray(g, dtype=np.float64).ravel() for g in grads.values()]
    peak = max((float(np.max(np.abs(a))) for a in arrays if a.size), default=0.0)
    if peak == 0.0 or not np.isfinite(peak):
        return peak
    return peak * float(np.sqrt(sum(float(np.sum((a / peak) ** 2)) for a in arrays)))


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: Optional[float]) -> dict:
    if max_norm is None:
        return dict(grads)
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return dict(grads)
    scale = max_norm / norm
    return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}


def axpy(params: Mapping[str, np.ndarray], direction: Mapping[str, np.ndarray], alpha: float) -> dict:
    """params + alpha * direction on the keys of ``direction``; other keys copied."""
    out = {}
    for k, p in params.items():
        if k in direction:
            out[k] = (p + alpha * direction[k]).astype(p.dtype)
        else:
            out[k] = np.array(p, copy=True)
    return out


def _check_finite(grads: Mapping[str, np.ndarray], what: str) -> None:
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergedStepError(f"non-finite gradient for {k} during {what}")


def lower_step(u: Mapping, v: Mapping, batch, loss_f: Objective, xi: float, clip_norm: Optional[float] = None) -> dict:
    """One SGD step on the lower variables: v - xi * grad_v f(u, v; batch)."""
    if xi == 0:
        return {k: np.array(p, copy=True) for k, p in v.items()}
    _, _, gv = value_and_grad(loss_f, u, v, batch, wrt=("lower",))
    _check_finite(gv, "lower_step")
    gv = clip_by_global_norm(gv, clip_norm)
    return axpy(v, gv, -xi)


def _fd_guard(v: Mapping, g: Mapping, eps: float) -> None:
    if eps <= 0:
        raise ToleranceError(f"finite-difference epsilon must be positive, got {eps}")
    for k, d in g.items():
        p = np.asarray(v[k])
        step = eps * float(np.max(np.abs(d))) if d.size else 0.0
        if step == 0.0:
            continue
        res = np.finfo(p.dtype).eps * max(1.0, float(np.max(np.abs(p))))
        if step < res:
            raise ToleranceError(
                f"perturbation {step:.3g} on {k} is below the {p.dtype} resolution {res:.3g}; raise epsilon"
            )


def finite_difference_mvp(u: Mapping, v: Mapping, g: Mapping, loss_f: Objective, eps: float, batch) -> dict:
    """Central-difference estimate of (d^2 f / du dv) g."""
    if all(not np.any(d) for d in g.values()):
        return {k: np.zeros_like(u[k]) for k in trainable_names(u)}
    _fd_guard(v, g, eps)
    _, gp, _ = value_and_grad(loss_f, u, axpy(v, g, eps), batch, wrt=("upper",))
    _, gm, _ = value_and_grad(loss_f, u, axpy(v, g, -eps), batch, wrt=("upper",))
    return {k: ((gp[k].astype(np.float64) - gm[k]) / (2.0 * eps)).astype(gp[k].dtype) for k in gp}


def relative_epsilon(g: Mapping[str, np.ndarray], scale: float = 1e-2) -> float:
    norm = global_norm(g)
    return scale / norm if norm > 0 else scale


@dataclass
class Hypergradient:
    grad: dict
    upper_loss: float
    v_prime: dict
    direction: dict
    eps: float


def hypergradient(
    u: Mapping,
    v: Mapping,
    upper_f: Objective,
    lower_f: Objective,
    tr_batch,
    val_batch,
    xi: float,
    eps: Optional[float] = None,
    eps_scale: float = 1e-2,
    v_prime: Optional[Mapping] = None,
) -> Hypergradient:
    """Shared body of the BL and RBL hypergradients, with intermediates.

    ``v_prime`` may carry an already-taken lower step (for instance one that
    also refreshed normalization statistics); it is then used as-is.
    """
    if v_prime is None:
        v_prime = lower_step(u, v, tr_batch, lower_f, xi)
    loss, direct, g = value_and_grad(upper_f, u, v_prime, val_batch)
    _check_finite(direct, "upper gradient")
    if xi == 0 or all(not np.any(d) for d in g.values()):
        return Hypergradient(direct, loss, v_prime, g, 0.0)
    eps_eff = eps if eps is not None else relative_epsilon(g, eps_scale)
    mvp = finite_difference_mvp(u, v, g, lower_f, eps_eff, tr_batch)
    grad = {k: (direct[k] - xi * mvp[k]).astype(direct[k].dtype) for k in direct}
    return Hypergradient(grad, loss, v_prime, g, eps_eff)


def bl_hypergradient(u, v, upper_f, lower_f, tr_batch, val_batch, xi, eps=None, eps_scale=1e-2, v_prime=None) -> dict:
    """Approximate d F(u, v*(u)) / du; ``u`` and ``v`` are left untouched."""
    return hypergradient(u, v, upper_f, lower_f, tr_batch, val_batch, xi, eps, eps_scale, v_prime).grad


def check_same_structure(a: Mapping, b: Mapping) -> None:
    if set(a) != set(b):
        diff = sorted(set(a) ^ set(b))
        raise StructureMismatchError(f"parameter maps differ in keys: {diff[:5]}")
    for k in a:
        if np.shape(a[k]) != np.shape(b[k]):
            raise StructureMismatchError(f"{k}: shape {np.shape(a[k])} vs {np.shape(b[k])}")


def rbl_hypergradient(v_meta, v, upper_h, lower_h, tr_batch, val_batch, xi, eps=None, eps_scale=1e-2, v_prime=None) -> dict:
    """Hypergradient for the decoder meta-initialization (upper variable ``v_meta``)."""
    check_same_structure(v_meta, v)
    return hypergradient(v_meta, v, upper_h, lower_h, tr_batch, val_batch, xi, eps, eps_scale, v_prime).grad


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_update(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.5,
    beta2: float = 0.999,
    eps: float = 1e-8,
    frozen: Iterable[str] = (),
) -> dict:
    """Bias-corrected Adam step over the keys of ``grads``; returns new params."""
    frozen = set(frozen)
    touched = frozen.intersection(grads)
    if touched:
        raise FrozenParameterError(f"update targets frozen parameters: {sorted(touched)[:3]}")
    for k, g in grads.items():
        if k not in params:
            raise KeyError(f"gradient for unknown parameter {k!r}")
        if np.shape(g) != np.shape(params[k]):
            raise ValueError(f"{k}: gradient shape {np.shape(g)} vs parameter {np.shape(params[k])}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    out = dict(params)
    for k in sorted(grads):
        g = grads[k]
        p = params[k]
        m = state.m.get(k)
        s = state.v.get(k)
        if m is None:
            m = np.zeros_like(p)
            s = np.zeros_like(p)
        m = beta1 * m + (1 - beta1) * g
        s = beta2 * s + (1 - beta2) * g * g
        state.m[k], state.v[k] = m.astype(p.dtype), s.astype(p.dtype)
        step = lr * (m / bc1) / (np.sqrt(s / bc2) + eps)
        out[k] = (p - step).astype(p.dtype)
    return out
