"""
Central finite-difference checks of the reverse-mode gradients.

Every primitive is checked on every input coordinate; the full pipelines
(enhancement + losses, which have too many parameters for a coordinate sweep)
are checked on a sample of single coordinates per parameter tensor, keeping
only probes whose stencil does not cross a kink.
All checks run in float64 with h = 1e-5.

Relative error per element is ``|a - n| / max(|a| + |n|, floor)``; the
reported value per check is the maximum over elements and directions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Optional, Sequence

import numpy as np

from . import functional as Fn
from . import network as N
from . import tensor as T
from .losses import SmoothnessContext, adaptive_denoise_loss, rgb_to_yuv, smoothness_term, supervised_loss, unsupervised_loss

STEP = 1e-5
TOLERANCE = 1e-4
FLOOR = 1e-7


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float = TOLERANCE
    probes: Optional[int] = None
    crossed: int = 0
    uncovered: tuple = ()

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error <= self.tolerance and not self.uncovered


def _rel(a, n) -> float:
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), FLOOR)))


def _analytic(fn: Callable, inputs: Dict[str, np.ndarray]) -> tuple:
    with T.Tape() as tape:
        leaves = {k: T.Tensor(v, requires_grad=True, name=k) for k, v in inputs.items()}
        out = fn(**leaves)
    return out.item(), tape.backward(out, list(inputs))


def _value(fn: Callable, inputs: Dict[str, np.ndarray]) -> float:
    return fn(**{k: T.Tensor(v) for k, v in inputs.items()}).item()


def check_function(name: str, fn: Callable, inputs: Dict[str, np.ndarray], h: float = STEP, tolerance: float = TOLERANCE) -> CheckResult:
    """Coordinate-wise check of a scalar function of named float64 arrays."""
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    _, grads = _analytic(fn, inputs)
    worst = 0.0
    for k, base in inputs.items():
        num = np.zeros_like(base)
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _value(fn, inputs)
            flat[i] = orig - h
            fm = _value(fn, inputs)
            flat[i] = orig
            num.reshape(-1)[i] = (fp - fm) / (2 * h)
        worst = max(worst, _rel(grads[k], num))
    return CheckResult(name, worst, tolerance)


def _value_and_branches(fn: Callable, inputs: Dict[str, np.ndarray]) -> tuple:
    with T.BranchRecorder() as rec:
        value = _value(fn, inputs)
    return value, rec.signature()


def check_directional(
    name: str,
    fn: Callable,
    inputs: Dict[str, np.ndarray],
    rng: np.random.Generator,
    directions: int = 0,
    coords_per_tensor: int = 3,
    attempts_per_tensor: int = 12,
    h: float = STEP,
    tolerance: float = TOLERANCE,
) -> CheckResult:
    """Directional-derivative check for functions with many parameters.

    A central difference is only meaningful when the whole stencil stays in
    one smooth piece, so every probe is evaluated with a branch recorder and
    probes whose +h or -h point switches a relu / clamp / abs / maxpool
    branch are discarded (counted in ``crossed``). Optional dense random
    directions are tried first (off by default: moving every parameter at once
    through small-batch normalization makes the O(h^2) truncation term visible
    at h = 1e-5); then single coordinates are drawn per parameter tensor
    until ``coords_per_tensor`` kink-free probes are found. A tensor with no
    kink-free probe is listed in ``uncovered`` and fails the check.
    """
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    _, grads = _analytic(fn, inputs)
    _, base = _value_and_branches(fn, inputs)
    worst, used, crossed = 0.0, 0, 0

    def probe(d: dict) -> bool:
        nonlocal worst, used, crossed
        plus = {k: v + h * d[k] if k in d else v for k, v in inputs.items()}
        minus = {k: v - h * d[k] if k in d else v for k, v in inputs.items()}
        fp, sp = _value_and_branches(fn, plus)
        fm, sm = _value_and_branches(fn, minus)
        if sp != base or sm != base:
            crossed += 1
            return False
        ana = sum(float(np.sum(grads[k] * d[k])) for k in d)
        worst = max(worst, _rel(ana, (fp - fm) / (2 * h)))
        used += 1
        return True

    for _ in range(directions):
        probe({k: rng.standard_normal(v.shape) for k, v in inputs.items()})
    uncovered = []
    for k, v in inputs.items():
        found = 0
        for i in rng.permutation(v.size)[:attempts_per_tensor]:
            d = np.zeros_like(v)
            d.reshape(-1)[i] = 1.0
            found += probe({k: d})
            if found == coords_per_tensor:
                break
        if not found:
            uncovered.append(k)
    return CheckResult(name, worst, tolerance, used, crossed, tuple(uncovered))


# ------------------------------------------------------------------ registry

def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _probe(out: T.Tensor, seed: int = 7) -> T.Tensor:
    """Reduce an op output to a scalar with fixed random weights."""
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return T.tsum(T.mul(out, w))


def primitive_cases(rng: np.random.Generator) -> dict:
    """name -> (scalar function of named tensors, float64 inputs)."""
    s = (2, 3)
    img = (2, 3, 4, 4)
    cases = {
        "add": (lambda a, b: _probe(T.add(a, b)), {"a": rng.standard_normal(s), "b": rng.standard_normal(s)}),
        "sub": (lambda a, b: _probe(T.sub(a, b)), {"a": rng.standard_normal(s), "b": rng.standard_normal(s)}),
        "mul": (lambda a, b: _probe(T.mul(a, b)), {"a": rng.standard_normal(s), "b": rng.standard_normal(s)}),
        "div": (lambda a, b: _probe(T.div(a, b)), {"a": rng.standard_normal(s), "b": rng.uniform(0.5, 2.0, s)}),
        "div_clamped": (
            lambda a, b: _probe(T.div(a, b, clamp=True, floor=0.3)),
            {"a": rng.standard_normal(s), "b": np.array([[0.1, 0.5, 0.8], [0.05, 1.2, 0.4]])},
        ),
        "power": (lambda a: _probe(T.power(a, 1.7)), {"a": rng.uniform(0.5, 2.0, s)}),
        "square": (lambda a: _probe(T.square(a)), {"a": rng.standard_normal(s)}),
        "abs": (lambda a: _probe(T.tabs(a)), {"a": _away_from_zero(rng, s)}),
        "exp": (lambda a: _probe(T.exp(a)), {"a": rng.standard_normal(s)}),
        "clamp": (lambda a: _probe(T.clamp(a, -0.5, 0.5)), {"a": np.array([[-0.9, -0.2, 0.1], [0.3, 0.8, -0.7]])}),
        "relu": (lambda a: _probe(T.relu(a)), {"a": _away_from_zero(rng, s)}),
        "leaky_relu": (lambda a: _probe(T.leaky_relu(a, 0.2)), {"a": _away_from_zero(rng, s)}),
        "sigmoid": (lambda a: _probe(T.sigmoid(a)), {"a": 3 * rng.standard_normal(s)}),
        "sum": (lambda a: _probe(T.tsum(a, axis=1, keepdims=True)), {"a": rng.standard_normal(s)}),
        "mean": (lambda a: _probe(T.tmean(a, axis=0)), {"a": rng.standard_normal(s)}),
        "reshape": (lambda a: _probe(T.reshape(a, (3, 2))), {"a": rng.standard_normal(s)}),
        "getitem": (lambda a: _probe(a[1:, :2]), {"a": rng.standard_normal(s)}),
        "concat": (lambda a, b: _probe(T.concat([a, b], axis=1)), {"a": rng.standard_normal(s), "b": rng.standard_normal(s)}),
        "conv2d": (
            lambda x, w, b: _probe(Fn.conv2d(x, w, b, padding=1)),
            {"x": rng.standard_normal(img), "w": rng.standard_normal((2, 3, 3, 3)), "b": rng.standard_normal(2)},
        ),
        "conv2d_stride2": (
            lambda x, w: _probe(Fn.conv2d(x, w, stride=2, padding=1)),
            {"x": rng.standard_normal((1, 2, 5, 5)), "w": rng.standard_normal((2, 2, 3, 3))},
        ),
        "batchnorm2d_train": (
            lambda x, gamma, beta: _probe(
                Fn.batchnorm2d(x, gamma, beta, np.zeros(3), np.ones(3), training=True)
            ),
            {"x": rng.standard_normal(img), "gamma": rng.uniform(0.5, 1.5, 3), "beta": rng.standard_normal(3)},
        ),
        "batchnorm2d_eval": (
            lambda x, gamma, beta: _probe(
                Fn.batchnorm2d(x, gamma, beta, np.array([0.1, -0.2, 0.0]), np.array([1.5, 0.5, 1.0]), training=False)
            ),
            {"x": rng.standard_normal(img), "gamma": rng.uniform(0.5, 1.5, 3), "beta": rng.standard_normal(3)},
        ),
        "maxpool2d": (lambda x: _probe(Fn.maxpool2d(x, 2)), {"x": rng.permutation(96).reshape(img) / 10.0}),
        "upsample_nearest": (lambda x: _probe(Fn.upsample_nearest(x, 2)), {"x": rng.standard_normal((1, 2, 2, 3))}),
        "rgb_to_yuv": (lambda x: _probe(rgb_to_yuv(x)), {"x": rng.uniform(0, 1, (1, 3, 3, 3))}),
    }
    y = rng.uniform(0.05, 1.0, (2, 3, 6, 6))
    ctx = SmoothnessContext()
    cases["smoothness_term"] = (lambda x: smoothness_term(x, y, ctx), {"x": rng.uniform(0.1, 0.9, (2, 3, 6, 6)) + 0.01 * np.arange(6)})
    cases["supervised_loss"] = (lambda z: supervised_loss(z, y), {"z": rng.uniform(0, 1, (2, 3, 6, 6))})
    cases["unsupervised_loss"] = (lambda x: unsupervised_loss(x, y, ctx), {"x": rng.uniform(0.1, 0.9, (2, 3, 6, 6)) + 0.01 * np.arange(6)})
    gt = rng.uniform(0, 1, (1, 3, 4, 4))
    cases["adaptive_denoise_loss"] = (
        lambda a, b: adaptive_denoise_loss(a, gt, b, gt),
        {"a": rng.uniform(0, 1, (1, 3, 4, 4)), "b": rng.uniform(0, 1, (1, 3, 4, 4))},
    )
    return cases


def _pipeline_cases(rng: np.random.Generator) -> dict:
    part = N.init_partition(rng, dtype=np.float64)
    # a non-trivial denoiser with small weights and +-0.5 channel biases: every
    # relu is firmly on or off, so stencils rarely cross its kink
    den = {}
    for k, v in part.denoiser.items():
        if k.endswith(".bias"):
            den[k] = np.where(np.arange(v.size) % 2 == 0, 0.5, -0.5)
        else:
            den[k] = 0.05 * rng.standard_normal(v.shape)
    y = rng.uniform(0.02, 0.6, (2, 3, 16, 16))
    gt = rng.uniform(0.0, 1.0, (2, 3, 16, 16))
    ctx = SmoothnessContext()
    enc_t = {"enc." + k: v for k, v in N.copy_params(part.encoder).items() if not N.is_buffer(k)}
    dec_t = {"dec." + k: v for k, v in N.copy_params(part.decoder).items() if not N.is_buffer(k)}
    den_t = {"den." + k: v for k, v in den.items()}
    buffers_e = {k: v for k, v in part.encoder.items() if N.is_buffer(k)}
    buffers_d = {k: v for k, v in part.decoder.items() if N.is_buffer(k)}

    def split(kw):
        u = dict(buffers_e)
        v = dict(buffers_d)
        g = {}
        for k, t in kw.items():
            pre, name = k.split(".", 1)
            {"enc": u, "dec": v, "den": g}[pre][name] = t
        return u, v, g

    def supervised(**kw):
        u, v, g = split(kw)
        res = N.run_pipeline(y, u, v, g, True, True)
        return T.add(supervised_loss(res.reflectance, gt), supervised_loss(res.output, gt))

    def unsupervised(**kw):
        u, v, _ = split(kw)
        x = N.estimate_illumination(y, u, v, True, True)
        return unsupervised_loss(x, y, ctx)

    def denoiser(**kw):
        _, _, g = split(kw)
        z = rng_z
        out, _ = N.denoise(z, g)
        return adaptive_denoise_loss(out[0:1], gt[0:1], out[1:2], gt[1:2])

    rng_z = rng.uniform(0.0, 1.0, (2, 3, 16, 16))
    return {
        "pipeline_supervised": (supervised, {**enc_t, **dec_t, **den_t}),
        "pipeline_unsupervised": (unsupervised, {**enc_t, **dec_t}),
        "pipeline_denoiser": (denoiser, den_t),
    }


def merge_results(parts: Sequence[CheckResult]) -> CheckResult:
    """Combine checks of one function at several base points.

    Every kink-free probe counts toward the worst error; a tensor is uncovered
    only if no base point produced a kink-free probe for it.
    """
    uncovered = set(parts[0].uncovered)
    for r in parts[1:]:
        uncovered &= set(r.uncovered)
    return CheckResult(
        parts[0].name,
        max(r.max_rel_error for r in parts),
        parts[0].tolerance,
        sum(r.probes or 0 for r in parts),
        sum(r.crossed for r in parts),
        tuple(sorted(uncovered)),
    )


def run_gradcheck(
    seed: int = 0,
    include_pipelines: bool = True,
    only: Optional[Iterable[str]] = None,
    base_points: int = 4,
) -> list:
    """Run every registered check; returns a list of CheckResult.

    Pipelines are retried at up to ``base_points`` independent points until
    every parameter tensor has had a kink-free probe.
    """
    rng = np.random.default_rng(seed)
    results = []
    wanted = set(only) if only is not None else None
    for name, (fn, inputs) in primitive_cases(rng).items():
        if wanted is None or name in wanted:
            results.append(check_function(name, fn, inputs))
    if not include_pipelines:
        return results
    partial: Dict[str, list] = {}
    for b in range(base_points):
        cases = _pipeline_cases(np.random.default_rng([seed, b]))
        for name, (fn, inputs) in cases.items():
            if wanted is not None and name not in wanted:
                continue
            done = partial.get(name)
            if done and not merge_results(done).uncovered:
                continue
            r = check_directional(name, fn, inputs, np.random.default_rng([seed, b, 1]))
            partial.setdefault(name, []).append(r)
    results += [merge_results(parts) for parts in partial.values()]
    return results


def format_report(results: Iterable) -> str:
    lines = [f"{'check':<24} {'max_rel_err':>12}  status  probes"]
    for r in results:
        probes = "all coords" if r.probes is None else f"{r.probes} used, {r.crossed} crossed a kink"
        line = f"{r.name:<24} {r.max_rel_error:>12.3e}  {'PASS' if r.passed else 'FAIL'}    {probes}"
        if r.uncovered:
            line += f"; no kink-free probe for {', '.join(r.uncovered)}"
        lines.append(line)
    return "\n".join(lines)
