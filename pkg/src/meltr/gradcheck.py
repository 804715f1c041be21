"""Oracle suites for the differentiation engine and the hypergradient code.

Every check compares against an independent reference: central finite
differences for gradients and Hessian-vector products, and the closed-form
solution of a quadratic bi-level problem for hypergradients.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

GRAD_TOL = 1e-5
HVP_TOL = 1e-4
EXACT_TOL = 1e-8
FD_PHI_TOL = 1e-6
FD_STEP = 1e-4

Builder = Callable[[list[Tensor]], Tensor]


def rel_err(a, b, floor: float = 1e-8) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|, floor)``."""
    a = np.concatenate([np.ravel(x) for x in a]) if isinstance(a, (list, tuple)) else np.ravel(a)
    b = np.concatenate([np.ravel(x) for x in b]) if isinstance(b, (list, tuple)) else np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


# ---------------------------------------------------------------------------
# random composites of the sanctioned op set


@dataclass
class Composite:
    builder: Builder
    params: list[np.ndarray]
    steps: tuple[str, ...]


KINK_MARGIN = 5e-2


def _steps(rng, consts):
    """Shape-preserving (m, n) -> (m, n) transforms; each draws its constants up front."""

    def gelu(x, ws):
        return ad.gelu(x)

    def tanh(x, ws):
        return ad.tanh(x)

    def exp_(x, ws):
        return ad.exp(ad.mul(ad.tanh(x), 0.5))

    def softplus(x, ws):
        return ad.log(ad.add(ad.exp(ad.mul(ad.tanh(x), 2.0)), 1.0))

    def softmax(x, ws):
        return ad.mul(ad.softmax(x), float(x.shape[-1]))

    def layer_norm(x, ws):
        return ad.layer_norm(x)

    def abs_(x, ws):
        return ad.abs_(x)

    def gram(x, ws):
        xt = ad.transpose(x)
        return ad.mul(ad.matmul(x, ad.matmul(xt, x)), 1.0 / x.size)

    def concat_mix(x, ws):
        mix = consts.setdefault("mix", rng.standard_normal((2 * x.shape[1], x.shape[1])) / np.sqrt(x.shape[1]))
        wide = ad.concat([x, ad.mul(x, x)], axis=1)
        return ad.matmul(wide, ad.constant(mix))

    def embed(x, ws):
        idx = consts.setdefault("idx", rng.integers(0, ws[2].shape[0], size=x.shape[0]))
        return ad.add(x, ad.embedding(ws[2], idx))

    def scale(x, ws):
        return ad.mul(x, ad.reshape(ws[3], ()))

    def center(x, ws):
        return ad.sub(x, ad.mean(x))

    def divide(x, ws):
        return ad.div(x, ad.add(ad.exp(ad.tanh(x)), 1.0))

    def reshape_t(x, ws):
        m, n = x.shape
        return ad.transpose(ad.reshape(ad.transpose(x), (n, m)))

    return {f.__name__.rstrip("_"): f for f in (gelu, tanh, exp_, softplus, softmax, layer_norm, abs_, gram,
                                                concat_mix, embed, scale, center, divide, reshape_t)}


def random_composite(rng: np.random.Generator, max_tries: int = 50) -> Composite:
    """A scalar function of four parameter tensors built from 2..6 random transforms.

    Composites whose absolute-value inputs come within ``KINK_MARGIN`` of zero are
    redrawn so finite differences never straddle the kink.
    """
    for _ in range(max_tries):
        m, k = (int(v) for v in rng.integers(2, 5, size=2))
        n = int(rng.integers(3, 6))  # layer_norm over two entries is degenerate (outputs +-1)
        params = [
            rng.standard_normal((m, k)),
            rng.standard_normal((k, n)) / np.sqrt(k),
            rng.standard_normal((5, n)) * 0.5,
            rng.uniform(0.5, 1.5, size=(1,)),
        ]
        consts: dict = {}
        table = _steps(rng, consts)
        steps = tuple(rng.choice(sorted(table), size=int(rng.integers(2, 7))))
        weights = rng.standard_normal((m, n))
        kink = [np.inf]

        def build(ws, steps=steps, table=table, weights=weights, kink=kink):
            x = ad.matmul(ws[0], ws[1])
            for s in steps:
                if s == "abs":
                    kink[0] = min(kink[0], float(np.abs(x.data).min()))
                x = table[s](x, ws)
            return ad.tsum(ad.mul(x, ad.constant(weights)))

        with ad.no_grad():
            build([Tensor(p) for p in params])
        if kink[0] > KINK_MARGIN:
            return Composite(build, params, steps)
    raise RuntimeError("could not draw a composite away from the abs kink")


# ---------------------------------------------------------------------------
# suites


@dataclass
class SuiteResult:
    name: str
    cases: int
    worst: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.worst)) and self.worst <= self.tol

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"{mark} {self.name:<22} cases={self.cases:<4} worst_rel_err={self.worst:.3e} tol={self.tol:g} ({self.seconds:.1f}s)"


def grad_suite(n: int = 100, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(n):
        c = random_composite(rng)
        w = [ad.parameter(p) for p in c.params]
        with ad.enable_grad():
            g = [x.data for x in ad.grad(c.builder(w), w, warn_unused=False)]
        fd = ad.finite_diff_grad(c.builder, w, step=FD_STEP, relative=True)
        worst = max(worst, rel_err(g, fd))
    return SuiteResult("gradient-vs-fd", n, worst, GRAD_TOL, time.perf_counter() - t0)


def hvp_suite(n: int = 30, seed: int = 1) -> SuiteResult:
    """hvp against central differences of the gradient along v."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(n):
        c = random_composite(rng)
        w = [ad.parameter(p) for p in c.params]
        v = [rng.standard_normal(p.shape) for p in c.params]
        with ad.enable_grad():
            hv = [x.data for x in ad.hvp(c.builder, w, v)]

        def grad_at(shift):
            pts = [ad.parameter(p + shift * d) for p, d in zip(c.params, v)]
            with ad.enable_grad():
                return [x.data for x in ad.grad(c.builder(pts), pts, warn_unused=False)]

        fd = [(a - b) / (2 * FD_STEP) for a, b in zip(grad_at(FD_STEP), grad_at(-FD_STEP))]
        worst = max(worst, rel_err(hv, fd))
    return SuiteResult("hvp-vs-fd", n, worst, HVP_TOL, time.perf_counter() - t0)


def quadratic_suites(n: int = 50, seed: int = 2) -> tuple[SuiteResult, SuiteResult]:
    """Exact hypergradient vs closed form, and both vs finite differences over phi."""
    from .bilevel import hypergrad_exact
    from .tasks import quad_closed_form, quad_fd_hypergrad, random_testbed

    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst_cf, worst_fd = 0.0, 0.0
    for _ in range(n):
        tb = random_testbed(rng, n=int(rng.integers(1, 9)), n_tasks=int(rng.integers(2, 6)))
        w_star, closed = quad_closed_form(tb)
        phi = ad.parameter(tb.phi)
        got = hypergrad_exact([ad.parameter(w_star)], [phi], tb.pri_builder(), tb.aux_builder(phi))[0]
        fd = quad_fd_hypergrad(tb)
        worst_cf = max(worst_cf, rel_err(got, closed))
        worst_fd = max(worst_fd, rel_err(got, fd), rel_err(closed, fd))
    dt = time.perf_counter() - t0
    return (SuiteResult("exact-vs-closed-form", n, worst_cf, EXACT_TOL, dt),
            SuiteResult("hypergrad-vs-fd-phi", n, worst_fd, FD_PHI_TOL, dt))


def run_all(n_grad: int = 100, n_hvp: int = 30, n_quad: int = 50) -> list[SuiteResult]:
    return [grad_suite(n_grad), hvp_suite(n_hvp), *quadratic_suites(n_quad)]
