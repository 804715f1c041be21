"""Bi-level optimization: inner descent, hypergradient schemes, outer updates.

All ``hypergrad_*`` functions return the approximate gradient of the primary
objective with respect to the meta-parameters through the lower-level
solution (the indirect path only), as a list of numpy arrays shaped like
``phi``. The outer step subtracts it.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence, Union

import numpy as np
import scipy.linalg

from . import autodiff as ad
from .autodiff import Tensor
from .losses import DEFAULT_GAMMA, FixedCombiner, manual_scheme, primary_loss
from .meltr_net import MeltrConfig, MeltrNet, calibrate_to_sum
from .optim import make_optimizer
from .tasks import TaskSpec

Builder = Callable[[list[Tensor]], Tensor]

EXACT_MAX_PARAMS = 200
CONDITION_LIMIT = 1e12
UNROLL_LIMIT = 32
DIVERGENCE_LIMIT = 1e6


class HypergradError(RuntimeError):
    pass


class NegativeCurvatureError(HypergradError):
    pass


class SeriesDivergenceError(HypergradError):
    pass


class ConvergenceWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# schemes


@dataclass(frozen=True)
class Exact:
    def __str__(self):
        return "exact"


@dataclass(frozen=True)
class Neumann:
    i: int = 3

    def __post_init__(self):
        if self.i < 0:
            raise ValueError("Neumann truncation must be >= 0")

    def __str__(self):
        return f"neumann:{self.i}"


@dataclass(frozen=True)
class IdentityLite:
    def __str__(self):
        return "identity"


@dataclass(frozen=True)
class ConjugateGradient:
    tol: float = 1e-8
    maxit: int = 50

    def __post_init__(self):
        if self.tol <= 0 or self.maxit < 1:
            raise ValueError("CG needs tol > 0 and maxit >= 1")

    def __str__(self):
        return f"cg:{self.tol:g}:{self.maxit}"


@dataclass(frozen=True)
class Unrolled:
    inner_steps: int = 3

    def __post_init__(self):
        if self.inner_steps < 1:
            raise ValueError("Unrolled needs at least one step")

    def __str__(self):
        return f"unrolled:{self.inner_steps}"


@dataclass(frozen=True)
class Fixed:
    """Non-learned linear combination: ``mtl`` (all ones), ``primary`` or explicit weights."""

    name: str = "mtl"
    coeffs: tuple[float, ...] | None = None

    def weights(self, n_tasks: int) -> np.ndarray:
        if self.coeffs is not None:
            if len(self.coeffs) != n_tasks:
                raise ValueError(f"{len(self.coeffs)} weights for {n_tasks} tasks")
            return np.asarray(self.coeffs, dtype=np.float64)
        if self.name == "mtl":
            return np.ones(n_tasks)
        if self.name == "primary":
            return manual_scheme("A", n_tasks)
        raise ValueError(f"unknown fixed scheme {self.name!r}")

    def __str__(self):
        if self.coeffs is not None:
            return "fixed:" + "/".join(f"{c:g}" for c in self.coeffs)
        return self.name


HypergradScheme = Union[Exact, Neumann, IdentityLite, ConjugateGradient, Unrolled, Fixed]


def parse_scheme(text: str) -> HypergradScheme:
    """Parse ``exact | neumann:<i> | identity | cg:<tol>:<maxit> | unrolled:<k> | mtl``.

    Also accepts ``primary`` and ``fixed:<w0>/<w1>/...`` for hand-set weights.
    """
    parts = text.strip().lower().split(":")
    head, args = parts[0], parts[1:]
    try:
        if head == "exact" and not args:
            return Exact()
        if head == "identity" and not args:
            return IdentityLite()
        if head == "neumann":
            return Neumann(int(args[0])) if args else Neumann()
        if head == "cg":
            if not args:
                return ConjugateGradient()
            if len(args) != 2:
                raise ValueError
            return ConjugateGradient(float(args[0]), int(args[1]))
        if head == "unrolled":
            return Unrolled(int(args[0])) if args else Unrolled()
        if head in ("mtl", "primary") and not args:
            return Fixed(head)
        if head == "fixed" and len(args) == 1:
            return Fixed("fixed", tuple(float(c) for c in args[0].split("/")))
    except (ValueError, IndexError):
        pass
    raise ValueError(f"cannot parse scheme {text!r}")


# ---------------------------------------------------------------------------
# building blocks


def _finite(arrays: Sequence[np.ndarray], what: str) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ad.NonFiniteError(f"non-finite {what}")


def inner_step(w: Sequence[Tensor], loss_builder: Builder, net=None, alpha: float = 0.1) -> list[Tensor]:
    """One gradient-descent step ``w - alpha * grad_w loss_builder(w)``.

    ``loss_builder`` maps ``w`` to the per-sample loss matrix when ``net`` is
    given (the combined loss is ``net``'s mean output), or directly to the
    scalar auxiliary loss otherwise.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    with ad.enable_grad():
        out = loss_builder(list(w))
        aux = net(out) if net is not None else out
        gs = ad.grad(aux, w, warn_unused=False)
    arrays = [g.data for g in gs]
    _finite(arrays, "inner gradient")
    return [ad.parameter(x.data - alpha * g) for x, g in zip(w, arrays)]


def _pri_grad(w, pri_builder):
    with ad.enable_grad():
        return [g.data for g in ad.grad(pri_builder(list(w)), w, warn_unused=False)]


def _aux_grads(w, aux_builder):
    with ad.enable_grad():
        return ad.grad(aux_builder(list(w)), w, create_graph=True, warn_unused=False)


def _contract_mixed(aux_grads, phi, v) -> list[np.ndarray]:
    """-(d/dphi) <grad_w L_aux, v> with v held constant."""
    with ad.enable_grad():
        dot = ad.vdot(aux_grads, [ad.constant(x) for x in v])
        if not dot.requires_grad:
            return [np.zeros_like(p.data) for p in phi]
        gs = ad.grad(dot, phi, warn_unused=False)
    out = [-g.data for g in gs]
    _finite(out, "hypergradient")
    return out


def _hvp_arrays(aux_grads, w, v) -> list[np.ndarray]:
    with ad.enable_grad():
        return [h.data for h in ad.hvp_from_grads(aux_grads, w, v)]


def hypergrad_identity(w, phi, pri_builder, aux_builder, pri_grad=None) -> list[np.ndarray]:
    """Inverse Hessian replaced by the identity: one backward-of-backward."""
    v = pri_grad if pri_grad is not None else _pri_grad(w, pri_builder)
    return _contract_mixed(_aux_grads(w, aux_builder), phi, v)


def neumann_apply(hvp: Callable, v: list[np.ndarray], i: int) -> list[np.ndarray]:
    """sum_{j=0..i} (I - H)^j v using only Hessian-vector products."""
    total = [x.copy() for x in v]
    cur = v
    for _ in range(i):
        hv = hvp(cur)
        cur = [c - h for c, h in zip(cur, hv)]
        total = [t + c for t, c in zip(total, cur)]
        if not all(np.all(np.isfinite(t)) for t in total):
            raise SeriesDivergenceError("Neumann partial sums are not finite")
    return total


def hypergrad_neumann(w, phi, pri_builder, aux_builder, i: int = 3, pri_grad=None) -> list[np.ndarray]:
    if i < 0:
        raise ValueError("truncation must be >= 0")
    v = pri_grad if pri_grad is not None else _pri_grad(w, pri_builder)
    ag = _aux_grads(w, aux_builder)
    try:
        p = neumann_apply(lambda x: _hvp_arrays(ag, w, x), v, i)
    except ad.NonFiniteError as exc:
        raise SeriesDivergenceError(str(exc)) from exc
    return _contract_mixed(ag, phi, p)


def dense_hessian(aux_grads, w) -> np.ndarray:
    n = sum(x.size for x in w)
    H = np.zeros((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        H[:, j] = ad.flatten(_hvp_arrays(aux_grads, w, ad.unflatten(e, w)))
    return H


def hypergrad_exact(w, phi, pri_builder, aux_builder, pri_grad=None, max_params: int = EXACT_MAX_PARAMS):
    """True inverse Hessian: materialize it column by column and solve by LU."""
    n = sum(x.size for x in w)
    if n > max_params:
        raise HypergradError(f"exact scheme limited to {max_params} lower-level scalars, got {n}")
    v = pri_grad if pri_grad is not None else _pri_grad(w, pri_builder)
    ag = _aux_grads(w, aux_builder)
    H = dense_hessian(ag, w)
    H = 0.5 * (H + H.T)
    cond = np.linalg.cond(H)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise np.linalg.LinAlgError(f"Hessian is singular (condition {cond:.3g})")
    x = scipy.linalg.lu_solve(scipy.linalg.lu_factor(H), ad.flatten(v))
    return _contract_mixed(ag, phi, ad.unflatten(x, w))


@dataclass
class CGInfo:
    iterations: int = 0
    residual: float = float("nan")
    converged: bool = False
    negative_curvature: bool = False


def conjugate_gradient(matvec: Callable[[np.ndarray], np.ndarray], b: np.ndarray, tol=1e-8, maxit=50,
                       on_negative_curvature: str = "raise") -> tuple[np.ndarray, CGInfo]:
    """Solve H x = b for symmetric positive definite H given only products H p."""
    info = CGInfo()
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    bnorm = np.sqrt(b @ b)
    if bnorm == 0:
        info.converged, info.residual = True, 0.0
        return x, info
    best, best_res = x.copy(), 1.0
    for it in range(1, maxit + 1):
        hp = matvec(p)
        curv = p @ hp
        if curv <= 0:
            info.negative_curvature = True
            if on_negative_curvature == "raise":
                raise NegativeCurvatureError(f"non-positive curvature {curv:.3g} at CG iteration {it}")
            # keep the last iterate; at the very first step fall back to the right-hand side
            info.iterations = it
            info.residual = best_res
            return (best if it > 1 else b.copy()), info
        a = rr / curv
        x = x + a * p
        r = r - a * hp
        rr_new = r @ r
        res = np.sqrt(rr_new) / bnorm
        info.iterations = it
        if res < best_res:
            best, best_res = x.copy(), res
        if res <= tol:
            info.converged, info.residual = True, res
            return x, info
        p = r + (rr_new / rr) * p
        rr = rr_new
    info.residual = best_res
    return best, info


def hypergrad_cg(w, phi, pri_builder, aux_builder, tol=1e-8, maxit=50, pri_grad=None,
                 on_negative_curvature: str = "raise", info: CGInfo | None = None) -> list[np.ndarray]:
    """Inverse-Hessian-vector product by conjugate gradients, then the mixed contraction."""
    v = pri_grad if pri_grad is not None else _pri_grad(w, pri_builder)
    ag = _aux_grads(w, aux_builder)
    x, cg = conjugate_gradient(
        lambda p: ad.flatten(_hvp_arrays(ag, w, ad.unflatten(p, w))),
        ad.flatten(v), tol, maxit, on_negative_curvature,
    )
    if info is not None:
        info.__dict__.update(cg.__dict__)
    if not cg.converged and not cg.negative_curvature:
        warnings.warn(f"CG stopped after {maxit} iterations (residual {cg.residual:.3g})",
                      ConvergenceWarning, stacklevel=2)
    return _contract_mixed(ag, phi, ad.unflatten(x, w))


def hypergrad_unrolled(w, phi, pri_builder, aux_builder, steps: int = 3, alpha: float = 0.1) -> list[np.ndarray]:
    """Differentiate the primary loss through ``steps`` differentiable descent steps."""
    if steps < 1:
        raise ValueError("need at least one unrolled step")
    if steps > UNROLL_LIMIT:
        raise HypergradError(f"unroll depth {steps} exceeds the limit of {UNROLL_LIMIT}")
    with ad.enable_grad():
        cur = [ad.parameter(x.data) for x in w]
        for _ in range(steps):
            gs = ad.grad(aux_builder(cur), cur, create_graph=True, warn_unused=False)
            cur = [ad.sub(x, ad.mul(g, alpha)) for x, g in zip(cur, gs)]
        # the primary gradient at the unrolled point is a constant; only the path through w-hat counts
        v = [g.data for g in ad.grad(pri_builder(cur), cur, warn_unused=False)]
        dot = ad.vdot(cur, [ad.constant(x) for x in v])
        if not dot.requires_grad:
            return [np.zeros_like(p.data) for p in phi]
        out = [g.data for g in ad.grad(dot, phi, warn_unused=False)]
    _finite(out, "hypergradient")
    return out


def outer_step(net, hypergrad: Sequence[np.ndarray], beta: float, direct_reg_grad=None, optimizer=None,
               max_norm: float | None = None):
    """phi <- phi - beta * (hypergrad + direct term), optionally norm-clipped."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    params = net.parameters()
    total = [np.asarray(h, dtype=np.float64) for h in hypergrad]
    if direct_reg_grad is not None:
        total = [h + np.asarray(d) for h, d in zip(total, direct_reg_grad)]
    _finite(total, "meta update")
    if max_norm is not None:
        norm = float(np.sqrt(sum(float((t * t).sum()) for t in total)))
        if norm > max_norm:
            total = [t * (max_norm / norm) for t in total]
    if optimizer is None:
        new = [p.data - beta * g for p, g in zip(params, total)]
    else:
        new = optimizer.step([p.data for p in params], total)
    _finite(new, "meta parameters")
    net.load(new)
    return net


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    scheme: HypergradScheme = field(default_factory=IdentityLite)
    alpha: float = 0.05
    beta: float = 5e-3
    gamma: float = DEFAULT_GAMMA
    K: int = 3
    epochs: int = 40
    seed: int = 0
    include_direct_reg_grad: bool = True
    shared_outer_batch: bool = False
    d: int = 32
    heads: int = 4
    layers: int = 1
    variant: str = "full"
    optimizer: str = "sgd"
    calibrate_steps: int = 100
    max_meta_norm: float | None = 2.0
    cg_on_negative_curvature: str = "truncate"

    def __post_init__(self):
        if isinstance(self.scheme, str):
            self.scheme = parse_scheme(self.scheme)
        if self.alpha <= 0 or self.beta < 0:
            raise ValueError("alpha must be positive and beta nonnegative")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scheme"] = str(self.scheme)
        return d


@dataclass
class RunRecord:
    config: dict
    suite: dict
    status: str = "ok"
    diagnostic: str = ""
    warnings: list[str] = field(default_factory=list)
    train_pri: list[float] = field(default_factory=list)
    val_pri: list[float] = field(default_factory=list)
    reg: list[float] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)
    partials: list[list[float]] = field(default_factory=list)
    loss_ranges: list[list[list[float]]] = field(default_factory=list)
    outer_step_ms: list[float] = field(default_factory=list)
    hypergrad_norms: list[float] = field(default_factory=list)
    baseline: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    calibration_gap: float | None = None
    cg_negative_curvature: int = 0
    meltr_state: dict[str, np.ndarray] | None = None
    learner_state: list[np.ndarray] | None = None

    @property
    def diverged(self) -> bool:
        return self.status == "diverged"

    @property
    def final_val_pri(self) -> float:
        return self.val_pri[-1] if self.val_pri and not self.diverged else float("inf")

    def metrics(self) -> dict:
        """Everything except wall-clock and parameter snapshots."""
        skip = {"wall_ms", "outer_step_ms", "meltr_state", "learner_state"}
        return {k: v for k, v in asdict(self).items() if k not in skip}


def _five_numbers(x: np.ndarray) -> list[float]:
    return [float(v) for v in np.percentile(x, [0, 25, 50, 75, 100])]


def make_combiner(cfg: TrainConfig, n_tasks: int, rng: np.random.Generator):
    if isinstance(cfg.scheme, Fixed):
        return FixedCombiner(cfg.scheme.weights(n_tasks))
    mc = MeltrConfig(n_tasks=n_tasks, d=cfg.d, heads=cfg.heads, layers=cfg.layers, variant=cfg.variant)
    return MeltrNet.init(mc, rng)


def compute_hypergrad(scheme, w, phi, pri_builder, aux_builder, pri_grad, alpha, cg_mode="raise", cg_info=None):
    if isinstance(scheme, IdentityLite):
        return hypergrad_identity(w, phi, pri_builder, aux_builder, pri_grad=pri_grad)
    if isinstance(scheme, Neumann):
        return hypergrad_neumann(w, phi, pri_builder, aux_builder, scheme.i, pri_grad=pri_grad)
    if isinstance(scheme, Exact):
        return hypergrad_exact(w, phi, pri_builder, aux_builder, pri_grad=pri_grad)
    if isinstance(scheme, ConjugateGradient):
        return hypergrad_cg(w, phi, pri_builder, aux_builder, scheme.tol, scheme.maxit, pri_grad=pri_grad,
                            on_negative_curvature=cg_mode, info=cg_info)
    if isinstance(scheme, Unrolled):
        return hypergrad_unrolled(w, phi, pri_builder, aux_builder, scheme.inner_steps, alpha)
    raise TypeError(f"scheme {scheme!r} has no hypergradient")


def _calibration_samples(task: TaskSpec, w, rng) -> np.ndarray:
    with ad.no_grad():
        base = task.losses(w, task._augment(dict(task.train), rng)).data
    return base * rng.uniform(0.0, 1.25, size=base.shape)


def train_loop(cfg: TrainConfig, task: TaskSpec, hooks=None) -> RunRecord:
    """Alternate K inner descent steps with one meta update, recording per-epoch metrics."""
    rng = np.random.default_rng(cfg.seed)
    record = RunRecord(config=cfg.to_dict(), suite=task.describe())
    w = task.init_learner(rng)
    net = make_combiner(cfg, task.n_tasks, rng)
    learnable = isinstance(net, MeltrNet) and cfg.beta > 0
    if isinstance(net, MeltrNet) and cfg.calibrate_steps > 0:
        record.calibration_gap = calibrate_to_sum(
            net, _calibration_samples(task, w, rng), steps=cfg.calibrate_steps, rng=rng
        )
    phi = net.parameters()
    total_steps = cfg.epochs * task.steps_per_epoch
    outer_opt = make_optimizer(cfg.optimizer, cfg.beta, total_steps) if cfg.optimizer != "sgd" and learnable else None
    train_it = task.train_batches(cfg.seed)
    val_it = task.val_batches(cfg.seed)
    test = task.test_batch()
    n = task.n_tasks
    any_meta_signal = False
    cg_info = CGInfo()

    def check(value, what):
        if not np.isfinite(value) or abs(value) > DIVERGENCE_LIMIT:
            raise ad.NonFiniteError(f"{what} diverged ({value:.3g})")

    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            psum, pcount, tp = np.zeros(n), 0, []
            for _ in range(task.steps_per_epoch):
                for _ in range(cfg.K):
                    batch = next(train_it)
                    with ad.enable_grad():
                        mat = task.losses(w, batch)
                        aux = net(mat)
                        gs = ad.grad(aux, list(w) + [mat], warn_unused=False)
                    check(aux.item(), "auxiliary loss")
                    tp.append(float(mat.data[:, 0].mean()))
                    psum += gs[-1].data.sum(axis=0) * mat.shape[0]
                    pcount += mat.shape[0]
                    grads = [g.data for g in gs[:-1]]
                    _finite(grads, "inner gradient")
                    w = [ad.parameter(x.data - cfg.alpha * g) for x, g in zip(w, grads)]
                if not learnable:
                    continue
                t1 = time.perf_counter()
                aux_batch = next(train_it)
                val_batch = aux_batch if cfg.shared_outer_batch else next(val_it)

                def aux_builder(ws, b=aux_batch):
                    return net(task.losses(ws, b))

                def pri_builder(ws, b=val_batch):
                    return primary_loss(task.losses(ws, b), net, cfg.gamma)

                with ad.enable_grad():
                    pri = pri_builder(list(w))
                    pg = ad.grad(pri, list(w) + phi, warn_unused=False)
                check(pri.item(), "primary loss")
                pri_grad = [g.data for g in pg[: len(w)]]
                direct = [g.data for g in pg[len(w):]] if cfg.include_direct_reg_grad else None
                hyper = compute_hypergrad(cfg.scheme, w, phi, pri_builder, aux_builder, pri_grad, cfg.alpha,
                                          cfg.cg_on_negative_curvature, cg_info)
                if cg_info.negative_curvature:
                    record.cg_negative_curvature += 1
                    cg_info.negative_curvature = False
                hnorm = float(np.sqrt(sum(float((h * h).sum()) for h in hyper)))
                any_meta_signal |= hnorm > 0
                record.hypergrad_norms.append(hnorm)
                outer_step(net, hyper, cfg.beta, direct, outer_opt, cfg.max_meta_norm)
                phi = net.parameters()
                record.outer_step_ms.append(1000 * (time.perf_counter() - t1))
                if hooks:
                    hooks(epoch, w, net)
            # held-out evaluation
            with ad.no_grad():
                mat = task.losses(w, test).data
                gap = float(np.mean(np.abs(net.forward_batch(mat).data - mat.sum(axis=1))))
            check(float(mat[:, 0].mean()), "validation primary loss")
            record.val_pri.append(float(mat[:, 0].mean()))
            record.train_pri.append(float(np.mean(tp)))
            record.reg.append(gap)
            record.partials.append((psum / max(pcount, 1)).tolist())
            record.loss_ranges.append([_five_numbers(mat[:, t]) for t in range(n)])
            record.baseline = mat.mean(axis=0).tolist()
            if task.name == "classification":
                from .tasks import accuracy

                record.val_acc.append(accuracy(task, w, test))
            record.wall_ms.append(1000 * (time.perf_counter() - t0))
    except (ad.NonFiniteError, FloatingPointError, SeriesDivergenceError) as exc:
        record.status = "diverged"
        record.diagnostic = f"epoch {len(record.val_pri)}: {exc}"
    if learnable and not any_meta_signal and record.status == "ok":
        record.warnings.append("meta-gradient identically zero")
    if isinstance(net, MeltrNet):
        record.meltr_state = net.state()
    record.learner_state = [x.data.copy() for x in w]
    return record
