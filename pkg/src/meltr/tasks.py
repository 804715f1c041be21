"""Synthetic bi-level problems with known structure.

``QuadraticTestbed`` has a closed-form lower-level solution and hypergradient.
The learner suites are small multi-task problems where some auxiliary tasks
are designed to help the primary task and others to compete with it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import ClassVar, Iterator

import numpy as np
from scipy.stats import ortho_group

from . import autodiff as ad
from .autodiff import Tensor

# ---------------------------------------------------------------------------
# quadratic oracle


@dataclass
class QuadraticTestbed:
    """Per-task losses 0.5 (w - c_t)^T A_t (w - c_t), combined linearly by phi."""

    A: np.ndarray  # (T+1, n, n)
    c: np.ndarray  # (T+1, n)
    phi: np.ndarray  # (T+1,)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)
        self.phi = np.asarray(self.phi, dtype=np.float64)
        for a in self.A:
            if not np.allclose(a, a.T):
                raise np.linalg.LinAlgError("A_t must be symmetric")
            np.linalg.cholesky(a)
        if np.any(self.phi <= 0):
            raise ValueError("combiner weights must be positive")

    @property
    def n(self) -> int:
        return self.c.shape[1]

    @property
    def n_tasks(self) -> int:
        return self.c.shape[0]

    def hessian(self, phi=None) -> np.ndarray:
        phi = self.phi if phi is None else phi
        return np.einsum("t,tij->ij", phi, self.A)

    def w_star(self, phi=None) -> np.ndarray:
        phi = self.phi if phi is None else np.asarray(phi, dtype=np.float64)
        rhs = np.einsum("t,tij,tj->i", phi, self.A, self.c)
        return np.linalg.solve(self.hessian(phi), rhs)

    def primary_value(self, w) -> float:
        r = np.asarray(w) - self.c[0]
        return 0.5 * float(r @ self.A[0] @ r)

    # autodiff builders over w = [Tensor(n,)] and phi = [Tensor(T+1,)]

    def task_loss(self, w: Tensor, t: int) -> Tensor:
        r = ad.reshape(ad.sub(w, ad.constant(self.c[t])), (self.n, 1))
        quad = ad.matmul(ad.swap_last(r), ad.matmul(ad.constant(self.A[t]), r))
        return ad.mul(ad.reshape(quad, ()), 0.5)

    def aux_builder(self, phi: Tensor):
        def build(ws):
            total = None
            for t in range(self.n_tasks):
                term = ad.mul(ad.reshape(ad.take(phi, 0, t, t + 1), ()), self.task_loss(ws[0], t))
                total = term if total is None else ad.add(total, term)
            return total

        return build

    def pri_builder(self):
        return lambda ws: self.task_loss(ws[0], 0)


def random_spd(rng: np.random.Generator, n: int, lo: float = 0.2, hi: float = 2.0) -> np.ndarray:
    q = ortho_group.rvs(n, random_state=rng) if n > 1 else np.ones((1, 1))
    lam = rng.uniform(lo, hi, size=n)
    a = (q * lam) @ q.T
    return 0.5 * (a + a.T)


def random_testbed(
    rng: np.random.Generator | int,
    n: int | None = None,
    n_tasks: int | None = None,
    eig_range: tuple[float, float] = (0.2, 2.0),
) -> QuadraticTestbed:
    rng = np.random.default_rng(rng)
    n = n or int(rng.integers(2, 9))
    n_tasks = n_tasks or int(rng.integers(2, 6))
    A = np.stack([random_spd(rng, n, *eig_range) for _ in range(n_tasks)])
    c = rng.standard_normal((n_tasks, n))
    phi = rng.uniform(0.2, 1.0, size=n_tasks)
    return QuadraticTestbed(A, c, phi)


def identity_hessian_testbed(rng: np.random.Generator | int, n: int = 3, n_tasks: int = 3) -> QuadraticTestbed:
    """Testbed whose combined Hessian sum_t phi_t A_t is exactly the identity."""
    rng = np.random.default_rng(rng)
    phi = rng.uniform(0.5, 1.5, size=n_tasks)
    parts = [random_spd(rng, n, 0.2, 1.0) for _ in range(n_tasks - 1)]
    # scale parts so the remainder I - sum phi_t A_t stays positive definite
    total = sum(p * f for p, f in zip(parts, phi[:-1]))
    scale = 0.5 / np.linalg.eigvalsh(total).max()
    parts = [p * scale for p in parts]
    rest = np.eye(n) - sum(p * f for p, f in zip(parts, phi[:-1]))
    A = np.stack(parts + [rest / phi[-1]])
    A = 0.5 * (A + np.transpose(A, (0, 2, 1)))
    return QuadraticTestbed(A, rng.standard_normal((n_tasks, n)), phi)


def quad_hypergrad_at(tb: QuadraticTestbed, w) -> np.ndarray:
    """-grad_w L_0(w) . H^-1 . d/dphi grad_w L_aux(w), evaluated at any w."""
    w = np.asarray(w, dtype=np.float64)
    g0 = tb.A[0] @ (w - tb.c[0])
    v = np.linalg.solve(tb.hessian(), g0)
    mixed = np.stack([tb.A[t] @ (w - tb.c[t]) for t in range(tb.n_tasks)])
    return -mixed @ v


def quad_closed_form(tb: QuadraticTestbed) -> tuple[np.ndarray, np.ndarray]:
    """Exact lower-level optimum and exact hypergradient of L_0(w*(phi))."""
    np.linalg.cholesky(tb.hessian())
    w = tb.w_star()
    return w, quad_hypergrad_at(tb, w)


def quad_fd_hypergrad(tb: QuadraticTestbed, step: float = 1e-5) -> np.ndarray:
    """Central differences of phi -> L_0(w*(phi)); independent of the IFT formula."""
    out = np.zeros(tb.n_tasks)
    for t in range(tb.n_tasks):
        e = np.zeros(tb.n_tasks)
        e[t] = step
        out[t] = (tb.primary_value(tb.w_star(tb.phi + e)) - tb.primary_value(tb.w_star(tb.phi - e))) / (2 * step)
    return out


# ---------------------------------------------------------------------------
# learner suites

Batch = dict


def _mlp_init(rng, sizes):
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        params.append(np.zeros(fan_out))
    return params


def _dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    y = ad.matmul(x, w)
    return ad.add(y, ad.expand(b, y.shape))


@dataclass
class TaskSpec:
    """A multi-task learner problem with seeded batch streams.

    Subclasses provide :meth:`losses`, returning the per-sample loss matrix
    ``(B, T+1)`` with the primary task in column 0.
    """

    name: str
    trunk: tuple[int, ...]
    head_dims: tuple[int, ...]
    task_names: tuple[str, ...]
    roles: tuple[str, ...]
    train: dict[str, np.ndarray]
    val: dict[str, np.ndarray]
    test: dict[str, np.ndarray]
    batch_size: int = 32
    steps_per_epoch: int = 4
    seed: int = 0
    metadata: dict = field(default_factory=dict)
    # zero output heads make every prediction 0 at init
    zero_init_heads: ClassVar[bool] = False

    def __post_init__(self):
        if len(self.task_names) < 2:
            raise ValueError("a suite needs at least one auxiliary task")

    @property
    def n_tasks(self) -> int:
        return len(self.task_names)

    def init_learner(self, rng: np.random.Generator) -> list[Tensor]:
        arrays = _mlp_init(rng, self.trunk)
        for dim in self.head_dims:
            head = _mlp_init(rng, (self.trunk[-1], dim))
            arrays += [np.zeros_like(a) for a in head] if self.zero_init_heads else head
        return [ad.parameter(a) for a in arrays]

    def num_learner_params(self) -> int:
        sizes = list(zip(self.trunk[:-1], self.trunk[1:])) + [(self.trunk[-1], d) for d in self.head_dims]
        return sum(i * o + o for i, o in sizes)

    def features(self, w: list[Tensor], x) -> Tensor:
        h = ad.tensor(x)
        n_layers = len(self.trunk) - 1
        for i in range(n_layers):
            h = ad.tanh(_dense(h, w[2 * i], w[2 * i + 1]))
        return h

    def head(self, w: list[Tensor], feats: Tensor, k: int) -> Tensor:
        base = 2 * (len(self.trunk) - 1)
        return _dense(feats, w[base + 2 * k], w[base + 2 * k + 1])

    def losses(self, w: list[Tensor], batch: Batch) -> Tensor:
        raise NotImplementedError

    def _stream(self, data: dict, seed: int) -> Iterator[Batch]:
        rng = np.random.default_rng(seed)
        n = len(next(iter(data.values())))
        bs = min(self.batch_size, n)
        while True:
            perm = rng.permutation(n)
            for start in range(0, n - bs + 1, bs):
                idx = perm[start:start + bs]
                yield self._augment({k: v[idx] for k, v in data.items()}, rng)

    def _augment(self, batch: Batch, rng: np.random.Generator) -> Batch:
        return batch

    def train_batches(self, seed: int) -> Iterator[Batch]:
        return self._stream(self.train, seed)

    def val_batches(self, seed: int) -> Iterator[Batch]:
        return self._stream(self.val, seed + 7919)

    def test_batch(self) -> Batch:
        return self._augment(dict(self.test), np.random.default_rng(self.seed + 104729))

    def describe(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "trunk": list(self.trunk),
            "head_dims": list(self.head_dims),
            "tasks": list(self.task_names),
            "roles": list(self.roles),
            "n_train": len(next(iter(self.train.values()))),
            "n_val": len(next(iter(self.val.values()))),
            "n_test": len(next(iter(self.test.values()))),
            "batch_size": self.batch_size,
            "steps_per_epoch": self.steps_per_epoch,
            "learner_params": self.num_learner_params(),
            **self.metadata,
        }


def _sq_err(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = ad.sub(pred, ad.constant(target))
    return ad.mean(ad.mul(diff, diff), axis=1, keepdims=True)


class RegressionSuite(TaskSpec):
    """Helpful and harmful tasks read out through the primary head; neutral ones get their own.

    Heads start at zero so the harmful gradient is uncorrelated with the
    primary one at init (independent zero-mean teachers).
    """

    zero_init_heads = True

    sampler = None

    def sample(self, m: int, rng: np.random.Generator) -> Batch:
        """Fresh labelled points from the same generators."""
        return self.sampler(m, rng)

    def head_index(self, k: int) -> int:
        return self.metadata["head_of"][k]

    def losses(self, w, batch):
        feats = self.features(w, batch["x"])
        outs: dict[int, Tensor] = {}
        cols = []
        for k, role in enumerate(self.roles):
            h = self.head_index(k)
            if h not in outs:
                outs[h] = self.head(w, feats, h)
            target = batch["x"] if role == "neutral" else batch["y"][:, k:k + 1]
            cols.append(_sq_err(outs[h], target))
        return ad.concat(cols, axis=1)


def _teacher(rng, dim, hidden=16):
    w1 = rng.standard_normal((dim, hidden)) / np.sqrt(dim)
    b1 = rng.standard_normal(hidden) * 0.5
    w2 = rng.standard_normal((hidden, 1)) / np.sqrt(hidden)

    def f(x):
        return (np.tanh(x @ w1 + b1) @ w2)[:, 0]

    probe = f(rng.standard_normal((4096, dim)))
    mu, sd = probe.mean(), probe.std()
    return lambda x: (f(x) - mu) / sd


def _rough_teacher(rng, dim, n_waves=64, bandwidth=2.0):
    """Random high-frequency function: sum of cosines with wide frequencies.

    Its correlation with any smooth function of Gaussian x decays like
    exp(-|omega|^2 / 2), so it is nearly orthogonal to f and to the learner's
    initial features.
    """
    omega = rng.standard_normal((dim, n_waves)) * bandwidth
    phase = rng.uniform(0, 2 * np.pi, n_waves)

    def g(x):
        return np.cos(x @ omega + phase).sum(axis=1)

    probe = g(rng.standard_normal((4096, dim)))
    mu, sd = probe.mean(), probe.std()
    return lambda x: (g(x) - mu) / sd


REGRESSION_ROLES = ("helpful", "harmful", "neutral")


def make_regression_suite(
    seed: int = 0,
    n_tasks: int = 4,
    dims: int = 8,
    hidden: tuple[int, ...] = (32, 32),
    n_train: int = 128,
    n_val: int = 64,
    n_test: int = 1024,
    primary_noise: float = 0.5,
    helpful_noise: float = 0.1,
    harmful_scale: float = 1.0,
    batch_size: int = 32,
    steps_per_epoch: int = 4,
    roles: tuple[str, ...] | None = None,
) -> RegressionSuite:
    """Regression to a random teacher f(x) plus designed auxiliary targets.

    helpful: f(x) with small label noise; harmful: an independent high-frequency
    random function;
    neutral: reconstruct x. Helpful and harmful targets are fitted by the
    primary output head, so a harmful task competes for the same prediction
    while its gradient is uncorrelated with the primary one at initialization.
    Noise scales are relative to the unit target std.
    """
    if dims > 64:
        raise ValueError("dims must be at most 64")
    if n_tasks < 2:
        raise ValueError("need at least one auxiliary task")
    rng = np.random.default_rng(seed)
    if roles is None:
        roles = tuple(REGRESSION_ROLES[i % 3] for i in range(n_tasks - 1))
    roles = ("primary",) + tuple(roles)
    f = _teacher(rng, dims)
    harmful = [_rough_teacher(rng, dims) for _ in roles]

    def sample(m, gen=rng):
        x = gen.standard_normal((m, dims))
        fx = f(x)
        y = np.zeros((m, len(roles)))
        for k, role in enumerate(roles):
            if role == "primary":
                y[:, k] = fx + primary_noise * gen.standard_normal(m)
            elif role == "helpful":
                y[:, k] = fx + helpful_noise * gen.standard_normal(m)
            elif role == "harmful":
                y[:, k] = harmful_scale * harmful[k](x)
        return {"x": x, "y": y}

    test = sample(n_test)
    test["y"][:, 0] = f(test["x"])  # held-out primary targets are noise-free
    head_of, head_dims = [], []
    for r in roles:
        if r in ("helpful", "harmful"):
            head_of.append(0)
        else:
            head_of.append(len(head_dims))
            head_dims.append(dims if r == "neutral" else 1)
    names = tuple(f"{r}{k}" if r != "primary" else "primary" for k, r in enumerate(roles))
    suite = RegressionSuite(
        name="regression",
        trunk=(dims,) + tuple(hidden),
        head_dims=tuple(head_dims),
        task_names=names,
        roles=roles,
        train=sample(n_train),
        val=sample(n_val),
        test=test,
        batch_size=batch_size,
        steps_per_epoch=steps_per_epoch,
        seed=seed,
        metadata={
            "dims": dims,
            "primary_noise_std": primary_noise,
            "helpful_noise_std": helpful_noise,
            "harmful_scale": harmful_scale,
            "head_of": head_of,
        },
    )
    suite.sampler = sample
    return suite


def make_reduced_regression_suite(seed: int = 0) -> RegressionSuite:
    """Small learner (under 200 parameters) so the dense-Hessian scheme applies."""
    return make_regression_suite(seed, n_tasks=3, dims=3, hidden=(8,), roles=("helpful", "harmful"))


# ---------------------------------------------------------------------------
# classification with mixup and rotation auxiliaries


def rotate(x: np.ndarray, k) -> np.ndarray:
    """Rotate 2-D points by k * 90 degrees (k per row or scalar)."""
    k = np.broadcast_to(np.asarray(k) % 4, (x.shape[0],))
    theta = k * (np.pi / 2)
    c, s = np.round(np.cos(theta)), np.round(np.sin(theta))
    return np.stack([c * x[:, 0] - s * x[:, 1], s * x[:, 0] + c * x[:, 1]], axis=1)


def _ce(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-sample cross-entropy against (possibly soft) target rows."""
    logp = ad.log_softmax(logits)
    return ad.neg(ad.tsum(ad.mul(logp, ad.constant(targets)), axis=1, keepdims=True))


BLOB_CENTERS = np.array([[2.5, 0.5], [-0.5, 2.8], [-2.2, -1.6], [1.0, -2.6]])


class ClassificationSuite(TaskSpec):
    """Mixup shares the primary classifier; rotation has its own head."""

    def _augment(self, batch, rng):
        m = len(batch["x"])
        out = dict(batch)
        out["perm"] = rng.permutation(m)
        out["lam"] = rng.beta(self.metadata["mixup_alpha"], self.metadata["mixup_alpha"], size=m)
        out["rot"] = rng.integers(0, 4, size=m)
        return out

    def losses(self, w, batch):
        x, y = batch["x"], batch["y"]
        onehot = np.eye(4)[y]
        primary = _ce(self.head(w, self.features(w, x), 0), onehot)
        lam = batch["lam"][:, None]
        perm = batch["perm"]
        x_mix = lam * x + (1 - lam) * x[perm]
        y_mix = lam * onehot + (1 - lam) * onehot[perm]
        mix = _ce(self.head(w, self.features(w, x_mix), 0), y_mix)
        rot_logits = self.head(w, self.features(w, rotate(x, batch["rot"])), 1)
        rot = _ce(rot_logits, np.eye(4)[batch["rot"]])
        return ad.concat([primary, mix, rot], axis=1)


def make_classification_suite(seed: int = 0, n_train: int = 256, n_val: int = 64, n_test: int = 1024, spread: float = 0.7):
    rng = np.random.default_rng(seed)

    def sample(m):
        y = rng.integers(0, 4, size=m)
        x = BLOB_CENTERS[y] + spread * rng.standard_normal((m, 2))
        return {"x": x, "y": y}

    return ClassificationSuite(
        name="classification",
        trunk=(2, 32, 32),
        head_dims=(4, 4),
        task_names=("primary", "mixup", "rotation"),
        roles=("primary", "helpful", "neutral"),
        train=sample(n_train),
        val=sample(n_val),
        test=sample(n_test),
        seed=seed,
        metadata={"classes": 4, "blob_std": spread, "mixup_alpha": 0.4},
    )


def accuracy(suite: ClassificationSuite, w: list[Tensor], batch: Batch) -> float:
    with ad.no_grad():
        logits = suite.head(w, suite.features(w, batch["x"]), 0).data
    return float(np.mean(logits.argmax(axis=1) == batch["y"]))


SUITES = {"regression": make_regression_suite, "classification": make_classification_suite,
          "regression_small": make_reduced_regression_suite}


def make_suite(name: str, seed: int) -> TaskSpec:
    try:
        return SUITES[name](seed)
    except KeyError:
        raise ValueError(f"unknown suite {name!r}; expected one of {sorted(SUITES)}") from None
