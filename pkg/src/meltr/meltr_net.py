"""The loss-combining transformer.

Each task loss becomes one token: a scale embedding (a small GELU MLP applied
to the scalar loss) plus a learnable task embedding. A pre-norm transformer
encoder self-attends over the tokens, which are then mean-pooled and mapped to
one scalar by an affine head. Losses are fed per sample, so a batch is a
``(B, T+1)`` matrix and the network returns ``B`` scalars.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

VARIANTS = ("full", "linear", "se_only", "te_only")


@dataclass(frozen=True)
class MeltrConfig:
    n_tasks: int
    d: int = 32
    heads: int = 4
    layers: int = 1
    variant: str = "full"
    ffn_mult: int = 4

    def __post_init__(self):
        if self.n_tasks < 1:
            raise ValueError("need at least one task")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")

    @classmethod
    def paper_scale(cls, n_tasks: int, **kw) -> MeltrConfig:
        return cls(n_tasks=n_tasks, d=512, heads=8, **kw)


@dataclass
class LossVector:
    entries: np.ndarray
    task_ids: np.ndarray

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64).reshape(-1)
        self.task_ids = np.asarray(self.task_ids, dtype=np.int64).reshape(-1)
        if self.entries.size < 1:
            raise ValueError("a loss vector needs at least the primary loss")
        if self.entries.shape != self.task_ids.shape:
            raise ValueError("entries and task_ids differ in length")
        if not np.all(np.isfinite(self.entries)):
            raise ValueError("loss entries must be finite")

    @classmethod
    def of(cls, entries) -> LossVector:
        entries = np.asarray(entries, dtype=np.float64).reshape(-1)
        return cls(entries, np.arange(entries.size))

    def permuted(self, perm) -> LossVector:
        perm = np.asarray(perm)
        return LossVector(self.entries[perm], self.task_ids[perm])


class Combiner(Protocol):
    n_tasks: int

    def forward_batch(self, losses, task_ids=None) -> Tensor: ...

    def parameters(self) -> list[Tensor]: ...


def _trunc_normal(rng, shape, std=0.02):
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(bad.sum())
        bad = np.abs(x) > 2.0
    return x * std


def _kaiming_uniform(rng, fan_in, shape):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: MeltrConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, n = config.d, config.n_tasks
    if config.variant == "linear":
        return {"lin_w": _trunc_normal(rng, (n,)), "lin_b": np.zeros(())}
    p: dict[str, np.ndarray] = {}
    if config.variant != "te_only":
        p["se_w1"] = _kaiming_uniform(rng, 1, (1, d))
        p["se_b1"] = np.zeros(d)
        p["se_w2"] = _kaiming_uniform(rng, d, (d, d))
        p["se_b2"] = np.zeros(d)
    if config.variant != "se_only":
        p["te"] = rng.standard_normal((n, d)) * 0.02
    f = config.ffn_mult * d
    for i in range(config.layers):
        pre = f"l{i}_"
        p[pre + "ln1_g"] = np.ones(d)
        p[pre + "ln1_b"] = np.zeros(d)
        for name in ("q", "k", "v", "o"):
            p[pre + "w" + name] = _trunc_normal(rng, (d, d))
            p[pre + "b" + name] = np.zeros(d)
        p[pre + "ln2_g"] = np.ones(d)
        p[pre + "ln2_b"] = np.zeros(d)
        p[pre + "ff_w1"] = _trunc_normal(rng, (d, f))
        p[pre + "ff_b1"] = np.zeros(f)
        p[pre + "ff_w2"] = _trunc_normal(rng, (f, d))
        p[pre + "ff_b2"] = np.zeros(d)
    p["head_w"] = _trunc_normal(rng, (d, 1))
    p["head_b"] = np.zeros(1)
    return p


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    y = ad.matmul(x, w)
    return ad.add(y, ad.expand(b, y.shape))


def _affine_norm(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    y = ad.layer_norm(x)
    return ad.add(ad.mul(y, ad.expand(g, y.shape)), ad.expand(b, y.shape))


class MeltrNet:
    """Loss-combining transformer; ``params`` are the meta-parameters."""

    def __init__(self, config: MeltrConfig, params: dict[str, np.ndarray | Tensor]):
        self.config = config
        self.params = {k: v if isinstance(v, Tensor) else ad.parameter(v) for k, v in params.items()}

    @classmethod
    def init(cls, config: MeltrConfig, rng: np.random.Generator | int = 0) -> MeltrNet:
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        return cls(config, init_params(config, rng))

    @property
    def n_tasks(self) -> int:
        return self.config.n_tasks

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def names(self) -> list[str]:
        return list(self.params)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def copy(self) -> MeltrNet:
        return MeltrNet(self.config, self.state())

    def load(self, arrays: Sequence[np.ndarray]) -> None:
        for k, a in zip(list(self.params), arrays):
            self.params[k] = ad.parameter(a)

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- pieces ------------------------------------------------------------

    def scale_embed(self, losses: Tensor) -> Tensor:
        """Map a column of scalar losses ``(m,)`` to ``(m, d)`` tokens."""
        p = self.params
        x = ad.reshape(losses, (losses.size, 1))
        h = ad.gelu(linear(x, p["se_w1"], p["se_b1"]))
        return linear(h, p["se_w2"], p["se_b2"])

    def task_embed(self, task_ids) -> Tensor:
        return ad.embedding(self.params["te"], task_ids)

    def _encoder_layer(self, x: Tensor, i: int, batch: int, n: int) -> Tensor:
        p = {k[len(f"l{i}_"):]: v for k, v in self.params.items() if k.startswith(f"l{i}_")}
        d, h = self.config.d, self.config.heads
        dk = d // h
        z = _affine_norm(x, p["ln1_g"], p["ln1_b"])
        def split(t):
            # (B*n, d) -> (B, h, n, dk)
            return ad.transpose(ad.reshape(t, (batch, n, h, dk)), (0, 2, 1, 3))

        q = split(linear(z, p["wq"], p["bq"]))
        k = split(linear(z, p["wk"], p["bk"]))
        v = split(linear(z, p["wv"], p["bv"]))
        scores = ad.mul(ad.matmul(q, ad.swap_last(k)), 1.0 / math.sqrt(dk))
        att = ad.matmul(ad.softmax(scores), v)
        att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (batch * n, d))
        x = ad.add(x, linear(att, p["wo"], p["bo"]))
        z = _affine_norm(x, p["ln2_g"], p["ln2_b"])
        ff = linear(ad.gelu(linear(z, p["ff_w1"], p["ff_b1"])), p["ff_w2"], p["ff_b2"])
        return ad.add(x, ff)

    # -- forward -----------------------------------------------------------

    def forward_batch(self, losses, task_ids=None) -> Tensor:
        """Per-sample outputs ``(B,)`` for a loss matrix ``(B, n)``."""
        losses = ad.tensor(losses)
        if losses.ndim == 1:
            losses = ad.reshape(losses, (1, losses.size))
        batch, n = losses.shape
        ids = np.arange(n) if task_ids is None else np.asarray(task_ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = np.broadcast_to(ids, (batch, n))
        if ids.shape != (batch, n):
            raise ValueError(f"task_ids shape {ids.shape} does not match losses {losses.shape}")
        if ids.min() < 0 or ids.max() >= self.n_tasks:
            raise IndexError(f"task id out of range [0, {self.n_tasks})")
        cfg = self.config
        p = self.params
        if cfg.variant == "linear":
            w = ad.reshape(ad.embedding(p["lin_w"], ids.reshape(-1)), (batch, n))
            out = ad.tsum(ad.mul(losses, w), axis=1)
            return ad.add(out, ad.expand(p["lin_b"], out.shape))
        parts = []
        if cfg.variant != "te_only":
            parts.append(self.scale_embed(ad.reshape(losses, (batch * n,))))
        if cfg.variant != "se_only":
            parts.append(self.task_embed(ids.reshape(-1)))
        x = parts[0] if len(parts) == 1 else ad.add(parts[0], parts[1])
        for i in range(cfg.layers):
            x = self._encoder_layer(x, i, batch, n)
        pooled = ad.mean(ad.reshape(x, (batch, n, cfg.d)), axis=1)
        return ad.reshape(linear(pooled, p["head_w"], p["head_b"]), (batch,))

    def __call__(self, losses, task_ids=None) -> Tensor:
        return ad.mean(self.forward_batch(losses, task_ids))

    def describe(self) -> dict:
        return {**asdict(self.config), "num_params": self.num_params()}


# ---------------------------------------------------------------------------
# module-level operations


def _as_entries(lv) -> tuple[Tensor, np.ndarray]:
    if isinstance(lv, LossVector):
        return ad.tensor(lv.entries), lv.task_ids
    t = ad.tensor(lv)
    return t, np.arange(t.size)


def scale_embed(net: MeltrNet, loss) -> Tensor:
    loss = ad.tensor(loss)
    if not np.all(np.isfinite(loss.data)):
        raise ValueError("loss must be finite")
    return ad.reshape(net.scale_embed(ad.reshape(loss, (1,))), (net.config.d,))


def task_embed(net: MeltrNet, t: int) -> Tensor:
    if not 0 <= t < net.n_tasks:
        raise IndexError(f"task index {t} out of range")
    return ad.reshape(net.task_embed(np.array([t])), (net.config.d,))


def meltr_forward(lv, net: Combiner) -> Tensor:
    """Scalar combined loss for one loss vector (LossVector or 1-D tensor)."""
    entries, ids = _as_entries(lv)
    return ad.reshape(net.forward_batch(ad.reshape(entries, (1, entries.size)), ids[None, :]), ())


def probe_partials(lv, net: Combiner) -> np.ndarray:
    """d output / d loss_t for every entry, from one backward pass."""
    entries, ids = _as_entries(lv)
    leaf = ad.Tensor(entries.data, requires_grad=True)
    with ad.enable_grad():
        out = net.forward_batch(ad.reshape(leaf, (1, leaf.size)), ids[None, :])
        (g,) = ad.grad(ad.tsum(out), [leaf], warn_unused=False)
    return g.data.copy()


def batch_partials(net: Combiner, losses: np.ndarray, task_ids=None) -> np.ndarray:
    """Per-sample partials ``(B, n)`` of each sample's output w.r.t. its own losses."""
    leaf = ad.Tensor(np.asarray(losses, dtype=np.float64), requires_grad=True)
    with ad.enable_grad():
        out = ad.tsum(net.forward_batch(leaf, task_ids))
        (g,) = ad.grad(out, [leaf], warn_unused=False)
    return g.data.copy()


def _grid(lo, hi, steps):
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise ValueError("sweep range must be finite")
    if not lo < hi:
        raise ValueError("sweep range needs lo < hi")
    if steps < 2:
        raise ValueError("need at least two grid points")
    return np.linspace(lo, hi, steps)


def sweep_surface(
    net: Combiner,
    sweep_task: int,
    range_: tuple[float, float] = (0.0, 3.0),
    steps: int = 31,
    baseline=None,
) -> list[tuple[int, float, float, float]]:
    """Vary one task's loss over a grid with the others held at ``baseline``.

    Returns rows ``(task_id, loss_value, output, partial)``.
    """
    n = net.n_tasks
    base = np.ones(n) if baseline is None else _as_entries(baseline)[0].data.copy()
    grid = _grid(*range_, steps)
    mat = np.tile(base, (steps, 1))
    mat[:, sweep_task] = grid
    leaf = ad.Tensor(mat, requires_grad=True)
    with ad.enable_grad():
        out = net.forward_batch(leaf)
        (g,) = ad.grad(ad.tsum(out), [leaf], warn_unused=False)
    return [
        (sweep_task, float(v), float(o), float(p))
        for v, o, p in zip(grid, out.data, g.data[:, sweep_task])
    ]


def surface_2d(
    net: Combiner,
    task_a: int,
    task_b: int,
    range_: tuple[float, float] = (0.0, 3.0),
    steps: int = 31,
    baseline=None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Output grid over two tasks' losses; returns ``(values_a, values_b, grid)``."""
    if task_a == task_b:
        raise ValueError("need two distinct tasks")
    n = net.n_tasks
    base = np.ones(n) if baseline is None else _as_entries(baseline)[0].data.copy()
    va = _grid(*range_, steps)
    vb = _grid(*range_, steps)
    aa, bb = np.meshgrid(va, vb, indexing="ij")
    mat = np.tile(base, (aa.size, 1))
    mat[:, task_a] = aa.reshape(-1)
    mat[:, task_b] = bb.reshape(-1)
    with ad.no_grad():
        out = net.forward_batch(mat).data.reshape(steps, steps)
    return va, vb, out


def mixed_second_difference(grid: np.ndarray) -> np.ndarray:
    """Discrete d^2/da db of a 2-D grid."""
    return grid[1:, 1:] - grid[1:, :-1] - grid[:-1, 1:] + grid[:-1, :-1]


def calibrate_to_sum(
    net: MeltrNet,
    samples: np.ndarray,
    steps: int = 100,
    lr: float = 1e-2,
    rng: np.random.Generator | None = None,
    batch: int = 32,
) -> float:
    """Fit the network so its output tracks the plain loss sum on ``samples``.

    Starts training from the multi-task baseline instead of a random
    combination. Returns the final mean squared gap.
    """
    from .optim import Adam

    rng = rng or np.random.default_rng(0)
    samples = np.asarray(samples, dtype=np.float64)
    opt = Adam(lr)
    params = net.parameters()
    gap = float("nan")
    for _ in range(steps):
        idx = rng.integers(0, samples.shape[0], size=min(batch, samples.shape[0]))
        mat = samples[idx]
        with ad.enable_grad():
            out = net.forward_batch(mat)
            diff = ad.sub(out, mat.sum(axis=1))
            loss = ad.mean(ad.mul(diff, diff))
            grads = ad.grad(loss, params, warn_unused=False)
        gap = loss.item()
        net.load(opt.step([p.data for p in params], [g.data for g in grads]))
        params = net.parameters()
    return gap
