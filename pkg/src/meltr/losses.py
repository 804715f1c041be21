"""Primary/auxiliary objective assembly and fixed linear combiners."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .meltr_net import LossVector

GAMMA_GRID = (0.0, 0.001, 0.01, 0.1, 1.0, 10.0, 100.0)
GAMMA_SEARCH = (0.1, 0.3, 0.5)
DEFAULT_GAMMA = 0.3


def _as_matrix(losses) -> tuple[Tensor, np.ndarray | None]:
    if isinstance(losses, LossVector):
        return ad.tensor(losses.entries.reshape(1, -1)), losses.task_ids[None, :]
    t = ad.tensor(losses)
    if t.ndim == 1:
        t = ad.reshape(t, (1, t.size))
    return t, None


@dataclass
class LossBundle:
    aux: Tensor
    pri: Tensor
    reg: Tensor
    raw: Tensor
    gamma: float


def reg_loss(losses, net) -> Tensor:
    """Mean over samples of |combined(l) - sum_t l_t|."""
    mat, ids = _as_matrix(losses)
    out = net.forward_batch(mat, ids)
    return ad.mean(ad.abs_(ad.sub(out, ad.tsum(mat, axis=1))))


def primary_loss(losses, net, gamma: float) -> Tensor:
    """Mean primary loss plus ``gamma`` times the regularizer."""
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    mat, ids = _as_matrix(losses)
    primary = ad.mean(ad.take(mat, 1, 0, 1)) if ids is None else ad.mean(_primary_column(mat, ids))
    if gamma == 0:
        return primary
    return ad.add(primary, ad.mul(reg_loss(losses, net), gamma))


def _primary_column(mat: Tensor, ids: np.ndarray) -> Tensor:
    col = int(np.flatnonzero(ids[0] == 0)[0])
    return ad.take(mat, 1, col, col + 1)


def assemble(losses, net, gamma: float) -> LossBundle:
    mat, ids = _as_matrix(losses)
    return LossBundle(
        aux=net(mat, ids),
        pri=primary_loss(losses, net, gamma),
        reg=reg_loss(losses, net),
        raw=mat,
        gamma=gamma,
    )


def fixed_weight_combiner(losses, coeffs) -> Tensor:
    """sum_t coeffs_t * l_t for one loss vector."""
    mat, _ = _as_matrix(losses)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != (mat.shape[1],):
        raise ValueError(f"{coeffs.size} coefficients for {mat.shape[1]} losses")
    return ad.reshape(FixedCombiner(coeffs).forward_batch(mat), ())


class FixedCombiner:
    """A non-learnable linear combination with the same interface as the network."""

    def __init__(self, coeffs):
        self.coeffs = np.asarray(coeffs, dtype=np.float64)
        self.n_tasks = self.coeffs.size

    def forward_batch(self, losses, task_ids=None) -> Tensor:
        mat = ad.tensor(losses)
        if mat.ndim == 1:
            mat = ad.reshape(mat, (1, mat.size))
        if mat.shape[1] != self.n_tasks:
            raise ValueError(f"expected {self.n_tasks} losses per sample, got {mat.shape[1]}")
        ids = np.arange(self.n_tasks) if task_ids is None else np.asarray(task_ids).reshape(-1, self.n_tasks)[0]
        w = ad.constant(np.broadcast_to(self.coeffs[ids], mat.shape).copy())
        return ad.tsum(ad.mul(mat, w), axis=1)

    def __call__(self, losses, task_ids=None) -> Tensor:
        return ad.mean(self.forward_batch(losses, task_ids))

    def parameters(self) -> list[Tensor]:
        return []


def manual_scheme(name: str, n_tasks: int, helpful=(), harmful=()) -> np.ndarray:
    """Coefficient vectors in the spirit of the hand-designed multi-task rows.

    A: primary only. B: primary + helpful. C: all ones. D: all ones minus
    harmful. E: D with primary and helpful weighted 8.
    """
    c = np.zeros(n_tasks)
    name = name.upper()
    if name == "A":
        c[0] = 1
    elif name == "B":
        c[0] = 1
        c[list(helpful)] = 1
    elif name == "C":
        c[:] = 1
    elif name in ("D", "E"):
        c[:] = 1
        c[list(harmful)] = 0
        if name == "E":
            c[0] = 8
            c[list(helpful)] = 8
    else:
        raise ValueError(f"unknown scheme {name!r}")
    return c
