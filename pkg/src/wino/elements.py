"""Reference-element shape functions and Gaussian quadrature.

Bilinear Q4 and biquadratic Q9 bases on the reference square [-1,1]^2, with
isoparametric maps to axis-aligned rectangles (diagonal Jacobian).  Node
ordering: Q4 counter-clockwise from the lower-left corner; Q9 corners first,
then mid-edges (bottom, right, top, left), then the centre node.
"""

from __future__ import annotations

import numpy as np
from numpy.polynomial.legendre import leggauss

__all__ = [
    "Q4",
    "Q9",
    "shape",
    "shape_grad_ref",
    "grad_matrix",
    "interpolate",
    "gauss_rule",
    "facet_rule",
    "QuadratureRule",
]

Q4 = "Q4"
Q9 = "Q9"

# reference coordinates of the element nodes
_Q4_NODES = np.array([(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)])
_Q9_NODES = np.array(
    [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0),
     (0.0, -1.0), (1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, 0.0)]
)


def element_nodes(kind: str) -> np.ndarray:
    if kind == Q4:
        return _Q4_NODES
    if kind == Q9:
        return _Q9_NODES
    raise ValueError(f"unknown element kind {kind!r}")


def _lag3(t):
    """1-D quadratic Lagrange basis on nodes (-1, 1, 0) and derivatives."""
    t = np.asarray(t, dtype=np.float64)
    vals = np.stack([0.5 * t * (t - 1.0), 0.5 * t * (t + 1.0), 1.0 - t * t])
    ders = np.stack([t - 0.5, t + 0.5, -2.0 * t])
    return vals, ders


# map Q9 node id -> (xi 1-D node index, eta 1-D node index) in (-1, 1, 0) order
_Q9_1D = np.array(
    [(0, 0), (1, 0), (1, 1), (0, 1), (2, 0), (1, 2), (2, 1), (0, 2), (2, 2)]
)


def shape(kind: str, xi, eta) -> np.ndarray:
    """Shape function values; output shape (..., n_nodes)."""
    xi = np.asarray(xi, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    if kind == Q4:
        xs, ys = _Q4_NODES[:, 0], _Q4_NODES[:, 1]
        return 0.25 * (1.0 + xi[..., None] * xs) * (1.0 + eta[..., None] * ys)
    if kind == Q9:
        lx, _ = _lag3(xi)
        ly, _ = _lag3(eta)
        ix, iy = _Q9_1D[:, 0], _Q9_1D[:, 1]
        return np.moveaxis(lx[ix] * ly[iy], 0, -1)
    raise ValueError(f"unknown element kind {kind!r}")


def shape_grad_ref(kind: str, xi, eta) -> np.ndarray:
    """Reference-coordinate gradients; output shape (..., 2, n_nodes)."""
    xi = np.asarray(xi, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    if kind == Q4:
        xs, ys = _Q4_NODES[:, 0], _Q4_NODES[:, 1]
        dxi = 0.25 * xs * (1.0 + eta[..., None] * ys)
        deta = 0.25 * ys * (1.0 + xi[..., None] * xs)
        return np.stack([dxi, deta], axis=-2)
    if kind == Q9:
        lx, dlx = _lag3(xi)
        ly, dly = _lag3(eta)
        ix, iy = _Q9_1D[:, 0], _Q9_1D[:, 1]
        dxi = np.moveaxis(dlx[ix] * ly[iy], 0, -1)
        deta = np.moveaxis(lx[ix] * dly[iy], 0, -1)
        return np.stack([dxi, deta], axis=-2)
    raise ValueError(f"unknown element kind {kind!r}")


def grad_matrix(kind: str, hx: float, hy: float, xi, eta) -> np.ndarray:
    """Physical gradient matrix B with columns grad N_a, shape (..., 2, n_nodes).

    Valid for an axis-aligned rectangle of side lengths (hx, hy); the
    isoparametric Jacobian is diagonal with entries (hx/2, hy/2).
    """
    if hx <= 0 or hy <= 0:
        raise ValueError(f"degenerate cell: side lengths ({hx}, {hy})")
    g = shape_grad_ref(kind, xi, eta).copy()
    g[..., 0, :] *= 2.0 / hx
    g[..., 1, :] *= 2.0 / hy
    return g


def interpolate(kind: str, nodal, xi, eta):
    """Evaluate the element interpolant at reference points.

    ``nodal`` has shape (n_nodes,) or (n_nodes, c); the result broadcasts the
    point shape against the trailing component axis.
    """
    nodal = np.asarray(nodal, dtype=np.float64)
    n = shape(kind, xi, eta)
    nn = element_nodes(kind).shape[0]
    if nodal.shape[0] != nn:
        raise ValueError(f"expected {nn} nodal values, got {nodal.shape[0]}")
    return np.tensordot(n, nodal, axes=([-1], [0]))


class QuadratureRule:
    """Tensor-product Gauss-Legendre rule on the reference square."""

    def __init__(self, points: np.ndarray, weights: np.ndarray):
        self.points = points
        self.weights = weights

    def __len__(self) -> int:
        return len(self.weights)


def gauss_rule(p: int) -> QuadratureRule:
    """p x p Gauss-Legendre rule; exact for degree 2p-1 per axis."""
    if p not in (1, 2, 3):
        raise ValueError(f"unsupported quadrature order {p}")
    t, w = leggauss(p)
    XI, ETA = np.meshgrid(t, t, indexing="ij")
    WX, WY = np.meshgrid(w, w, indexing="ij")
    return QuadratureRule(
        np.stack([XI.ravel(), ETA.ravel()], axis=1), (WX * WY).ravel()
    )


def facet_rule(p: int) -> tuple[np.ndarray, np.ndarray]:
    """1-D Gauss-Legendre nodes and weights on [-1, 1]."""
    if p not in (1, 2, 3):
        raise ValueError(f"unsupported quadrature order {p}")
    t, w = leggauss(p)
    return t, w
