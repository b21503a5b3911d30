"""Compressible Neo-Hookean plane-strain constitutive law.

Energy, first Piola-Kirchhoff stress and its directional derivative.  Plane
strain embeds the 2x2 deformation gradient as diag(F, 1) in 3-D, so
tr(C) = C11 + C22 + 1 and the energy keeps the 3-D constant:

    W(F) = mu/2 (tr C - 3 - 2 ln J) + lambda/2 (ln J)^2.

The componentwise helpers at the bottom run unchanged on numpy arrays and on
autodiff tensors; the array API wraps them for (..., 2, 2) stacks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

__all__ = [
    "Material",
    "InvertedElementError",
    "energy",
    "piola",
    "tangent",
    "piola_parts",
    "tangent_parts",
    "energy_parts",
    "StressState",
]


class InvertedElementError(RuntimeError):
    """Raised when det F <= 0 at an evaluation point."""


@dataclass(frozen=True)
class Material:
    """Young's modulus / Poisson ratio pair with derived Lame parameters."""

    E: float
    nu: float

    def __post_init__(self):
        if self.E <= 0:
            raise ValueError(f"Young's modulus must be positive, got {self.E}")
        if not 0.0 < self.nu < 0.5:
            raise ValueError(f"Poisson ratio must lie in (0, 0.5), got {self.nu}")

    @property
    def mu(self) -> float:
        return self.E / (2.0 * (1.0 + self.nu))

    @property
    def lam(self) -> float:
        return self.E * self.nu / ((1.0 + self.nu) * (1.0 - 2.0 * self.nu))

    @classmethod
    def from_lame(cls, mu: float, lam: float) -> "Material":
        nu = lam / (2.0 * (lam + mu))
        E = 2.0 * mu * (1.0 + nu)
        return cls(E=E, nu=nu)


def _split(F: np.ndarray):
    F = np.asarray(F, dtype=np.float64)
    if F.shape[-2:] != (2, 2):
        raise ValueError(f"expected trailing (2, 2) axes, got shape {F.shape}")
    return F[..., 0, 0], F[..., 0, 1], F[..., 1, 0], F[..., 1, 1]


def _check_j(J: np.ndarray):
    if np.any(J <= 0.0):
        raise InvertedElementError(f"det F <= 0 (min {np.min(J):.3e})")


def energy(mat: Material, F: np.ndarray) -> np.ndarray:
    """Strain energy density W(F); raises on inverted states."""
    f11, f12, f21, f22 = _split(F)
    J = f11 * f22 - f12 * f21
    _check_j(J)
    return energy_parts(mat.mu, mat.lam, f11, f12, f21, f22)


def piola(mat: Material, F: np.ndarray) -> np.ndarray:
    """First Piola-Kirchhoff stress P = dW/dF, shape like F."""
    f11, f12, f21, f22 = _split(F)
    J = f11 * f22 - f12 * f21
    _check_j(J)
    p11, p12, p21, p22 = piola_parts(mat.mu, mat.lam, f11, f12, f21, f22)
    out = np.empty(np.broadcast(f11, f22).shape + (2, 2))
    out[..., 0, 0], out[..., 0, 1] = p11, p12
    out[..., 1, 0], out[..., 1, 1] = p21, p22
    return out


def tangent(mat: Material, F: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Directional derivative of the stress, d/ds P(F + s G) at s = 0."""
    f11, f12, f21, f22 = _split(F)
    g11, g12, g21, g22 = _split(G)
    J = f11 * f22 - f12 * f21
    _check_j(J)
    d11, d12, d21, d22 = tangent_parts(
        mat.mu, mat.lam, f11, f12, f21, f22, g11, g12, g21, g22
    )
    shape = np.broadcast(f11 * g11, f22).shape
    out = np.empty(shape + (2, 2))
    out[..., 0, 0], out[..., 0, 1] = d11, d12
    out[..., 1, 0], out[..., 1, 1] = d21, d22
    return out


# ---------------------------------------------------------------------------
# componentwise core (numpy arrays or autodiff tensors)

def energy_parts(mu, lam, f11, f12, f21, f22):
    J = f11 * f22 - f12 * f21
    lnJ = ad.log(J)
    trC = f11 * f11 + f12 * f12 + f21 * f21 + f22 * f22 + 1.0
    return 0.5 * mu * (trC - 3.0 - 2.0 * lnJ) + 0.5 * lam * lnJ * lnJ


def piola_parts(mu, lam, f11, f12, f21, f22):
    """P = mu (F - F^{-T}) + lam ln J F^{-T}, component by component."""
    J = f11 * f22 - f12 * f21
    lnJ = ad.log(J)
    c = (lam * lnJ - mu) / J  # coefficient of the cofactor matrix
    # F^{-T} = [[f22, -f21], [-f12, f11]] / J
    p11 = mu * f11 + c * f22
    p12 = mu * f12 - c * f21
    p21 = mu * f21 - c * f12
    p22 = mu * f22 + c * f11
    return p11, p12, p21, p22


class StressState:
    """Shared subexpressions of the stress and its derivatives at a batch of
    points.  Works on numpy arrays and autodiff tensors alike; all methods
    return 2x2 component tuples (m11, m12, m21, m22)."""

    def __init__(self, mu, lam, f11, f12, f21, f22):
        self.mu, self.lam = mu, lam
        self.f = (f11, f12, f21, f22)
        self.J = f11 * f22 - f12 * f21
        self.lnJ = ad.log(self.J)
        iJ = 1.0 / self.J
        # W = F^{-T}
        self.w = (f22 * iJ, -f21 * iJ, -f12 * iJ, f11 * iJ)

    def piola(self):
        f11, f12, f21, f22 = self.f
        w11, w12, w21, w22 = self.w
        mu, c = self.mu, self.lam * self.lnJ - self.mu
        return (mu * f11 + c * w11, mu * f12 + c * w12,
                mu * f21 + c * w21, mu * f22 + c * w22)

    def _t1(self, g):
        """W G^T W."""
        g11, g12, g21, g22 = g
        w11, w12, w21, w22 = self.w
        t11 = g11 * w11 + g21 * w21
        t12 = g11 * w12 + g21 * w22
        t21 = g12 * w11 + g22 * w21
        t22 = g12 * w12 + g22 * w22
        return (w11 * t11 + w12 * t21, w11 * t12 + w12 * t22,
                w21 * t11 + w22 * t21, w21 * t12 + w22 * t22)

    def _tr_ag(self, g):
        """tr(F^{-1} G) = sum W .* G."""
        g11, g12, g21, g22 = g
        w11, w12, w21, w22 = self.w
        return w11 * g11 + w12 * g12 + w21 * g21 + w22 * g22

    def _a_dot(self, x):
        """F^{-1} X with F^{-1} = W^T."""
        x11, x12, x21, x22 = x
        w11, w12, w21, w22 = self.w
        return (w11 * x11 + w21 * x21, w11 * x12 + w21 * x22,
                w12 * x11 + w22 * x21, w12 * x12 + w22 * x22)

    def dpiola(self, g):
        """Directional derivative DP(F)[G]."""
        g11, g12, g21, g22 = g
        s = self._t1(g)
        a = self.mu - self.lam * self.lnJ
        b = self.lam * self._tr_ag(g)
        w11, w12, w21, w22 = self.w
        return (self.mu * g11 + a * s[0] + b * w11,
                self.mu * g12 + a * s[1] + b * w12,
                self.mu * g21 + a * s[2] + b * w21,
                self.mu * g22 + a * s[3] + b * w22)

    def d2piola(self, g, h):
        """Second directional derivative D^2 P(F)[G, H] (symmetric in G, H)."""
        w11, w12, w21, w22 = self.w
        lam = self.lam
        t1g, t1h = self._t1(g), self._t1(h)
        # M(G,H) = T1(H) G^T W + T1(G) H^T W
        gw = self._t1_right(g)
        hw = self._t1_right(h)
        m = tuple(self._mat2(t1h, gw)[i] + self._mat2(t1g, hw)[i] for i in range(4))
        ah, ag = self._a_dot(h), self._a_dot(g)
        # tr((A H)(A G))
        tr_ahag = ah[0] * ag[0] + ah[1] * ag[2] + ah[2] * ag[1] + ah[3] * ag[3]
        trg, trh = self._tr_ag(g), self._tr_ag(h)
        c = lam * self.lnJ - self.mu
        w = (w11, w12, w21, w22)
        return tuple(
            c * m[i] - lam * (tr_ahag * w[i] + trg * t1h[i] + trh * t1g[i])
            for i in range(4)
        )

    def _t1_right(self, g):
        """G^T W."""
        g11, g12, g21, g22 = g
        w11, w12, w21, w22 = self.w
        return (g11 * w11 + g21 * w21, g11 * w12 + g21 * w22,
                g12 * w11 + g22 * w21, g12 * w12 + g22 * w22)

    @staticmethod
    def _mat2(a, b):
        a11, a12, a21, a22 = a
        b11, b12, b21, b22 = b
        return (a11 * b11 + a12 * b21, a11 * b12 + a12 * b22,
                a21 * b11 + a22 * b21, a21 * b12 + a22 * b22)


def tangent_parts(mu, lam, f11, f12, f21, f22, g11, g12, g21, g22):
    """DP(F)[G] = mu G + (mu - lam lnJ) W G^T W + lam tr(F^{-1} G) W,
    with W = F^{-T}."""
    J = f11 * f22 - f12 * f21
    lnJ = ad.log(J)
    iJ = 1.0 / J
    w11, w12 = f22 * iJ, -f21 * iJ
    w21, w22 = -f12 * iJ, f11 * iJ
    # tr(F^{-1} G) = (f22 g11 - f12 g21 - f21 g12 + f11 g22) / J
    trAG = (f22 * g11 - f12 * g21 - f21 * g12 + f11 * g22) * iJ
    # T = G^T W ; then W T
    t11 = g11 * w11 + g21 * w21
    t12 = g11 * w12 + g21 * w22
    t21 = g12 * w11 + g22 * w21
    t22 = g12 * w12 + g22 * w22
    s11 = w11 * t11 + w12 * t21
    s12 = w11 * t12 + w12 * t22
    s21 = w21 * t11 + w22 * t21
    s22 = w21 * t12 + w22 * t22
    a = mu - lam * lnJ
    b = lam * trAG
    d11 = mu * g11 + a * s11 + b * w11
    d12 = mu * g12 + a * s12 + b * w12
    d21 = mu * g21 + a * s21 + b * w21
    d22 = mu * g22 + a * s22 + b * w22
    return d11, d12, d21, d22
