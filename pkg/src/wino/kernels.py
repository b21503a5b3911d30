"""Element-level integrand kernels shared by the solver assembly and the
training losses.

All functions accept autodiff tensors or plain arrays for the field
arguments; geometry tables (shape values N, gradient matrices B, quadrature
weights) are plain arrays.  Field layout convention: gathered corner values
have shape (..., n_cells, n_corner, n_comp) with optional leading batch axes,
and quadrature-point values have shape (..., n_cells, n_q, n_comp).

Rows returned by ``*_rows`` functions are per-cell test-function
contributions, e.g. shape (..., n_cells, 4, 2) for vector-valued nodal tests;
the caller scatters them onto global nodes.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .material import Material, StressState

__all__ = [
    "interp",
    "grad_parts",
    "def_grad_parts",
    "stack22",
    "volume_rows",
    "source_rows",
    "tensor_dot_normal",
    "normal_flux_rows",
    "ghost_rows",
    "div_stab_rows",
    "aux_strong_residuals",
    "divergence_of_tensor",
    "z_rows_stress",
    "z_rows_penalty",
    "z_rows_div",
    "q_rows_penalty",
    "v_rows_stress_match",
    "test_pattern",
]


def interp(corner, N: np.ndarray):
    """Quadrature-point values from corner values: (...,n,a,c) -> (...,n,q,c)."""
    return ad.einsum("...nac,qa->...nqc", corner, N)


def grad_parts(corner, B: np.ndarray):
    """Gradients of each component at quadrature points.

    corner (...,n,a,c), B (q,2,a) -> tensor (...,n,q,c,2) with entry
    [c, j] = d(field_c)/dx_j.
    """
    return ad.einsum("...nac,qja->...nqcj", corner, B)


def def_grad_parts(u_corner, B: np.ndarray):
    """Deformation gradient components F = I + grad u at quadrature points."""
    gu = grad_parts(u_corner, B)
    return (gu[..., 0, 0] + 1.0, gu[..., 0, 1],
            gu[..., 1, 0], gu[..., 1, 1] + 1.0)


def stack22(m11, m12, m21, m22):
    """Component tuple -> stacked (..., 2, 2) tensor."""
    return ad.stack([ad.stack([m11, m12], axis=-1),
                     ad.stack([m21, m22], axis=-1)], axis=-2)


def volume_rows(P, WB: np.ndarray):
    """Internal-force rows: integral of X : grad(N_a e_i).

    P stacked (...,n,q,2,2); WB = B * w_q * detJ with shape (q,2,a).
    Returns (...,n,a,2) where the last axis is the test component i.
    """
    return ad.einsum("...nqij,qja->...nai", P, WB)


def source_rows(f_corner, N: np.ndarray, wdet: np.ndarray):
    """Load rows: integral of f . (N_a e_i); returns (...,n,a,2)."""
    fq = interp(f_corner, N)
    return ad.einsum("...nqi,qa->...nai", fq, N * wdet[:, None])


def tensor_dot_normal(X, normal: np.ndarray):
    """(X n)_i at quadrature points: (...,n,q,2,2) -> (...,n,q,2)."""
    return ad.einsum("...nqij,j->...nqi", X, np.asarray(normal, dtype=np.float64))


def normal_flux_rows(xn, N: np.ndarray, wlen: np.ndarray):
    """Facet rows: integral of (X n) . (N_a e_i) over a facet group.

    xn (...,n,q,2) are flux values at facet quadrature points; wlen are the
    1-D weights times half the facet length.  Returns (...,n,a,2).
    """
    return ad.einsum("...nqi,qa->...nai", xn, N * wlen[:, None])


def test_pattern(B: np.ndarray, a: int, j: int):
    """Gradient of the test field N_a e_j as a component tuple (constants)."""
    bx, by = B[:, 0, a], B[:, 1, a]
    zero = np.zeros_like(bx)
    if j == 0:
        return (bx, by, zero, zero)
    return (zero, zero, bx, by)


def _dot_rows(integrand, w: np.ndarray):
    """Weighted quadrature sum over the trailing q axis."""
    return ad.einsum("...nq,q->...n", integrand, w)


def ghost_rows(mat: Material, f_own, f_nb, B_own: np.ndarray, B_nb: np.ndarray,
               normal: np.ndarray, wlen: np.ndarray, coef: float):
    """Facet-jump stabilization rows for both sides of a facet group.

    ``f_own`` / ``f_nb`` are deformation-gradient component tuples evaluated at
    the shared facet quadrature points from each side.  Returns a pair of
    (...,n,4,2) row tensors; the neighbour side already carries its minus sign
    from the jump convention [[x]] = x_own - x_nb.
    """
    s_own = StressState(mat.mu, mat.lam, *f_own)
    s_nb = StressState(mat.mu, mat.lam, *f_nb)
    po = s_own.piola()
    pn = s_nb.piola()
    n0, n1 = float(normal[0]), float(normal[1])
    jump0 = (po[0] - pn[0]) * n0 + (po[1] - pn[1]) * n1
    jump1 = (po[2] - pn[2]) * n0 + (po[3] - pn[3]) * n1

    def side_rows(state, B, sign):
        rows_a = []
        for a in range(4):
            comps = []
            for j in range(2):
                d = state.dpiola(test_pattern(B, a, j))
                dn0 = d[0] * n0 + d[1] * n1
                dn1 = d[2] * n0 + d[3] * n1
                comps.append(_dot_rows(jump0 * dn0 + jump1 * dn1, wlen * (coef * sign)))
            rows_a.append(ad.stack(comps, axis=-1))
        return ad.stack(rows_a, axis=-2)

    return side_rows(s_own, B_own, 1.0), side_rows(s_nb, B_nb, -1.0)


def div_stab_rows(mat: Material, u_corner, f_q, B: np.ndarray, c2: np.ndarray,
                  wdet: np.ndarray, coef: float):
    """Cut-cell strong-residual stabilization rows.

    Integrates (div P + f) . div(DP(u)[test]) over each cut cell; ``c2`` holds
    the constant mixed second derivatives of the bilinear basis and ``f_q``
    (values at quadrature points, or None) folds the load into the residual.
    Returns (...,n,4,2).
    """
    fparts = def_grad_parts(u_corner, B)
    state = StressState(mat.mu, mat.lam, *fparts)
    m = ad.einsum("...nak,a->...nk", u_corner, c2)
    m1, m2 = m[..., 0:1], m[..., 1:2]  # keep a length-1 axis to broadcast over q
    zero = 0.0
    hx_dir = (zero, m1, zero, m2)   # d(grad u)/dx
    hy_dir = (m1, zero, m2, zero)   # d(grad u)/dy
    dpx = state.dpiola(hx_dir)
    dpy = state.dpiola(hy_dir)
    div0 = dpx[0] + dpy[1]
    div1 = dpx[2] + dpy[3]
    if f_q is not None:
        div0 = div0 + f_q[..., 0]
        div1 = div1 + f_q[..., 1]

    rows_a = []
    for a in range(4):
        comps = []
        c2a = float(c2[a])
        for j in range(2):
            g = test_pattern(B, a, j)
            dxg = (0.0, c2a, 0.0, 0.0) if j == 0 else (0.0, 0.0, 0.0, c2a)
            dyg = (c2a, 0.0, 0.0, 0.0) if j == 0 else (0.0, 0.0, c2a, 0.0)
            t1 = state.d2piola(g, hx_dir)
            t2 = state.d2piola(g, hy_dir)
            t3 = state.dpiola(dxg)
            t4 = state.dpiola(dyg)
            dd0 = t1[0] + t2[1] + t3[0] + t4[1]
            dd1 = t1[2] + t2[3] + t3[2] + t4[3]
            comps.append(_dot_rows(div0 * dd0 + div1 * dd1, wdet * coef))
        rows_a.append(ad.stack(comps, axis=-1))
    return ad.stack(rows_a, axis=-2)


# ---------------------------------------------------------------------------
# auxiliary-field (traction branch) kernels on the cut band

def aux_strong_residuals(mat: Material, fparts, y_q, p_q, phi_q: np.ndarray,
                         gphi_q: np.ndarray, t_q, h: float):
    """Pointwise auxiliary residuals on cut cells.

    fparts: deformation-gradient parts at quadrature points.
    y_q (...,n,q,2,2) stacked, p_q (...,n,q,2), t_q (...,n,q,2) or None.
    Returns (stress_mismatch (...,n,q,2,2), constraint (...,n,q,2), state).
    """
    state = StressState(mat.mu, mat.lam, *fparts)
    p = state.piola()
    s = ad.add(y_q, stack22(*p))
    v = ad.einsum("...nqkl,nql->...nqk", y_q, gphi_q)
    v = v + ad.as_tensor(p_q) * (phi_q / h)[..., None]
    if t_q is not None:
        gnorm = np.linalg.norm(gphi_q, axis=-1)
        v = v + ad.as_tensor(t_q) * gnorm[..., None]
    return s, v, state


def divergence_of_tensor(y_corner, B: np.ndarray):
    """div y at quadrature points from corner values of a 2x2 tensor field.

    y_corner (...,n,a,2,2) -> (...,n,q,2) with (div y)_i = d_l y_il.
    """
    return ad.einsum("...nail,qla->...nqi", y_corner, B)


def z_rows_stress(s, N: np.ndarray, wdet: np.ndarray, coef: float):
    """gamma_u (y + P) : z rows for tensor tests z = N_a E_kl; (...,n,a,2,2)."""
    return ad.einsum("...nqkl,qa->...nakl", s, N * (wdet * coef)[:, None])


def z_rows_penalty(v, gphi_q: np.ndarray, N: np.ndarray, wdet: np.ndarray,
                   coef: float):
    """Constraint-penalty rows against (z grad phi); (...,n,a,2,2)."""
    vg = ad.einsum("...nqk,nql->...nqkl", v, gphi_q)
    return ad.einsum("...nqkl,qa->...nakl", vg, N * (wdet * coef)[:, None])


def z_rows_div(divy, B: np.ndarray, wdet: np.ndarray, coef: float):
    """gamma_div (div y) . (div z) rows; (...,n,a,2,2)."""
    dw = divy * wdet[:, None] * coef
    return ad.einsum("...nqk,qla->...nakl", dw, B)


def q_rows_penalty(v, phi_q: np.ndarray, N: np.ndarray, wdet: np.ndarray,
                   coef: float, h: float):
    """Constraint-penalty rows against (q phi / h); (...,n,a,2)."""
    vp = v * (phi_q / h)[..., None]
    return ad.einsum("...nqj,qa->...naj", vp, N * (wdet * coef)[:, None])


def v_rows_stress_match(state: StressState, s_parts, B: np.ndarray,
                        wdet: np.ndarray, coef: float):
    """gamma_u (y + P) : DP(u)[test] rows for displacement tests; (...,n,4,2)."""
    s00, s01, s10, s11 = s_parts
    rows_a = []
    for a in range(4):
        comps = []
        for j in range(2):
            d = state.dpiola(test_pattern(B, a, j))
            integrand = s00 * d[0] + s01 * d[1] + s10 * d[2] + s11 * d[3]
            comps.append(_dot_rows(integrand, wdet * coef))
        rows_a.append(ad.stack(comps, axis=-1))
    return ad.stack(rows_a, axis=-2)
