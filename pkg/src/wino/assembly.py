"""Residual and tangent assembly for the two unfitted weak-form branches.

Branch one ("lift") treats implicit Dirichlet data through the nodal
representation u = phi * w + g with tests scaled by nodal phi; branch two
("traction") solves for (u, y, p) where the tensor field y approximates -P on
the cut band and p stabilizes the traction constraint.  Both branches carry
facet-jump ghost stabilization; the lift branch adds the cut-cell
strong-residual term.

Tangents are exact: every nonlinear group is evaluated through the autodiff
graph on gathered per-entity leaves, and block Jacobians are read off with
one backward pass per local test row.  Element contributions are reduced in
deterministic cell order.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from . import kernels as kn
from .elements import Q4, Q9, facet_rule, gauss_rule, grad_matrix, shape
from .material import InvertedElementError, Material, StressState
from .mesh import (EDGE_BOTTOM, EDGE_LEFT, EDGE_RIGHT, EDGE_TOP,
                   BackgroundMesh, GridField, MeshClassification)

__all__ = [
    "AssemblyParams",
    "AssemblyContext",
    "LevelSetData",
    "DofMap",
    "EdgeLoad",
    "SideConstraint",
    "FollowerPressure",
    "LiftSystem",
    "TractionSystem",
    "assemble_dirichlet",
    "assemble_neumann",
    "apply_mesh_aligned_dirichlet",
]

SIDES = ("left", "right", "bottom", "top")


@dataclass(frozen=True)
class AssemblyParams:
    """Stabilization and penalty weights; all strictly positive."""

    sigma_d: float = 1.0
    sigma_n: float = 1.0
    gamma_u: float = 1.0
    gamma_p: float = 1.0
    gamma_div: float = 1.0
    quad_order: int = 3
    facet_quad_order: int = 2

    def __post_init__(self):
        for name in ("sigma_d", "sigma_n", "gamma_u", "gamma_p", "gamma_div"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")


def _edge_coords(edge: int, t: np.ndarray):
    one = np.ones_like(t)
    if edge == EDGE_LEFT:
        return -one, t
    if edge == EDGE_RIGHT:
        return one, t
    if edge == EDGE_BOTTOM:
        return t, -one
    return t, one


@dataclass
class _FacetGroup:
    owners: np.ndarray           # cell ids
    neighbors: np.ndarray | None
    normal: np.ndarray           # (2,)
    N_own: np.ndarray            # (q, 4) trace shape values, owner side
    B_own: np.ndarray            # (q, 2, 4)
    N_nb: np.ndarray | None
    B_nb: np.ndarray | None
    wlen: np.ndarray             # (q,) 1-D weights times half facet length
    on_box_side: np.ndarray | None = None   # side index into SIDES or -1
    centers: np.ndarray | None = None       # facet midpoint coordinates


class AssemblyContext:
    """Quadrature tables and facet groups for one mesh classification."""

    def __init__(self, mesh: BackgroundMesh, cls: MeshClassification,
                 params: AssemblyParams):
        self.mesh, self.cls, self.params = mesh, cls, params
        hx, hy = mesh.h
        self.h = mesh.h_max

        rule = gauss_rule(params.quad_order)
        xi, eta = rule.points[:, 0], rule.points[:, 1]
        self.N = shape(Q4, xi, eta)                      # (q, 4)
        self.B = grad_matrix(Q4, hx, hy, xi, eta)        # (q, 2, 4)
        self.wdet = rule.weights * (hx * hy / 4.0)
        self.WB = self.B * self.wdet[:, None, None]
        self.quad_ref = rule.points
        # constant mixed second derivative of each bilinear basis function
        from .elements import element_nodes
        ref = element_nodes(Q4)
        self.c2 = ref[:, 0] * ref[:, 1] / (hx * hy)

        corners = mesh.cell_corners()
        self.corners_act = corners[cls.active_cells]
        self.corners_cut = corners[cls.cut_cells]
        self.cut_pos = {c: i for i, c in enumerate(cls.cut_cells)}

        t1, w1 = facet_rule(params.facet_quad_order)
        self._t1, self._w1 = t1, w1

        def trace_tables(edge):
            exi, eeta = _edge_coords(edge, t1)
            return shape(Q4, exi, eeta), grad_matrix(Q4, hx, hy, exi, eeta)

        self._trace = {e: trace_tables(e) for e in
                       (EDGE_LEFT, EDGE_RIGHT, EDGE_BOTTOM, EDGE_TOP)}

        # boundary facet groups by (axis, sign)
        bf = cls.boundary_facets
        self.boundary_groups: list[_FacetGroup] = []
        for axis in (0, 1):
            for sign in (-1, 1):
                m = (bf.axis == axis) & (bf.sign == sign)
                if not m.any():
                    continue
                owners = bf.owner[m]
                edge = {(0, -1): EDGE_LEFT, (0, 1): EDGE_RIGHT,
                        (1, -1): EDGE_BOTTOM, (1, 1): EDGE_TOP}[(axis, sign)]
                N_e, B_e = self._trace[edge]
                length = hy if axis == 0 else hx
                normal = np.zeros(2)
                normal[axis] = sign
                grp = _FacetGroup(owners, None, normal, N_e, B_e, None, None,
                                  w1 * length / 2.0)
                grp.on_box_side = self._box_side(owners, axis, sign)
                grp.centers = self._facet_centers(owners, axis, sign)
                self.boundary_groups.append(grp)

        # interior stabilized facet groups by axis (owner below/left)
        gf = cls.cut_facets
        self.ghost_groups: list[_FacetGroup] = []
        for axis in (0, 1):
            m = gf.axis == axis
            if not m.any():
                continue
            e_own = EDGE_RIGHT if axis == 0 else EDGE_TOP
            e_nb = EDGE_LEFT if axis == 0 else EDGE_BOTTOM
            N_o, B_o = self._trace[e_own]
            N_n, B_n = self._trace[e_nb]
            length = hy if axis == 0 else hx
            normal = np.zeros(2)
            normal[axis] = 1.0
            self.ghost_groups.append(_FacetGroup(
                gf.owner[m], gf.neighbor[m], normal, N_o, B_o, N_n, B_n,
                w1 * length / 2.0))

    def _box_side(self, owners, axis, sign):
        """SIDES index when the facet lies on the background box, else -1."""
        mesh = self.mesh
        ci = owners % mesh.ncx
        cj = owners // mesh.ncx
        out = np.full(len(owners), -1, dtype=np.int64)
        if axis == 0 and sign < 0:
            out[ci == 0] = SIDES.index("left")
        elif axis == 0 and sign > 0:
            out[ci == mesh.ncx - 1] = SIDES.index("right")
        elif axis == 1 and sign < 0:
            out[cj == 0] = SIDES.index("bottom")
        else:
            out[cj == mesh.ncy - 1] = SIDES.index("top")
        return out

    def _facet_centers(self, owners, axis, sign):
        o = self.mesh.cell_origin(owners)
        hx, hy = self.mesh.h
        c = o.copy()
        if axis == 0:
            c[:, 0] += hx if sign > 0 else 0.0
            c[:, 1] += hy / 2.0
        else:
            c[:, 1] += hy if sign > 0 else 0.0
            c[:, 0] += hx / 2.0
        return c

    def gather(self, full: np.ndarray, corners: np.ndarray) -> np.ndarray:
        """Corner values (nE, 4, c) from a full nodal array (n_nodes, c)."""
        return full[corners]


class LevelSetData:
    """Level-set evaluations used by the kernels.

    ``fine_values``, when given, holds nodal values on the once-refined grid
    (2*n-1 nodes per axis); cut cells then use biquadratic interpolation of
    phi while everything else stays bilinear.
    """

    def __init__(self, ctx: AssemblyContext, phi_nodes: np.ndarray,
                 fine_values: np.ndarray | None = None):
        mesh = ctx.mesh
        phi_nodes = np.asarray(phi_nodes, dtype=np.float64).ravel()
        if phi_nodes.size != mesh.n_nodes:
            raise ValueError("level-set nodal array has the wrong size")
        self.phi_nodes = phi_nodes
        self.phi_corner_act = phi_nodes[ctx.corners_act]
        self.phi_corner_cut = phi_nodes[ctx.corners_cut]

        xi = ctx.quad_ref[:, 0]
        eta = ctx.quad_ref[:, 1]
        hx, hy = mesh.h
        if fine_values is None:
            Nq = ctx.N
            Bq = ctx.B
            self.phi_q_cut = np.einsum("na,qa->nq", self.phi_corner_cut, Nq)
            self.gphi_q_cut = np.einsum("na,qja->nqj", self.phi_corner_cut, Bq)
        else:
            fine = np.asarray(fine_values, dtype=np.float64)
            fnx, fny = 2 * mesh.nx - 1, 2 * mesh.ny - 1
            if fine.shape != (fny, fnx):
                raise ValueError(
                    f"fine level-set grid must be {(fny, fnx)}, got {fine.shape}")
            vals9 = self._q9_values(fine, ctx)
            N9 = shape(Q9, xi, eta)
            B9 = grad_matrix(Q9, hx, hy, xi, eta)
            self.phi_q_cut = np.einsum("na,qa->nq", vals9, N9)
            self.gphi_q_cut = np.einsum("na,qja->nqj", vals9, B9)

    @staticmethod
    def _q9_values(fine: np.ndarray, ctx: AssemblyContext) -> np.ndarray:
        mesh = ctx.mesh
        cells = ctx.cls.cut_cells
        ci = cells % mesh.ncx
        cj = cells // mesh.ncx
        fi, fj = 2 * ci, 2 * cj
        # Q9 node order: corners CCW, mid-edges (bottom,right,top,left), centre
        offs = [(0, 0), (2, 0), (2, 2), (0, 2),
                (1, 0), (2, 1), (1, 2), (0, 1), (1, 1)]
        return np.stack([fine[fj + dj, fi + di] for di, dj in offs], axis=1)


# ---------------------------------------------------------------------------
# degrees of freedom

def _lookup(nodes: np.ndarray, n_nodes: int) -> np.ndarray:
    lk = np.full(n_nodes, -1, dtype=np.int64)
    lk[nodes] = np.arange(len(nodes))
    return lk


@dataclass
class DofMap:
    """Global dof layout: u pairs on active nodes, then optional y quadruples
    and p pairs on cut-band nodes.  Constrained dofs keep identity rows."""

    mesh: BackgroundMesh
    u_nodes: np.ndarray
    y_nodes: np.ndarray | None = None
    p_nodes: np.ndarray | None = None
    constrained: np.ndarray = field(default=None)
    values: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.mesh.n_nodes
        self.u_lookup = _lookup(self.u_nodes, n)
        self.off_y = 2 * len(self.u_nodes)
        if self.y_nodes is not None:
            self.y_lookup = _lookup(self.y_nodes, n)
            self.off_p = self.off_y + 4 * len(self.y_nodes)
            self.p_lookup = _lookup(self.p_nodes, n)
            self.n_dofs = self.off_p + 2 * len(self.p_nodes)
        else:
            self.n_dofs = self.off_y
        if self.constrained is None:
            self.constrained = np.zeros(self.n_dofs, dtype=bool)
        if self.values is None:
            self.values = np.zeros(self.n_dofs)

    # dof id helpers -------------------------------------------------------
    def u_dofs(self, nodes: np.ndarray) -> np.ndarray:
        """(..., 2) dof ids for u at the given node ids."""
        base = 2 * self.u_lookup[nodes]
        return base[..., None] + np.arange(2)

    def y_dofs(self, nodes: np.ndarray) -> np.ndarray:
        base = self.off_y + 4 * self.y_lookup[nodes]
        return base[..., None] + np.arange(4)

    def p_dofs(self, nodes: np.ndarray) -> np.ndarray:
        base = self.off_p + 2 * self.p_lookup[nodes]
        return base[..., None] + np.arange(2)

    # nodal expansion ------------------------------------------------------
    def u_full(self, U: np.ndarray) -> np.ndarray:
        out = np.zeros((self.mesh.n_nodes, 2))
        out[self.u_nodes] = U[:self.off_y].reshape(-1, 2)
        return out

    def y_full(self, U: np.ndarray) -> np.ndarray:
        out = np.zeros((self.mesh.n_nodes, 4))
        out[self.y_nodes] = U[self.off_y:self.off_p].reshape(-1, 4)
        return out

    def p_full(self, U: np.ndarray) -> np.ndarray:
        out = np.zeros((self.mesh.n_nodes, 2))
        out[self.p_nodes] = U[self.off_p:].reshape(-1, 2)
        return out

    def constrain(self, dof_ids: np.ndarray, values: np.ndarray) -> None:
        self.constrained[dof_ids] = True
        self.values[dof_ids] = values

    def initial_vector(self) -> np.ndarray:
        U = np.zeros(self.n_dofs)
        U[self.constrained] = self.values[self.constrained]
        return U

    def free_mask(self) -> np.ndarray:
        return ~self.constrained


def _side_nodes(mesh: BackgroundMesh, side: str,
                span: tuple[float, float] | None = None) -> np.ndarray:
    nx, ny = mesh.nx, mesh.ny
    idx = np.arange(mesh.n_nodes).reshape(ny, nx)
    if side == "left":
        nodes = idx[:, 0]
    elif side == "right":
        nodes = idx[:, -1]
    elif side == "bottom":
        nodes = idx[0, :]
    elif side == "top":
        nodes = idx[-1, :]
    else:
        raise ValueError(f"unknown side {side!r}; expected one of {SIDES}")
    if span is not None:
        xy = mesh.node_coords()[nodes]
        t = xy[:, 1] if side in ("left", "right") else xy[:, 0]
        eps = 1e-12 * max(mesh.extent)
        nodes = nodes[(t >= span[0] - eps) & (t <= span[1] + eps)]
    return nodes


def apply_mesh_aligned_dirichlet(dof: DofMap, side: str, value,
                                 comps=(0, 1),
                                 span: tuple[float, float] | None = None) -> DofMap:
    """Constrain u components on one box side to prescribed values.

    ``value`` may be a scalar, a length-2 sequence, or a callable (x, y) ->
    (ux, uy).  Only nodes that carry u dofs are constrained.
    """
    nodes = _side_nodes(dof.mesh, side, span)
    nodes = nodes[dof.u_lookup[nodes] >= 0]
    if len(nodes) == 0:
        raise ValueError(f"side {side!r} carries no active u dofs")
    xy = dof.mesh.node_coords()[nodes]
    if callable(value):
        vals = np.array([value(x, y) for x, y in xy], dtype=np.float64)
    else:
        vals = np.broadcast_to(np.atleast_1d(np.asarray(value, dtype=np.float64)),
                               (len(nodes), 2))
    dofs = dof.u_dofs(nodes)
    for c in comps:
        dof.constrain(dofs[:, c], vals[:, c])
    return dof


# ---------------------------------------------------------------------------
# declared mesh-aligned loads / constraints and follower pressure

@dataclass(frozen=True)
class EdgeLoad:
    """Conforming traction on a box side (optionally a coordinate span)."""

    side: str
    span: tuple[float, float] | None = None


@dataclass(frozen=True)
class SideConstraint:
    side: str
    comps: tuple[int, ...] = (0, 1)
    value: object = 0.0
    span: tuple[float, float] | None = None


class FollowerPressure:
    """Deformed-configuration pressure on the cut band.

    The reference traction is -p J F^{-T} n with n = grad(phi)/|grad(phi)|;
    the pressure amplitude field is nonzero only where ``inner_mask`` is true
    (selects the pressurized wall among the level-set boundaries).
    """

    def __init__(self, p0_nodes: np.ndarray, inner_mask_q: np.ndarray | None = None):
        self.p0_nodes = np.asarray(p0_nodes, dtype=np.float64).ravel()
        self.inner_mask_q = inner_mask_q  # (n_cut, q) bool, optional

    def traction_q(self, ctx: AssemblyContext, lsd: LevelSetData, state: StressState,
                   J, load_scale: float):
        """Graph-valued traction at cut-cell quadrature points, (n,q,2)."""
        p_corner = self.p0_nodes[ctx.corners_cut]           # (n, 4)
        p_q = np.einsum("na,qa->nq", p_corner, ctx.N) * load_scale
        if self.inner_mask_q is not None:
            p_q = p_q * self.inner_mask_q
        g = lsd.gphi_q_cut
        norm = np.sqrt(g[..., 0] ** 2 + g[..., 1] ** 2 + 1e-30)
        n0, n1 = g[..., 0] / norm, g[..., 1] / norm
        w11, w12, w21, w22 = state.w  # F^{-T}
        c = ad.as_tensor(J) * (-p_q)
        t0 = c * (w11 * n0 + w12 * n1)
        t1 = c * (w21 * n0 + w22 * n1)
        return ad.stack([t0, t1], axis=-1)


# ---------------------------------------------------------------------------
# block Jacobian extraction

def _jac_blocks(rows: ad.Tensor, leaves: list[ad.Tensor]) -> list[np.ndarray]:
    """Dense per-entity Jacobian blocks d rows / d leaf.

    rows has shape (nE, k, c); each leaf (nE, kc, cc).  Returns one
    (nE, k*c, kc*cc) array per leaf (zeros when the leaf is untouched).
    """
    nE, k, c = rows.shape
    out = [np.zeros((nE, k * c, leaf.values[0].size)) for leaf in leaves]
    for a in range(k):
        for i in range(c):
            for leaf in leaves:
                leaf.grad = None
            ad.backward(ad.sum_over(rows[:, a, i]))
            for li, leaf in enumerate(leaves):
                if leaf.grad is not None:
                    out[li][:, a * c + i, :] = leaf.grad.reshape(nE, -1)
    return out


class _Accumulator:
    """Collects residual contributions and sparse Jacobian triplets."""

    def __init__(self, n_dofs: int, want_jac: bool):
        self.R = np.zeros(n_dofs)
        self.want_jac = want_jac
        self.rows, self.cols, self.vals = [], [], []

    def add_rows(self, rows, row_dofs: np.ndarray, leaves=(), col_dofs=()):
        """rows: Tensor or ndarray (nE, k, c); row_dofs (nE, k, c) ids."""
        vals = rows.values if isinstance(rows, ad.Tensor) else np.asarray(rows)
        np.add.at(self.R, row_dofs.ravel(), vals.ravel())
        if self.want_jac and leaves:
            blocks = _jac_blocks(rows, list(leaves))
            nE = vals.shape[0]
            rflat = row_dofs.reshape(nE, -1)
            for blk, cd in zip(blocks, col_dofs):
                cflat = cd.reshape(nE, -1)
                r = np.broadcast_to(rflat[:, :, None], blk.shape)
                cc = np.broadcast_to(cflat[:, None, :], blk.shape)
                self.rows.append(r.ravel())
                self.cols.append(cc.ravel())
                self.vals.append(blk.ravel())

    def add_const(self, rows: np.ndarray, row_dofs: np.ndarray):
        np.add.at(self.R, row_dofs.ravel(), np.asarray(rows).ravel())

    def finish(self, dof: DofMap, U: np.ndarray):
        con = dof.constrained
        self.R[con] = U[con] - dof.values[con]
        if not self.want_jac:
            return self.R, None
        if self.rows:
            r = np.concatenate(self.rows)
            c = np.concatenate(self.cols)
            v = np.concatenate(self.vals)
            keep = ~con[r]
            r, c, v = r[keep], c[keep], v[keep]
        else:
            r = c = np.zeros(0, dtype=np.int64)
            v = np.zeros(0)
        ic = np.flatnonzero(con)
        r = np.concatenate([r, ic])
        c = np.concatenate([c, ic])
        v = np.concatenate([v, np.ones(len(ic))])
        J = sp.coo_matrix((v, (r, c)), shape=(dof.n_dofs, dof.n_dofs)).tocsr()
        return self.R, J


def _leaf(values: np.ndarray, want_jac: bool) -> ad.Tensor:
    return ad.Tensor(values, requires_grad=want_jac)


def _check_jacobian_positive(J_parts, cells, label):
    j = J_parts.values if isinstance(J_parts, ad.Tensor) else np.asarray(J_parts)
    if np.any(j <= 0.0):
        bad = np.argwhere(j <= 0.0)
        cell = cells[bad[0][0]] if len(bad) else -1
        raise InvertedElementError(
            f"det F <= 0 at a quadrature point of {label} cell {cell}")


# ---------------------------------------------------------------------------
# branch systems

class LiftSystem:
    """Nonlinear system for the boundary-lift branch.

    Unknown: nodal coefficients w on active nodes; the displacement is
    reconstructed nodally as u = phi * w + g and tests are phi-scaled nodal
    basis functions.  Nodes where phi vanishes get constrained w dofs since
    their test functions are identically zero.
    """

    def __init__(self, mesh: BackgroundMesh, cls: MeshClassification,
                 mat: Material, params: AssemblyParams,
                 phi: np.ndarray, g: np.ndarray, f: np.ndarray | None):
        self.mat, self.params = mat, params
        self.ctx = AssemblyContext(mesh, cls, params)
        self.lsd = LevelSetData(self.ctx, phi)
        self.g = np.asarray(g, dtype=np.float64).reshape(mesh.n_nodes, 2)
        self.f = None if f is None else np.asarray(f, dtype=np.float64).reshape(
            mesh.n_nodes, 2)
        self.dof = DofMap(mesh, u_nodes=cls.active_nodes)
        zero_phi = cls.active_nodes[self.lsd.phi_nodes[cls.active_nodes] == 0.0]
        if len(zero_phi):
            self.dof.constrain(self.dof.u_dofs(zero_phi).ravel(),
                               np.zeros(2 * len(zero_phi)))
        # constant source rows (computed once, scaled per call)
        self._src = self._source_rows()

    def _source_rows(self):
        if self.f is None:
            return None
        ctx = self.ctx
        f_corner = ctx.gather(self.f, ctx.corners_act)
        rows = kn.source_rows(f_corner, ctx.N, ctx.wdet)
        rows = rows.values if isinstance(rows, ad.Tensor) else rows
        return rows * self.lsd.phi_corner_act[:, :, None]

    def u_nodal(self, U: np.ndarray) -> np.ndarray:
        """Displacement nodal field phi*w + g for a dof vector."""
        w = self.dof.u_full(U)
        return self.lsd.phi_nodes[:, None] * w + self.g

    def residual(self, U: np.ndarray, load_scale: float = 1.0) -> np.ndarray:
        return self._assemble(U, load_scale, want_jac=False)[0]

    def residual_and_tangent(self, U: np.ndarray, load_scale: float = 1.0):
        return self._assemble(U, load_scale, want_jac=True)

    def _u_corner(self, w_full, corners, want_jac, leaves=None):
        wc = _leaf(w_full[corners], want_jac)
        phi_c = self.lsd.phi_nodes[corners][:, :, None]
        g_c = self.g[corners]
        if leaves is not None:
            leaves.append(wc)
        return wc * phi_c + g_c, wc

    def _assemble(self, U, alpha, want_jac):
        ctx, dof, mat = self.ctx, self.dof, self.mat
        acc = _Accumulator(dof.n_dofs, want_jac)
        w_full = dof.u_full(U)

        # volume internal forces, phi-scaled tests
        u_c, w_leaf = self._u_corner(w_full, ctx.corners_act, want_jac)
        fparts = kn.def_grad_parts(u_c, ctx.B)
        state = StressState(mat.mu, mat.lam, *fparts)
        _check_jacobian_positive(state.J, ctx.cls.active_cells, "active")
        rows = kn.volume_rows(kn.stack22(*state.piola()), ctx.WB)
        rows = rows * self.lsd.phi_corner_act[:, :, None]
        rd = dof.u_dofs(ctx.corners_act)
        acc.add_rows(rows, rd, leaves=[w_leaf], col_dofs=[rd])

        # body force (right-hand side)
        if self._src is not None:
            acc.add_const(-alpha * self._src, rd)

        # boundary flux  -(P n) . v
        for grp in ctx.boundary_groups:
            corners = ctx.mesh.cell_corners()[grp.owners]
            u_cb, w_leaf_b = self._u_corner(w_full, corners, want_jac)
            fb = kn.def_grad_parts(u_cb, grp.B_own)
            st = StressState(mat.mu, mat.lam, *fb)
            _check_jacobian_positive(st.J, grp.owners, "boundary")
            pn = kn.tensor_dot_normal(kn.stack22(*st.piola()), grp.normal)
            rows = kn.normal_flux_rows(pn, grp.N_own, grp.wlen)
            rows = rows * (-self.lsd.phi_nodes[corners][:, :, None])
            rdb = dof.u_dofs(corners)
            acc.add_rows(rows, rdb, leaves=[w_leaf_b], col_dofs=[rdb])

        # ghost stabilization on the cut band
        sigma = self.params.sigma_d
        for grp in ctx.ghost_groups:
            co = ctx.mesh.cell_corners()[grp.owners]
            cn = ctx.mesh.cell_corners()[grp.neighbors]
            u_o, lo = self._u_corner(w_full, co, want_jac)
            u_n, ln = self._u_corner(w_full, cn, want_jac)
            fo = kn.def_grad_parts(u_o, grp.B_own)
            fn = kn.def_grad_parts(u_n, grp.B_nb)
            r_own, r_nb = kn.ghost_rows(mat, fo, fn, grp.B_own, grp.B_nb,
                                        grp.normal, grp.wlen, sigma * ctx.h)
            r_own = r_own * self.lsd.phi_nodes[co][:, :, None]
            r_nb = r_nb * self.lsd.phi_nodes[cn][:, :, None]
            do, dn = dof.u_dofs(co), dof.u_dofs(cn)
            acc.add_rows(r_own, do, leaves=[lo, ln], col_dofs=[do, dn])
            acc.add_rows(r_nb, dn, leaves=[lo, ln], col_dofs=[do, dn])

        # cut-cell strong-residual stabilization (folds the load in)
        if len(ctx.cls.cut_cells):
            u_cc, lc = self._u_corner(w_full, ctx.corners_cut, want_jac)
            f_q = None
            if self.f is not None:
                f_q = alpha * np.einsum(
                    "nac,qa->nqc", ctx.gather(self.f, ctx.corners_cut), ctx.N)
            rows = kn.div_stab_rows(mat, u_cc, f_q, ctx.B, ctx.c2, ctx.wdet,
                                    sigma * ctx.h ** 2)
            rows = rows * self.lsd.phi_corner_cut[:, :, None]
            rdc = dof.u_dofs(ctx.corners_cut)
            acc.add_rows(rows, rdc, leaves=[lc], col_dofs=[rdc])

        return acc.finish(dof, U)


class TractionSystem:
    """Nonlinear system for the traction branch with auxiliary cut-band fields.

    Unknowns: u on active nodes, y (4 channels) and p (2 channels) on cut-band
    nodes.  Mesh-aligned Dirichlet sides are imposed through constrained dofs
    and mesh-aligned tractions through conforming facet loads; the level-set
    part of the boundary is handled by the auxiliary-field penalties.
    """

    def __init__(self, mesh: BackgroundMesh, cls: MeshClassification,
                 mat: Material, params: AssemblyParams, phi: np.ndarray,
                 band_traction=None, f: np.ndarray | None = None,
                 edge_loads: list[tuple[EdgeLoad, np.ndarray]] | None = None,
                 constraints: list[SideConstraint] | None = None,
                 phi_fine: np.ndarray | None = None):
        self.mat, self.params = mat, params
        self.ctx = AssemblyContext(mesh, cls, params)
        self.lsd = LevelSetData(self.ctx, phi, fine_values=phi_fine)
        if len(cls.cut_cells) == 0:
            raise ValueError("traction branch requires a nonempty cut band")
        self.f = None if f is None else np.asarray(f, dtype=np.float64).reshape(
            mesh.n_nodes, 2)
        self.band_traction = band_traction  # nodal (n,2) array or FollowerPressure
        self.edge_loads = edge_loads or []
        self.dof = DofMap(mesh, u_nodes=cls.active_nodes,
                          y_nodes=cls.cut_band_nodes, p_nodes=cls.cut_band_nodes)
        for con in (constraints or []):
            apply_mesh_aligned_dirichlet(self.dof, con.side, con.value,
                                         comps=con.comps, span=con.span)
        self._declared_sides = {SIDES.index(c.side) for c in (constraints or [])}
        self._declared_sides |= {SIDES.index(e.side) for e, _ in self.edge_loads}
        self._src = self._source_rows()
        self._band_t_q = self._band_traction_q()

    def _source_rows(self):
        if self.f is None:
            return None
        ctx = self.ctx
        f_corner = ctx.gather(self.f, ctx.corners_act)
        rows = kn.source_rows(f_corner, ctx.N, ctx.wdet)
        return rows.values if isinstance(rows, ad.Tensor) else rows

    def _band_traction_q(self):
        """Constant cut-band traction at quadrature points, or None."""
        if self.band_traction is None or isinstance(self.band_traction,
                                                    FollowerPressure):
            return None
        t = np.asarray(self.band_traction, dtype=np.float64).reshape(
            self.ctx.mesh.n_nodes, 2)
        return np.einsum("nac,qa->nqc", self.ctx.gather(t, self.ctx.corners_cut),
                         self.ctx.N)

    def edge_load_rows(self, load: EdgeLoad, t_nodes: np.ndarray,
                       u_dof_rows=True):
        """Conforming traction rows -(t . v) on a declared box side."""
        ctx = self.ctx
        side = SIDES.index(load.side)
        rows_all, dofs_all = [], []
        for grp in ctx.boundary_groups:
            m = grp.on_box_side == side
            if load.span is not None:
                t_axis = grp.centers[:, 1] if load.side in ("left", "right") \
                    else grp.centers[:, 0]
                m = m & (t_axis > load.span[0]) & (t_axis < load.span[1])
            if not m.any():
                continue
            owners = grp.owners[m]
            corners = ctx.mesh.cell_corners()[owners]
            t_corner = np.asarray(t_nodes, dtype=np.float64).reshape(
                ctx.mesh.n_nodes, 2)[corners]
            t_q = np.einsum("nac,qa->nqc", t_corner, grp.N_own)
            rows = kn.normal_flux_rows(t_q, grp.N_own, grp.wlen)
            rows = rows.values if isinstance(rows, ad.Tensor) else rows
            rows_all.append(-rows)
            dofs_all.append(self.dof.u_dofs(corners))
        return rows_all, dofs_all

    def residual(self, U: np.ndarray, load_scale: float = 1.0) -> np.ndarray:
        return self._assemble(U, load_scale, want_jac=False)[0]

    def residual_and_tangent(self, U: np.ndarray, load_scale: float = 1.0):
        return self._assemble(U, load_scale, want_jac=True)

    def _assemble(self, U, alpha, want_jac):
        ctx, dof, mat, prm = self.ctx, self.dof, self.mat, self.params
        acc = _Accumulator(dof.n_dofs, want_jac)
        u_full = dof.u_full(U)
        y_full = dof.y_full(U)
        p_full = dof.p_full(U)

        # volume internal force
        u_c = _leaf(u_full[ctx.corners_act], want_jac)
        fparts = kn.def_grad_parts(u_c, ctx.B)
        state = StressState(mat.mu, mat.lam, *fparts)
        _check_jacobian_positive(state.J, ctx.cls.active_cells, "active")
        rows = kn.volume_rows(kn.stack22(*state.piola()), ctx.WB)
        rd = dof.u_dofs(ctx.corners_act)
        acc.add_rows(rows, rd, leaves=[u_c], col_dofs=[rd])

        if self._src is not None:
            acc.add_const(-alpha * self._src, rd)

        # boundary flux with the auxiliary stress on the level-set boundary
        cut_set = np.zeros(ctx.mesh.n_cells, dtype=bool)
        cut_set[ctx.cls.cut_cells] = True
        for grp in ctx.boundary_groups:
            m = cut_set[grp.owners]
            if grp.on_box_side is not None:
                for side in self._declared_sides:
                    m = m & (grp.on_box_side != side)
            if not m.any():
                continue
            owners = grp.owners[m]
            corners = ctx.mesh.cell_corners()[owners]
            y_cb = _leaf(y_full[corners], want_jac)
            y_q = ad.reshape(kn.interp(y_cb, grp.N_own),
                             y_cb.shape[:1] + (len(grp.wlen), 2, 2))
            yn = kn.tensor_dot_normal(y_q, grp.normal)
            rows = kn.normal_flux_rows(yn, grp.N_own, grp.wlen)
            rdb = dof.u_dofs(corners)
            cdb = dof.y_dofs(corners)
            acc.add_rows(rows, rdb, leaves=[y_cb], col_dofs=[cdb])

        # declared conforming tractions
        for load, t_nodes in self.edge_loads:
            rows_all, dofs_all = self.edge_load_rows(load, t_nodes)
            for rows, dd in zip(rows_all, dofs_all):
                acc.add_const(alpha * rows, dd)

        # ghost stabilization
        for grp in ctx.ghost_groups:
            co = ctx.mesh.cell_corners()[grp.owners]
            cn = ctx.mesh.cell_corners()[grp.neighbors]
            lo = _leaf(u_full[co], want_jac)
            ln = _leaf(u_full[cn], want_jac)
            fo = kn.def_grad_parts(lo, grp.B_own)
            fn = kn.def_grad_parts(ln, grp.B_nb)
            r_own, r_nb = kn.ghost_rows(mat, fo, fn, grp.B_own, grp.B_nb,
                                        grp.normal, grp.wlen,
                                        prm.sigma_n * ctx.h)
            do, dn = dof.u_dofs(co), dof.u_dofs(cn)
            acc.add_rows(r_own, do, leaves=[lo, ln], col_dofs=[do, dn])
            acc.add_rows(r_nb, dn, leaves=[lo, ln], col_dofs=[do, dn])

        # cut-band auxiliary penalties
        h = ctx.h
        u_cc = _leaf(u_full[ctx.corners_cut], want_jac)
        y_cc = _leaf(y_full[ctx.corners_cut], want_jac)
        p_cc = _leaf(p_full[ctx.corners_cut], want_jac)
        fcut = kn.def_grad_parts(u_cc, ctx.B)
        st_cut = StressState(mat.mu, mat.lam, *fcut)
        _check_jacobian_positive(st_cut.J, ctx.cls.cut_cells, "cut")
        y4 = ad.reshape(y_cc, y_cc.shape[:2] + (2, 2))
        y_q = ad.einsum("...nakl,qa->...nqkl", y4, ctx.N)
        p_q = kn.interp(p_cc, ctx.N)
        if isinstance(self.band_traction, FollowerPressure):
            t_q = self.band_traction.traction_q(ctx, self.lsd, st_cut,
                                                st_cut.J, alpha)
        elif self._band_t_q is not None:
            t_q = alpha * self._band_t_q
        else:
            t_q = None

        p_parts = st_cut.piola()
        s = ad.add(y_q, kn.stack22(*p_parts))
        s_parts = (s[..., 0, 0], s[..., 0, 1], s[..., 1, 0], s[..., 1, 1])
        v = ad.einsum("...nqkl,nql->...nqk", y_q, self.lsd.gphi_q_cut)
        v = v + p_q * (self.lsd.phi_q_cut / h)[..., None]
        if t_q is not None:
            gnorm = np.linalg.norm(self.lsd.gphi_q_cut, axis=-1)
            v = v + ad.as_tensor(t_q) * gnorm[..., None]
        divy = kn.divergence_of_tensor(y4, ctx.B)

        leaves = [u_cc, y_cc, p_cc]
        cdofs = [dof.u_dofs(ctx.corners_cut), dof.y_dofs(ctx.corners_cut),
                 dof.p_dofs(ctx.corners_cut)]

        # displacement tests: gamma_u (y + P) : DP[v]
        rows_v = kn.v_rows_stress_match(st_cut, s_parts, ctx.B, ctx.wdet,
                                        prm.gamma_u)
        acc.add_rows(rows_v, dof.u_dofs(ctx.corners_cut), leaves=leaves,
                     col_dofs=cdofs)

        # tensor tests
        rows_z = ad.add(
            kn.z_rows_stress(s, ctx.N, ctx.wdet, prm.gamma_u),
            ad.add(kn.z_rows_penalty(v, self.lsd.gphi_q_cut, ctx.N, ctx.wdet,
                                     prm.gamma_p / h ** 2),
                   kn.z_rows_div(divy, ctx.B, ctx.wdet, prm.gamma_div)))
        rows_z = ad.reshape(rows_z, rows_z.shape[:2] + (4,))
        acc.add_rows(rows_z, dof.y_dofs(ctx.corners_cut), leaves=leaves,
                     col_dofs=cdofs)

        # multiplier tests
        rows_q = kn.q_rows_penalty(v, self.lsd.phi_q_cut, ctx.N, ctx.wdet,
                                   prm.gamma_p / h ** 2, h)
        acc.add_rows(rows_q, dof.p_dofs(ctx.corners_cut), leaves=leaves,
                     col_dofs=cdofs)

        return acc.finish(dof, U)


# ---------------------------------------------------------------------------
# spec-style one-call surfaces

def assemble_dirichlet(mesh, cls, mat, params, phi, g, f, w_nodal):
    """Residual and tangent of the lift branch at nodal coefficients w."""
    sys_ = LiftSystem(mesh, cls, mat, params, _chan(phi), _chan2(g, mesh),
                      _chan2(f, mesh))
    U = _chan2(w_nodal, mesh)[sys_.dof.u_nodes].ravel()
    return sys_.residual_and_tangent(U)


def assemble_neumann(mesh, cls, mat, params, phi, t, f, u_nodal, y_nodal,
                     p_nodal, **kwargs):
    """Residual and tangent of the traction branch at nodal fields."""
    sys_ = TractionSystem(mesh, cls, mat, params, _chan(phi),
                          band_traction=t, f=_chan2(f, mesh), **kwargs)
    dof = sys_.dof
    U = np.zeros(dof.n_dofs)
    U[:dof.off_y] = _chan2(u_nodal, mesh)[dof.u_nodes].ravel()
    U[dof.off_y:dof.off_p] = np.asarray(y_nodal, dtype=np.float64).reshape(
        mesh.n_nodes, 4)[dof.y_nodes].ravel()
    U[dof.off_p:] = _chan2(p_nodal, mesh)[dof.p_nodes].ravel()
    return sys_.residual_and_tangent(U)


def _chan(phi):
    if isinstance(phi, GridField):
        return phi.flat(phi.channels[0])
    return np.asarray(phi, dtype=np.float64).ravel()


def _chan2(v, mesh):
    if v is None:
        return None
    return np.asarray(v, dtype=np.float64).reshape(mesh.n_nodes, 2)
