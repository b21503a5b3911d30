"""Cartesian background mesh, nodal grid fields and level-set cell classification.

The physical domain is described implicitly: a level-set field ``phi`` sampled
at the nodes of a fixed Cartesian mesh is negative inside the domain, positive
outside, and zero on the boundary.  Cells are tagged exterior / interior / cut
from the signs of their four corner values, and the facet sets needed by the
unfitted assembly (stabilised facets, active-mesh boundary, inner band) are
derived from those tags.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

__all__ = [
    "CellTag",
    "BackgroundMesh",
    "GridField",
    "FacetSet",
    "MeshClassification",
    "classify",
    "facet_normal",
    "active_domain_mask",
]


class CellTag(IntEnum):
    EXTERIOR = 0
    INTERIOR = 1
    CUT = 2


# local edge ids of a rectangular cell
EDGE_LEFT, EDGE_RIGHT, EDGE_BOTTOM, EDGE_TOP = 0, 1, 2, 3


@dataclass(frozen=True)
class BackgroundMesh:
    """Uniform Cartesian node grid over a rectangular box.

    ``nx`` and ``ny`` count nodes per axis; node ``(i, j)`` sits at
    ``origin + (i*hx, j*hy)`` and has flat index ``j*nx + i`` (x fastest).
    Cells are the ``(nx-1)*(ny-1)`` rectangles between nodes, cell ``(ci, cj)``
    has flat index ``cj*(nx-1) + ci``.
    """

    origin: tuple[float, float]
    extent: tuple[float, float]
    nx: int
    ny: int

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError(f"need at least 2 nodes per axis, got {self.nx}x{self.ny}")
        if self.extent[0] <= 0 or self.extent[1] <= 0:
            raise ValueError("extent components must be positive")

    @property
    def h(self) -> tuple[float, float]:
        return (self.extent[0] / (self.nx - 1), self.extent[1] / (self.ny - 1))

    @property
    def h_max(self) -> float:
        return max(self.h)

    @property
    def n_nodes(self) -> int:
        return self.nx * self.ny

    @property
    def n_cells(self) -> int:
        return (self.nx - 1) * (self.ny - 1)

    @property
    def ncx(self) -> int:
        return self.nx - 1

    @property
    def ncy(self) -> int:
        return self.ny - 1

    def node_coords(self) -> np.ndarray:
        """All node coordinates, shape (n_nodes, 2), flat index j*nx + i."""
        x = self.origin[0] + self.h[0] * np.arange(self.nx)
        y = self.origin[1] + self.h[1] * np.arange(self.ny)
        X, Y = np.meshgrid(x, y, indexing="xy")  # shape (ny, nx)
        return np.stack([X.ravel(), Y.ravel()], axis=1)

    def cell_corners(self) -> np.ndarray:
        """Corner node ids per cell, shape (n_cells, 4), counter-clockwise
        from the lower-left corner."""
        ci, cj = np.meshgrid(np.arange(self.ncx), np.arange(self.ncy), indexing="xy")
        ll = cj.ravel() * self.nx + ci.ravel()
        return np.stack([ll, ll + 1, ll + self.nx + 1, ll + self.nx], axis=1)

    def cell_origin(self, cells: np.ndarray) -> np.ndarray:
        """Lower-left corner coordinates of the given cells, shape (n, 2)."""
        cells = np.asarray(cells)
        ci = cells % self.ncx
        cj = cells // self.ncx
        return np.stack(
            [self.origin[0] + ci * self.h[0], self.origin[1] + cj * self.h[1]], axis=-1
        )

    def same_box(self, other: "BackgroundMesh") -> bool:
        return np.allclose(self.origin, other.origin) and np.allclose(
            self.extent, other.extent
        )


@dataclass
class GridField:
    """Named nodal channels on a background mesh.

    Each channel is stored as an (ny, nx) float64 array; entry ``[j, i]`` is
    the value at node ``(i, j)``.
    """

    mesh: BackgroundMesh
    data: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, arr in list(self.data.items()):
            self.data[name] = self._check(name, arr)

    def _check(self, name: str, arr: np.ndarray) -> np.ndarray:
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != (self.mesh.ny, self.mesh.nx):
            raise ValueError(
                f"channel {name!r} has shape {arr.shape}, expected "
                f"{(self.mesh.ny, self.mesh.nx)}"
            )
        return arr

    @property
    def channels(self) -> list[str]:
        return list(self.data)

    def set(self, name: str, arr: np.ndarray) -> "GridField":
        if name in self.data:
            raise ValueError(f"duplicate channel {name!r}")
        self.data[name] = self._check(name, arr)
        return self

    def get(self, name: str) -> np.ndarray:
        return self.data[name]

    def flat(self, name: str) -> np.ndarray:
        """Channel as a flat (n_nodes,) array, x fastest."""
        return self.data[name].ravel()

    def __contains__(self, name: str) -> bool:
        return name in self.data


@dataclass(frozen=True)
class FacetSet:
    """Struct-of-arrays facet collection.

    axis 0 means a vertical facet (normal along x), axis 1 horizontal (normal
    along y).  For interior facets the owner is the cell with the smaller flat
    index (left / bottom neighbour) and the reference normal points in the
    positive axis direction.  For boundary facets ``neighbor`` is -1 and
    ``sign`` orients the normal outward with respect to the active mesh.
    """

    axis: np.ndarray
    owner: np.ndarray
    neighbor: np.ndarray
    sign: np.ndarray

    def __len__(self) -> int:
        return len(self.owner)

    @staticmethod
    def empty() -> "FacetSet":
        z = np.zeros(0, dtype=np.int64)
        return FacetSet(z.copy(), z.copy(), z.copy(), z.copy())

    def owner_edge(self) -> np.ndarray:
        """Local edge id of the facet within its owner cell."""
        vert = self.axis == 0
        pos = self.sign > 0
        edge = np.where(vert, np.where(pos, EDGE_RIGHT, EDGE_LEFT),
                        np.where(pos, EDGE_TOP, EDGE_BOTTOM))
        return edge

    def neighbor_edge(self) -> np.ndarray:
        """Local edge id within the neighbour cell (interior facets only)."""
        return np.where(self.axis == 0, EDGE_LEFT, EDGE_BOTTOM)


@dataclass(frozen=True)
class MeshClassification:
    """Cell tags and facet sets induced by a nodal level-set field."""

    mesh: BackgroundMesh
    cell_tags: np.ndarray          # (n_cells,) CellTag values
    active_cells: np.ndarray       # flat cell ids, sorted
    cut_cells: np.ndarray          # flat cell ids, sorted
    cut_facets: FacetSet           # interior facets touching a cut cell
    boundary_facets: FacetSet      # facets of active cells with no active neighbour
    inner_band_facets: FacetSet    # interface interior band / cut band (diagnostic)
    active_nodes: np.ndarray       # node ids of active cells, sorted
    cut_band_nodes: np.ndarray     # node ids of cut cells, sorted


def _neighbor_grid(tags: np.ndarray, ncx: int, ncy: int):
    """Active flags padded with an inactive ring, as a (ncy+2, ncx+2) grid."""
    act = (tags != CellTag.EXTERIOR).reshape(ncy, ncx)
    padded = np.zeros((ncy + 2, ncx + 2), dtype=bool)
    padded[1:-1, 1:-1] = act
    return act, padded


def classify(mesh: BackgroundMesh, phi: GridField | np.ndarray,
             channel: str = "phi") -> MeshClassification:
    """Tag cells and collect facet sets from nodal level-set values.

    A cell is cut when its corner values contain both signs or an exact zero;
    all-negative cells are interior and all-positive cells are exterior.  A
    nodal value of exactly zero counts as inside, so the zero level always
    stays within the active mesh.
    """
    if isinstance(phi, GridField):
        if not phi.mesh.same_box(mesh) or (phi.mesh.nx, phi.mesh.ny) != (mesh.nx, mesh.ny):
            raise ValueError("level-set field lives on a different mesh")
        name = channel if channel in phi else phi.channels[0]
        values = phi.get(name)
    else:
        values = np.asarray(phi, dtype=np.float64)
        if values.shape == (mesh.n_nodes,):
            values = values.reshape(mesh.ny, mesh.nx)
        if values.shape != (mesh.ny, mesh.nx):
            raise ValueError(
                f"level-set array has shape {values.shape}, expected "
                f"{(mesh.ny, mesh.nx)}"
            )

    corners = values.ravel()[mesh.cell_corners()]  # (n_cells, 4)
    has_zero = np.any(corners == 0.0, axis=1)
    has_neg = np.any(corners < 0.0, axis=1)
    has_pos = np.any(corners > 0.0, axis=1)

    tags = np.full(mesh.n_cells, CellTag.EXTERIOR, dtype=np.int8)
    tags[has_neg & ~has_pos & ~has_zero] = CellTag.INTERIOR
    tags[has_zero | (has_neg & has_pos)] = CellTag.CUT

    active_cells = np.flatnonzero(tags != CellTag.EXTERIOR)
    cut_cells = np.flatnonzero(tags == CellTag.CUT)

    ncx, ncy = mesh.ncx, mesh.ncy
    act, padded = _neighbor_grid(tags, ncx, ncy)
    cut = (tags == CellTag.CUT).reshape(ncy, ncx)
    cell_ids = np.arange(mesh.n_cells).reshape(ncy, ncx)

    # interior vertical facets: between cell (ci,cj) and (ci+1,cj)
    both_v = act[:, :-1] & act[:, 1:]
    owner_v = cell_ids[:, :-1]
    nb_v = cell_ids[:, 1:]
    cut_v = cut[:, :-1] | cut[:, 1:]
    band_v = cut[:, :-1] ^ cut[:, 1:]  # exactly one cut -> interior/cut interface
    # interior horizontal facets: between (ci,cj) and (ci,cj+1)
    both_h = act[:-1, :] & act[1:, :]
    owner_h = cell_ids[:-1, :]
    nb_h = cell_ids[1:, :]
    cut_h = cut[:-1, :] | cut[1:, :]
    band_h = cut[:-1, :] ^ cut[1:, :]

    def interior_set(mask_v, mask_h):
        mv = mask_v & both_v
        mh = mask_h & both_h
        axis = np.concatenate([np.zeros(mv.sum(), np.int64), np.ones(mh.sum(), np.int64)])
        owner = np.concatenate([owner_v[mv], owner_h[mh]])
        nb = np.concatenate([nb_v[mv], nb_h[mh]])
        sign = np.ones(len(owner), dtype=np.int64)
        return FacetSet(axis, owner, nb, sign)

    cut_facets = interior_set(cut_v, cut_h)
    inner_band = interior_set(band_v, band_h)

    # boundary facets: sides of active cells whose neighbour (padded) is inactive
    core = padded[1:-1, 1:-1]
    b_axis, b_owner, b_sign = [], [], []
    for (dj, di, axis, sign) in ((0, -1, 0, -1), (0, 1, 0, 1), (-1, 0, 1, -1), (1, 0, 1, 1)):
        nb = padded[1 + dj: ncy + 1 + dj, 1 + di: ncx + 1 + di]
        mask = core & ~nb
        ids = cell_ids[mask]
        b_axis.append(np.full(len(ids), axis, np.int64))
        b_owner.append(ids)
        b_sign.append(np.full(len(ids), sign, np.int64))
    boundary_facets = FacetSet(
        np.concatenate(b_axis),
        np.concatenate(b_owner),
        np.full(sum(len(a) for a in b_owner), -1, dtype=np.int64),
        np.concatenate(b_sign),
    )

    corners_all = mesh.cell_corners()
    active_nodes = np.unique(corners_all[active_cells])
    cut_band_nodes = np.unique(corners_all[cut_cells]) if len(cut_cells) else np.zeros(0, np.int64)

    return MeshClassification(
        mesh=mesh,
        cell_tags=tags,
        active_cells=active_cells,
        cut_cells=cut_cells,
        cut_facets=cut_facets,
        boundary_facets=boundary_facets,
        inner_band_facets=inner_band,
        active_nodes=active_nodes,
        cut_band_nodes=cut_band_nodes,
    )


def facet_normal(facets: FacetSet, index: int | None = None) -> np.ndarray:
    """Unit normal(s) of facets, oriented by owner convention / outward.

    Returns shape (2,) for a single facet or (n, 2) for the whole set.
    """
    axis = facets.axis
    sign = facets.sign
    n = np.zeros((len(facets), 2))
    n[np.arange(len(facets)), axis] = sign
    if index is not None:
        return n[index]
    return n


def active_domain_mask(cls: MeshClassification) -> np.ndarray:
    """Boolean per-cell mask, true exactly on active (interior or cut) cells."""
    return cls.cell_tags != CellTag.EXTERIOR
