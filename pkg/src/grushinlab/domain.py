"""Uniform grids, tensor products and subdomain index sets.

Conventions used throughout the package:

* A :class:`Grid1D` holds every node, boundary nodes included.
* Unknown vectors live on *interior* nodes only (homogeneous Dirichlet data is
  eliminated).  On a tensor grid they are flattened x-major, i.e. the last axis
  (``y`` for a Grushin domain) varies fastest.
* Integrals of functions vanishing on the boundary reduce the trapezoid rule to
  ``cell_volume * sum(values)``, so the grid inner product of two interior
  vectors is a plain dot product scaled by :attr:`TensorGrid.cell_volume`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

# Membership tests against box edges use this relative slack so that nodes
# produced by a + i*h are classified consistently.
_EDGE_RTOL = 1e-10


class DomainError(ValueError):
    """Invalid grid or degenerate subdomain request."""


@dataclass(frozen=True)
class Grid1D:
    a: float
    b: float
    N: int

    def __post_init__(self):
        if not np.isfinite(self.a) or not np.isfinite(self.b) or self.a >= self.b:
            raise DomainError(f"need a < b, got a={self.a}, b={self.b}")
        if int(self.N) != self.N or self.N < 3:
            raise DomainError(f"need at least 3 nodes, got N={self.N}")

    @property
    def h(self) -> float:
        return (self.b - self.a) / (self.N - 1)

    @property
    def length(self) -> float:
        return self.b - self.a

    @cached_property
    def nodes(self) -> np.ndarray:
        x = self.a + self.h * np.arange(self.N)
        x[-1] = self.b
        x.setflags(write=False)
        return x

    @property
    def interior(self) -> np.ndarray:
        return self.nodes[1:-1]

    @property
    def n_interior(self) -> int:
        return self.N - 2

    @property
    def boundary_mask(self) -> np.ndarray:
        m = np.zeros(self.N, dtype=bool)
        m[[0, -1]] = True
        return m

    @property
    def interior_mask(self) -> np.ndarray:
        return ~self.boundary_mask

    def trapezoid_weights(self) -> np.ndarray:
        w = np.full(self.N, self.h)
        w[[0, -1]] = 0.5 * self.h
        return w

    def strictly_inside(self, lo: float, hi: float) -> np.ndarray:
        """Mask of nodes with lo < x < hi (edge slack relative to h)."""
        tol = _EDGE_RTOL * self.h
        x = self.nodes
        return (x > lo + tol) & (x < hi - tol)

    def refined(self, factor: int = 2) -> "Grid1D":
        return Grid1D(self.a, self.b, factor * (self.N - 1) + 1)

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "N": self.N}


def build_interval_grid(a: float, b: float, N: int) -> Grid1D:
    return Grid1D(float(a), float(b), int(N))


@dataclass(frozen=True)
class TensorGrid:
    """Cartesian product of uniform axes.

    ``n_x`` is the number of leading axes that belong to the degenerate
    variable x; the remaining axis (at most one) is y.  A grid with
    ``n_x == len(axes)`` is a pure x-space, as used by the mode operators.
    """

    axes: tuple[Grid1D, ...]
    n_x: int = -1

    def __post_init__(self):
        axes = tuple(self.axes)
        if not axes:
            raise DomainError("a tensor grid needs at least one axis")
        object.__setattr__(self, "axes", axes)
        n_x = len(axes) if self.n_x < 0 else self.n_x
        if not 1 <= n_x <= 2 or len(axes) - n_x not in (0, 1):
            raise DomainError(
                f"supported layouts: 1 or 2 x-axes and at most one y-axis, got {len(axes)} axes with n_x={n_x}"
            )
        object.__setattr__(self, "n_x", n_x)

    # --- structure -----------------------------------------------------
    @property
    def ndim(self) -> int:
        return len(self.axes)

    @property
    def has_y(self) -> bool:
        return self.ndim > self.n_x

    @property
    def x_part(self) -> "TensorGrid":
        return TensorGrid(self.axes[: self.n_x])

    @property
    def grid_y(self) -> Grid1D:
        if not self.has_y:
            raise DomainError("this grid has no y-axis")
        return self.axes[-1]

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(g.N for g in self.axes)

    @property
    def interior_shape(self) -> tuple[int, ...]:
        return tuple(g.n_interior for g in self.axes)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    @property
    def n_interior(self) -> int:
        return int(np.prod(self.interior_shape))

    @property
    def cell_volume(self) -> float:
        return float(np.prod([g.h for g in self.axes]))

    @property
    def measure(self) -> float:
        return float(np.prod([g.length for g in self.axes]))

    # --- coordinates and quadrature --------------------------------------
    def mesh(self, interior: bool = True) -> tuple[np.ndarray, ...]:
        pts = [g.interior if interior else g.nodes for g in self.axes]
        return tuple(np.meshgrid(*pts, indexing="ij"))

    def quadrature_weights(self) -> np.ndarray:
        """Trapezoid weights on all nodes, flattened x-major."""
        w = self.axes[0].trapezoid_weights()
        for g in self.axes[1:]:
            w = np.multiply.outer(w, g.trapezoid_weights())
        return w.ravel()

    def inner(self, u: np.ndarray, v: np.ndarray) -> float:
        """L2 inner product of interior vectors (Dirichlet data is zero)."""
        return self.cell_volume * float(np.dot(np.ravel(u), np.ravel(v)))

    def norm(self, u: np.ndarray) -> float:
        return float(np.sqrt(self.inner(u, u)))

    def embed(self, u: np.ndarray) -> np.ndarray:
        """Interior vector -> full nodal array with zero boundary values."""
        full = np.zeros(self.shape)
        full[tuple(slice(1, -1) for _ in self.axes)] = np.reshape(u, self.interior_shape)
        return full

    def restrict(self, full: np.ndarray) -> np.ndarray:
        """Full nodal array -> flat interior vector."""
        full = np.reshape(full, self.shape)
        return full[tuple(slice(1, -1) for _ in self.axes)].ravel()

    def sample(self, fn) -> np.ndarray:
        """Evaluate ``fn(*coords)`` on interior nodes, flattened."""
        return np.broadcast_to(fn(*self.mesh()), self.interior_shape).ravel().copy()

    def refined(self, factor: int = 2) -> "TensorGrid":
        return TensorGrid(tuple(g.refined(factor) for g in self.axes), self.n_x)

    def to_dict(self) -> dict:
        return {"axes": [g.to_dict() for g in self.axes], "n_x": self.n_x}


def as_tensor_grid(grid: Grid1D | TensorGrid) -> TensorGrid:
    return TensorGrid((grid,)) if isinstance(grid, Grid1D) else grid


def build_tensor_grid(x_axes: Sequence[Grid1D] | Grid1D, grid_y: Grid1D | None = None) -> TensorGrid:
    if isinstance(x_axes, Grid1D):
        x_axes = (x_axes,)
    axes = tuple(x_axes) + ((grid_y,) if grid_y is not None else ())
    return TensorGrid(axes, len(tuple(x_axes)))


@dataclass(frozen=True)
class IndexSet:
    """Sorted flat node indices (full-grid numbering) of a box subdomain."""

    indices: np.ndarray
    box: tuple[tuple[float, float], ...]
    grid_shape: tuple[int, ...] = field(default=())

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0):
            raise DomainError("index set must be sorted, unique and nonnegative")
        if self.grid_shape and idx.size and idx[-1] >= int(np.prod(self.grid_shape)):
            raise DomainError("index out of grid bounds")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return int(self.indices.size)

    def node_mask(self) -> np.ndarray:
        m = np.zeros(int(np.prod(self.grid_shape)), dtype=bool)
        m[self.indices] = True
        return m

    def interior_mask(self) -> np.ndarray:
        """Boolean mask aligned with interior unknown vectors."""
        m = self.node_mask().reshape(self.grid_shape)
        return m[tuple(slice(1, -1) for _ in self.grid_shape)].ravel()

    def measure(self, grid: Grid1D | TensorGrid) -> float:
        """Trapezoid quadrature of the constant 1 over the member nodes."""
        return float(as_tensor_grid(grid).quadrature_weights()[self.indices].sum())


def subdomain_indices(
    grid: Grid1D | TensorGrid, box: Sequence[tuple[float, float] | None]
) -> IndexSet:
    """Interior nodes lying strictly inside ``box`` (one interval per axis).

    ``None`` for an axis means the whole axis, e.g. a strip ``ω₁ × Ω₂`` is
    ``[(lo, hi), None]``.
    """
    tg = as_tensor_grid(grid)
    if isinstance(box, tuple) and len(box) == 2 and np.isscalar(box[0]):
        box = [box]
    box = list(box)
    if len(box) != tg.ndim:
        raise DomainError(f"box has {len(box)} intervals, grid has {tg.ndim} axes")
    masks = []
    resolved = []
    for g, iv in zip(tg.axes, box):
        lo, hi = (g.a, g.b) if iv is None else (float(iv[0]), float(iv[1]))
        if lo >= hi:
            raise DomainError(f"empty interval ({lo}, {hi})")
        masks.append(g.strictly_inside(lo, hi) & g.interior_mask)
        resolved.append((lo, hi))
    m = masks[0]
    for mk in masks[1:]:
        m = np.multiply.outer(m, mk)
    idx = np.flatnonzero(m.ravel())
    if idx.size == 0:
        raise DomainError(f"box {resolved} contains no interior node: degenerate observation region")
    return IndexSet(idx, tuple(resolved), tg.shape)


def full_box(grid: Grid1D | TensorGrid) -> list[tuple[float, float]]:
    return [(g.a, g.b) for g in as_tensor_grid(grid).axes]
