"""Uniform tensor grids with Neumann-compatible difference operators.

Scalar unknowns live on nodes, gradients live on cells.  The gradient of a
nodal field is the cell average of the gradient of its multilinear
interpolant (exact for affine fields), and the divergence is defined as the
negative adjoint of the gradient with respect to the trapezoidal nodal
inner product and the cell-volume vector inner product:

    <grad f, w>_cells = -<f, div w>_nodes     for all f, w.

That adjoint pairing is the discrete form of the zero-flux boundary
condition; no ghost nodes are ever introduced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class GridMismatchError(ValueError):
    """Raised when fields from structurally different grids are combined."""


def _difference_matrix(n: int, h: float) -> sp.csr_matrix:
    # maps n+1 node values to n cell slopes
    return sp.diags_array(
        [np.full(n, -1.0 / h), np.full(n, 1.0 / h)], offsets=[0, 1], shape=(n, n + 1)
    ).tocsr()


def _average_matrix(n: int) -> sp.csr_matrix:
    # maps n+1 node values to n cell midpoint averages
    return sp.diags_array(
        [np.full(n, 0.5), np.full(n, 0.5)], offsets=[0, 1], shape=(n, n + 1)
    ).tocsr()


def _trapezoid_weights(n: int, h: float) -> np.ndarray:
    w = np.full(n + 1, h)
    w[0] = w[-1] = 0.5 * h
    return w


class Grid:
    """Uniform grid on an interval (dim 1) or axis-aligned rectangle (dim 2).

    Nodes are ordered C-style (x index outermost).  All operator matrices are
    assembled once at construction; instances are immutable and safe to share.
    """

    def __init__(self, dim, lengths, cells, _spacing=None):
        dim = int(dim)
        if dim not in (1, 2):
            raise ValueError(f"unsupported dimension {dim}; must be 1 or 2")
        lengths = tuple(float(L) for L in np.atleast_1d(lengths))
        cells = tuple(int(c) for c in np.atleast_1d(cells))
        if len(lengths) != dim or len(cells) != dim:
            raise ValueError(
                f"lengths and cells must each have {dim} entries, "
                f"got {len(lengths)} and {len(cells)}"
            )
        if any(not math.isfinite(L) or L <= 0.0 for L in lengths):
            raise ValueError(f"domain extents must be positive, got {lengths}")
        if any(c < 1 for c in cells):
            raise ValueError(f"cell counts must be >= 1, got {cells}")

        self.dim = dim
        self.lengths = lengths
        self.cells = cells
        if _spacing is None:
            self.spacing = tuple(L / c for L, c in zip(lengths, cells))
        else:
            self.spacing = tuple(float(s) for s in _spacing)
        self.node_shape = tuple(c + 1 for c in cells)
        self.cell_shape = cells
        self.node_count = int(np.prod(self.node_shape))
        self.cell_count = int(np.prod(self.cell_shape))
        self.cell_volume = float(np.prod(self.spacing))

        axes_w = [_trapezoid_weights(c, h) for c, h in zip(cells, self.spacing)]
        axes_d = [_difference_matrix(c, h) for c, h in zip(cells, self.spacing)]
        axes_a = [_average_matrix(c) for c in cells]

        if dim == 1:
            self.node_weights = axes_w[0]
            self.grad_matrices = (axes_d[0],)
            self.avg_matrix = axes_a[0]
            coords = np.linspace(0.0, lengths[0], cells[0] + 1)[:, None]
        else:
            self.node_weights = np.kron(axes_w[0], axes_w[1])
            self.grad_matrices = (
                sp.kron(axes_d[0], axes_a[1]).tocsr(),
                sp.kron(axes_a[0], axes_d[1]).tocsr(),
            )
            self.avg_matrix = sp.kron(axes_a[0], axes_a[1]).tocsr()
            xs = np.linspace(0.0, lengths[0], cells[0] + 1)
            ys = np.linspace(0.0, lengths[1], cells[1] + 1)
            gx, gy = np.meshgrid(xs, ys, indexing="ij")
            coords = np.column_stack([gx.ravel(), gy.ravel()])
        self.node_coords = coords

        stiff = sum(
            self.cell_volume * (g.T @ g) for g in self.grad_matrices
        )
        self.stiffness = stiff.tocsr()

    # structural identity: grids read back from disk compare equal
    def __eq__(self, other):
        if not isinstance(other, Grid):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.cells == other.cells
            and self.spacing == other.spacing
        )

    def __hash__(self):
        return hash((self.dim, self.cells, self.spacing))

    def __repr__(self):
        return f"Grid(dim={self.dim}, lengths={self.lengths}, cells={self.cells})"

    def apply_gradient(self, values: np.ndarray) -> np.ndarray:
        """Raw gradient of nodal values: array of shape (dim, cell_count)."""
        return np.stack([g @ values for g in self.grad_matrices])

    def average_to_cells(self, values: np.ndarray) -> np.ndarray:
        return self.avg_matrix @ values

    def gradient_adjoint(self, comps: np.ndarray) -> np.ndarray:
        """Nodal vector G^T (vol * comps), summed over components."""
        out = np.zeros(self.node_count)
        for g, c in zip(self.grad_matrices, comps):
            out += g.T @ (self.cell_volume * c)
        return out


@dataclass
class Field:
    """Nodal scalar field on a grid; values are a flat C-ordered array."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=float)
        if self.values.shape != (self.grid.node_count,):
            raise ValueError(
                f"expected {self.grid.node_count} nodal values, "
                f"got shape {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite values")

    def copy(self) -> "Field":
        return Field(self.grid, self.values.copy())

    def reshaped(self) -> np.ndarray:
        return self.values.reshape(self.grid.node_shape)


@dataclass
class VectorField:
    """Cell-centered vector field; components has shape (dim, cell_count)."""

    grid: Grid
    components: np.ndarray

    def __post_init__(self):
        self.components = np.ascontiguousarray(self.components, dtype=float)
        expected = (self.grid.dim, self.grid.cell_count)
        if self.components.shape != expected:
            raise ValueError(
                f"expected components of shape {expected}, "
                f"got {self.components.shape}"
            )
        if not np.all(np.isfinite(self.components)):
            raise ValueError("vector field contains non-finite values")


def build_grid(dim, lengths, cells) -> Grid:
    """Construct a validated uniform grid."""
    return Grid(dim, lengths, cells)


def _check_same_grid(a, b):
    if a.grid != b.grid:
        raise GridMismatchError(f"grid mismatch: {a.grid!r} vs {b.grid!r}")


def gradient(grid: Grid, f: Field) -> VectorField:
    """Cell-averaged gradient of a nodal field (exact on affine fields)."""
    if f.grid != grid:
        raise GridMismatchError(f"field grid {f.grid!r} does not match {grid!r}")
    return VectorField(grid, grid.apply_gradient(f.values))


def divergence(grid: Grid, w: VectorField) -> Field:
    """Negative adjoint of :func:`gradient`; encodes the zero-flux condition."""
    if w.grid != grid:
        raise GridMismatchError(f"vector field grid {w.grid!r} does not match {grid!r}")
    return Field(grid, -grid.gradient_adjoint(w.components) / grid.node_weights)


def inner_h(f: Field, g: Field) -> float:
    """Trapezoidal L2 inner product of nodal fields."""
    _check_same_grid(f, g)
    return float(np.dot(f.grid.node_weights * f.values, g.values))


def inner_h_vec(w1: VectorField, w2: VectorField) -> float:
    """Cell-volume L2 inner product of cell vector fields."""
    _check_same_grid(w1, w2)
    return float(w1.grid.cell_volume * np.sum(w1.components * w2.components))


def norm_h(f: Field) -> float:
    return math.sqrt(inner_h(f, f))


def norm_v(f: Field) -> float:
    """H1 norm: |f|_H^2 plus the squared gradient H-norm."""
    grad = f.grid.apply_gradient(f.values)
    return math.sqrt(
        inner_h(f, f) + f.grid.cell_volume * float(np.sum(grad * grad))
    )
