"""Regular rectangular grids used for field discretisation.

Grid arrays are stored with shape ``(ny, nx)``, C order, so ``values[iy, ix]``
is the value at ``(x_i, y_j) = (ix * Dx / (nx - 1), iy * Dy / (ny - 1))``.
Grid points include both domain endpoints.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class RegularGrid:
    nx: int
    ny: int
    Dx: float
    Dy: float

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError("grid needs at least 2 points per axis")
        if self.Dx <= 0 or self.Dy <= 0:
            raise ValueError("domain lengths must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def dx(self) -> float:
        return self.Dx / (self.nx - 1)

    @property
    def dy(self) -> float:
        return self.Dy / (self.ny - 1)

    @cached_property
    def xs(self) -> np.ndarray:
        return np.linspace(0.0, self.Dx, self.nx)

    @cached_property
    def ys(self) -> np.ndarray:
        return np.linspace(0.0, self.Dy, self.ny)

    def points(self) -> np.ndarray:
        """All grid points as an ``(nx * ny, 2)`` array, row-major over (ny, nx)."""
        X, Y = np.meshgrid(self.xs, self.ys)
        return np.column_stack([X.ravel(), Y.ravel()])

    def nearest_index(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        """Indices (iy, ix) of the grid point nearest to (x, y).

        Ties are broken toward the lower index.
        """
        ix = np.ceil(np.asarray(x) / self.dx - 0.5).astype(int)
        iy = np.ceil(np.asarray(y) / self.dy - 0.5).astype(int)
        return np.clip(iy, 0, self.ny - 1), np.clip(ix, 0, self.nx - 1)
