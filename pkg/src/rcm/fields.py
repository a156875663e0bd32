"""Smooth test functions on R^d and their cell averages on an eps-grid.

Lattice vertex x is identified with the macroscopic cell eps*(x + [0,1)^d).
On a torus of N^d vertices the macroscopic domain is the torus of side
N*eps, and profiles are periodized over that side.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConstructionError, GeometryError

PROFILE_KINDS = ("gaussian", "dipole", "custom")


@dataclass(frozen=True)
class MacroscopicProfile:
    """Test function f on R^d.

    gaussian: amplitude * exp(-|x - center|^2 / (2 width^2))
    dipole:   amplitude * (x_a - c_a) / width * exp(-|x - center|^2 / (2 width^2)),
              a = axis; integrates to zero
    custom:   cell-constant values on a grid of spacing `spacing` whose
              cell (0,...,0) starts at `center`; zero outside the grid

    Gaussians are not compactly supported; support_radius (default
    6 * width) is where they are treated as vanishing, which bounds the
    neglected mass by about exp(-18).
    """

    kind: str
    center: tuple
    width: float = 1.0
    amplitude: float = 1.0
    axis: int = 0
    grid: np.ndarray | None = field(default=None, compare=False)
    spacing: float = 1.0
    support: float | None = None

    def __post_init__(self):
        if self.kind not in PROFILE_KINDS:
            raise ConstructionError("kind", f"unknown profile {self.kind!r}")
        object.__setattr__(self, "center", tuple(float(c) for c in np.atleast_1d(self.center)))
        if self.kind != "custom" and not self.width > 0:
            raise ConstructionError("width", "must be positive")
        if self.kind == "dipole" and not 0 <= self.axis < self.d:
            raise ConstructionError("axis", f"must be in [0, {self.d})")
        if self.kind == "custom":
            if self.grid is None or np.ndim(self.grid) != self.d:
                raise ConstructionError("grid", "custom profiles need a d-dimensional value grid")
            object.__setattr__(self, "grid", np.asarray(self.grid, dtype=float))

    @property
    def d(self) -> int:
        return len(self.center)

    @property
    def support_radius(self) -> float:
        if self.support is not None:
            return float(self.support)
        if self.kind == "custom":
            ext = np.array(self.grid.shape) * self.spacing
            return float(np.linalg.norm(ext))
        return 6.0 * self.width

    @property
    def integral(self) -> float:
        if self.kind == "gaussian":
            return float(self.amplitude * (2 * np.pi * self.width**2) ** (self.d / 2))
        if self.kind == "dipole":
            return 0.0
        return float(self.grid.sum() * self.spacing**self.d)

    def scaled(self, c: float) -> "MacroscopicProfile":
        if self.kind == "custom":
            return MacroscopicProfile("custom", self.center, grid=c * self.grid, spacing=self.spacing,
                                      support=self.support)
        return MacroscopicProfile(self.kind, self.center, self.width, c * self.amplitude, self.axis,
                                  support=self.support)

    def __call__(self, pts, period=None) -> np.ndarray:
        """f at points of shape (..., d); with period, the sum over images."""
        pts = np.asarray(pts, dtype=float)
        if period is None or self.kind == "custom":
            return self._eval(pts)
        out = np.zeros(pts.shape[:-1])
        kmax = int(np.ceil(self.support_radius / period))
        for shift in np.ndindex(*(2 * kmax + 1,) * self.d):
            out += self._eval(pts + period * (np.array(shift) - kmax))
        return out

    def _eval(self, pts: np.ndarray) -> np.ndarray:
        y = pts - np.array(self.center)
        if self.kind == "custom":
            idx = np.floor(y / self.spacing).astype(np.int64)
            inside = np.all((idx >= 0) & (idx < np.array(self.grid.shape)), axis=-1)
            out = np.zeros(pts.shape[:-1])
            out[inside] = self.grid[tuple(idx[inside].T)]
            return out
        g = self.amplitude * np.exp(-np.sum(y * y, axis=-1) / (2 * self.width**2))
        if self.kind == "dipole":
            g = g * y[..., self.axis] / self.width
        return g

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "center": list(self.center)}
        if self.kind == "custom":
            out.update(grid=self.grid.tolist(), spacing=self.spacing)
        else:
            out.update(width=self.width, amplitude=self.amplitude)
            if self.kind == "dipole":
                out["axis"] = self.axis
        if self.support is not None:
            out["support"] = self.support
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "MacroscopicProfile":
        d = dict(d)
        if "grid" in d:
            d["grid"] = np.asarray(d["grid"], dtype=float)
        return cls(**d)


def check_support(profile: MacroscopicProfile, sides, eps: float) -> None:
    """Raise GeometryError unless the support ball lies inside [0, N eps]^d."""
    ext = np.asarray(sides, dtype=float) * eps
    c = np.array(profile.center)
    r = profile.support_radius
    if len(c) != len(ext):
        raise GeometryError(f"profile is {len(c)}-dimensional, domain is {len(ext)}-dimensional")
    if np.any(c - r < -1e-12) or np.any(c + r > ext + 1e-12):
        raise GeometryError(f"support of radius {r:g} around {tuple(c)} leaves the domain [0, {ext.tolist()}]")


def _cell_quadrature(fn, sides, eps: float, order: int) -> np.ndarray:
    """Average of fn over every cell eps*(x + [0,1)^d), C-order, via Gauss-Legendre."""
    nodes, weights = np.polynomial.legendre.leggauss(order)
    nodes = 0.5 * (nodes + 1.0)
    weights = 0.5 * weights
    d = len(sides)
    grids = np.meshgrid(*[np.arange(s, dtype=float) for s in sides], indexing="ij")
    base = np.stack([g.ravel() for g in grids], axis=1)
    out = np.zeros(len(base))
    for combo in np.ndindex(*(order,) * d):
        z = nodes[list(combo)]
        out += np.prod(weights[list(combo)]) * fn(eps * (base + z))
    return out


def cell_averages(profile: MacroscopicProfile, sides, eps: float, order: int = 6,
                  periodic: bool = True) -> np.ndarray:
    """Average of f over each macroscopic cell; exact for custom profiles on a matching grid."""
    period = None
    if periodic:
        ext = np.asarray(sides, dtype=float) * eps
        if not np.allclose(ext, ext[0]):
            raise GeometryError("periodization needs a cubic torus")
        period = float(ext[0])
    return _cell_quadrature(lambda p: profile(p, period), sides, eps, order)


def cell_integrals(profile: MacroscopicProfile, sides, eps: float, order: int = 6,
                   periodic: bool = True) -> np.ndarray:
    return cell_averages(profile, sides, eps, order, periodic) * eps ** len(sides)
