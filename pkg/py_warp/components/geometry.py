# Periodic circle base of a warped product N x_f F with f = e^u.
# Last modified on Oct 18, 2026
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from ..utility.errors import (
    DegenerateMetricError,
    DimensionError,
    NumericalBlowupError,
)

# Stencils act on the trailing axis so that stacks of time slices with shape
# (n_times, n_points) are processed in one call.


def shift(f, k):
    """Return f_{i+k} with periodic index arithmetic."""
    return np.roll(f, -k, axis=-1)


def ddx(f, dx):
    """Centered first derivative."""
    return (shift(f, 1) - shift(f, -1)) / (2.0 * dx)


def d2dx2(f, dx):
    """Centered second coordinate derivative."""
    return (shift(f, 1) - 2.0 * f + shift(f, -1)) / dx**2


def half_phi(phi):
    """phi at the half points i + 1/2."""
    return 0.5 * (phi + shift(phi, 1))


def metric_laplacian(f, phi, dx):
    """Conservative Delta_N f = (1/phi) d/dx ((1/phi) df/dx)."""
    flux = (shift(f, 1) - f) / (dx * half_phi(phi))
    return (flux - shift(flux, -1)) / (dx * phi)


def inner_gradient(a, b, phi, dx):
    """<grad a, grad b> in the metric phi^2 dx^2."""
    return ddx(a, dx) * ddx(b, dx) / phi**2


def gradient_norm_sq(f, phi, dx):
    """|grad f|^2 in the metric phi^2 dx^2."""
    return inner_gradient(f, f, phi, dx)


def integrate(f, phi, dx):
    """Midpoint quadrature of f against the cell measure phi * dx."""
    return np.sum(f * phi, axis=-1) * dx


@dataclass(frozen=True)
class Grid1D:
    """Uniform periodic grid on a coordinate circle.

    Parameters
    ----------
    n_points : int
        Number of grid points, even and at least 16.
    coordinate_length : float, optional
        Coordinate period, by default 2*pi.

    Attributes
    ----------
    spacing : float
        coordinate_length / n_points.
    x : numpy.ndarray
        Grid coordinates i * spacing.
    """

    n_points: int
    coordinate_length: float = 2.0 * np.pi

    def __post_init__(self):
        if int(self.n_points) != self.n_points or self.n_points < 16:
            raise DimensionError(
                f"n_points must be an integer >= 16, got {self.n_points}."
            )
        if self.n_points % 2:
            raise DimensionError(f"n_points must be even, got {self.n_points}.")
        if not self.coordinate_length > 0:
            raise DimensionError(
                f"coordinate_length must be positive, got {self.coordinate_length}."
            )

    @property
    def spacing(self) -> float:
        return self.coordinate_length / self.n_points

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.n_points) * self.spacing

    def wrap(self, index):
        """Map any integer index onto the grid."""
        return np.mod(index, self.n_points)

    def check_field(self, values, name="field"):
        values = np.asarray(values, dtype=float)
        if values.shape[-1:] != (self.n_points,):
            raise DimensionError(
                f"{name} has shape {values.shape}; expected trailing axis "
                f"of length {self.n_points}."
            )
        return values


def _frozen(values):
    values = np.array(values, dtype=float)
    values.setflags(write=False)
    return values


@dataclass(frozen=True)
class WarpedGeometry:
    """One time slice of the base metric and the warping exponent.

    The base metric is g_N = phi^2 dx^2 and the total metric is
    g_N + e^{2u} g_F over a flat p-dimensional fiber.

    Parameters
    ----------
    grid : Grid1D
        The periodic base grid.
    phi : array
        Positive metric density.
    u : array
        Warping exponent. In the gauged convention the stored field carries
        the sqrt(p) factor, i.e. u_stored = sqrt(p) * u_physical.
    p : int
        Fiber dimension.
    time : float, optional
        Flow time of the slice, by default 0.
    gauged : bool, optional
        Storage convention of u, by default False.

    Notes
    -----
    Arrays are copied and made read-only; a geometry never changes after
    construction.
    """

    grid: Grid1D
    phi: np.ndarray
    u: np.ndarray
    p: int = 1
    time: float = 0.0
    gauged: bool = False
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        phi = self.grid.check_field(self.phi, "phi")
        u = self.grid.check_field(self.u, "u")
        if phi.ndim != 1 or u.ndim != 1:
            raise DimensionError("phi and u must be one-dimensional fields.")
        if int(self.p) != self.p or self.p < 1:
            raise DimensionError(f"p must be a positive integer, got {self.p}.")
        if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(u))):
            raise NumericalBlowupError(f"Non-finite geometry at t = {self.time}.")
        if np.any(phi <= 0):
            raise DegenerateMetricError(
                f"phi <= 0 at t = {self.time} (min phi = {phi.min():.3e})."
            )
        object.__setattr__(self, "phi", _frozen(phi))
        object.__setattr__(self, "u", _frozen(u))
        object.__setattr__(self, "p", int(self.p))
        object.__setattr__(self, "time", float(self.time))

    @classmethod
    def from_functions(cls, grid, phi_fn, u_fn, p=1, time=0.0, gauged=False):
        """Sample phi and u from callables of the coordinate x."""
        x = grid.x
        phi = np.broadcast_to(np.asarray(phi_fn(x), dtype=float), x.shape)
        u = np.broadcast_to(np.asarray(u_fn(x), dtype=float), x.shape)
        return cls(grid, phi, u, p=p, time=time, gauged=gauged)

    @property
    def dx(self) -> float:
        return self.grid.spacing

    @property
    def physical_u(self) -> np.ndarray:
        """The warping exponent u = ln f regardless of convention."""
        return self.u / np.sqrt(self.p) if self.gauged else self.u

    @property
    def coupling(self) -> int:
        """Factor c such that c |grad u_stored|^2 = p |grad u_physical|^2."""
        return 1 if self.gauged else self.p

    @property
    def measure(self) -> np.ndarray:
        """Cell measure phi * spacing of dmu_N."""
        return self.phi * self.dx

    @property
    def total_length(self) -> float:
        return float(np.sum(self.measure))

    def to_gauged(self):
        """Return the same slice with u stored as sqrt(p) * u."""
        if self.gauged:
            return self
        return WarpedGeometry(
            self.grid, self.phi, np.sqrt(self.p) * self.u, self.p, self.time, True
        )

    def to_ungauged(self):
        """Return the same slice with u stored as the physical exponent."""
        if not self.gauged:
            return self
        return WarpedGeometry(
            self.grid, self.phi, self.physical_u, self.p, self.time, False
        )

    def replace(self, phi=None, u=None, time=None):
        return WarpedGeometry(
            self.grid,
            self.phi if phi is None else phi,
            self.u if u is None else u,
            self.p,
            self.time if time is None else time,
            self.gauged,
        )

    def cumulative_arc(self) -> np.ndarray:
        """Arc length from x_0 to x_k, k = 0..n (trapezoid); entry n is the length."""
        if "cumulative_arc" not in self._cache:
            seg = half_phi(self.phi) * self.dx
            self._cache["cumulative_arc"] = np.concatenate(([0.0], np.cumsum(seg)))
        return self._cache["cumulative_arc"]


@dataclass(frozen=True)
class CurvatureBundle:
    """Curvature quantities of a warped slice sampled on the base grid.

    Attributes
    ----------
    R_M : numpy.ndarray
        Scalar curvature of the total space.
    Rc_fiber_block : numpy.ndarray
        Multiple of g_F in Rc_M.
    S : numpy.ndarray
        S = R_N - p |grad u|^2 with R_N = 0.
    S_tensor_xx : numpy.ndarray
        Coordinate xx component of Rc - du (x) du in the gauged system.
    """

    R_M: np.ndarray
    Rc_fiber_block: np.ndarray
    S: np.ndarray
    S_tensor_xx: np.ndarray


def warped_laplacian(values, geom):
    """Laplacian of the warped product acting on functions of the base.

    Parameters
    ----------
    values : array
        Field on geom.grid.
    geom : WarpedGeometry
        The slice.

    Returns
    -------
    numpy.ndarray
        Delta_N values + p <grad u, grad values>, u the physical exponent.
    """
    values = geom.grid.check_field(values)
    dx = geom.dx
    return metric_laplacian(values, geom.phi, dx) + geom.p * inner_gradient(
        geom.physical_u, values, geom.phi, dx
    )


def base_operators(values, geom):
    """Metric gradient norm, base Laplacian and integral of a field.

    Returns
    -------
    dict
        {"gradient_norm_sq": field, "laplacian": field, "integral_dmu": float}
    """
    values = geom.grid.check_field(values)
    return {
        "gradient_norm_sq": gradient_norm_sq(values, geom.phi, geom.dx),
        "laplacian": metric_laplacian(values, geom.phi, geom.dx),
        "integral_dmu": float(integrate(values, geom.phi, geom.dx)),
    }


def adapted_scalar(geom):
    """S = -p |grad u|^2 of the slice (R_N = 0 on a circle)."""
    return -geom.p * gradient_norm_sq(geom.physical_u, geom.phi, geom.dx)


def warped_curvatures(geom):
    """Curvatures of g_N + e^{2u} g_F for a circle base and a flat fiber.

    Parameters
    ----------
    geom : WarpedGeometry
        The slice.

    Returns
    -------
    CurvatureBundle
        R_M = -2p Delta u - p(p+1)|grad u|^2, the fiber block
        -e^{2u}(Delta u + p |grad u|^2), S and S_xx.
    """
    if np.any(geom.phi <= 0):
        raise DegenerateMetricError("phi <= 0 in warped_curvatures.")
    p, dx = geom.p, geom.dx
    u = geom.physical_u
    lap_u = metric_laplacian(u, geom.phi, dx)
    grad_sq = gradient_norm_sq(u, geom.phi, dx)
    return CurvatureBundle(
        R_M=-2.0 * p * lap_u - p * (p + 1) * grad_sq,
        Rc_fiber_block=-np.exp(2.0 * u) * (lap_u + p * grad_sq),
        S=-p * grad_sq,
        S_tensor_xx=-p * ddx(u, dx) ** 2,
    )


def geodesic_distance(geom, x_index, y_index):
    """Length of the shorter of the two arcs between two grid points."""
    n = geom.grid.n_points
    cum = geom.cumulative_arc()
    arc = abs(cum[int(x_index) % n] - cum[int(y_index) % n])
    return float(min(arc, cum[-1] - arc))


def distance_from(geom, y_index):
    """Geodesic distances from grid point y_index to every grid point."""
    n = geom.grid.n_points
    cum = geom.cumulative_arc()
    arc = np.abs(cum[:n] - cum[int(y_index) % n])
    return np.minimum(arc, cum[-1] - arc)


def distance_matrix(geom):
    """All pairwise geodesic distances, shape (n, n)."""
    n = geom.grid.n_points
    cum = geom.cumulative_arc()
    arc = np.abs(cum[:n, None] - cum[None, :n])
    return np.minimum(arc, cum[-1] - arc)


def product_curvature_oracle(geom, fiber_points=4):
    """Scalar curvature of diag(phi^2, f^2, ..., f^2) from coordinate formulas.

    The metric is assembled on an n x m^p product grid over the flat unit
    p-torus, Christoffel symbols and the Ricci tensor come from periodic
    centered differences of the metric, and no warped-product identity is
    used anywhere.

    Parameters
    ----------
    geom : WarpedGeometry
        The slice; 1 <= p <= 3.
    fiber_points : int, optional
        Points per fiber direction, by default 4.

    Returns
    -------
    numpy.ndarray
        R_M on the base grid.
    """
    p = geom.p
    if p > 3:
        raise DimensionError(
            f"product_curvature_oracle holds a (1+p)^4 x n x m^p array; p = {p} "
            "is refused to bound memory."
        )
    dim = 1 + p
    n, m = geom.grid.n_points, int(fiber_points)
    shape = (n,) + (m,) * p
    steps = (geom.dx,) + (1.0 / m,) * p
    expand = (slice(None),) + (None,) * p

    g = np.zeros((dim, dim) + shape)
    g[0, 0] = np.broadcast_to(geom.phi[expand] ** 2, shape)
    f_sq = np.exp(2.0 * geom.physical_u)[expand]
    for a in range(1, dim):
        g[a, a] = np.broadcast_to(f_sq, shape)
    g_inv = np.moveaxis(
        np.linalg.inv(np.moveaxis(g, (0, 1), (-2, -1))), (-2, -1), (0, 1)
    )

    def partial(arr):
        # partial(arr)[c, ...] = d arr / d coordinate c
        lead = arr.ndim - dim
        return np.stack(
            [
                (np.roll(arr, -1, axis=lead + c) - np.roll(arr, 1, axis=lead + c))
                / (2.0 * steps[c])
                for c in range(dim)
            ]
        )

    dg = partial(g)
    term = (
        np.einsum("bdc...->dbc...", dg) + np.einsum("cdb...->dbc...", dg) - dg
    )
    gamma = 0.5 * np.einsum("ad...,dbc...->abc...", g_inv, term)
    dgamma = partial(gamma)
    ricci = (
        np.einsum("aabd...->bd...", dgamma)
        - np.einsum("daba...->bd...", dgamma)
        + np.einsum("aae...,ebd...->bd...", gamma, gamma)
        - np.einsum("ade...,eba...->bd...", gamma, gamma)
    )
    scalar = np.einsum("bd...,bd...->...", g_inv, ricci)
    return scalar[(slice(None),) + (0,) * p].copy()


def laplacian_matrix(phi, dx, weight=None):
    """Sparse periodic matrix of the weighted base Laplacian.

    Row i applies e^{-w_i} d_x(e^{w} phi^{-1} d_x .) / phi_i with the weight
    e^{w} taken as the geometric mean at half points. With ``weight`` None
    this is the conservative Delta_N of :func:`metric_laplacian`; with
    w = p u it is the warped Laplacian Delta_N + p <grad u, grad .>.

    Parameters
    ----------
    phi : array
        Metric density of the slice.
    dx : float
        Grid spacing.
    weight : array, optional
        Exponent w, by default None (w = 0).

    Returns
    -------
    scipy.sparse.csc_matrix
        Matrix with exactly zero row sums.
    """
    phi = np.asarray(phi, dtype=float)
    n = phi.size
    idx = np.arange(n)
    up, down = (idx + 1) % n, (idx - 1) % n
    phi_half = half_phi(phi)
    a_up = 1.0 / (dx**2 * phi * phi_half)
    a_down = 1.0 / (dx**2 * phi * phi_half[down])
    if weight is not None:
        weight = np.asarray(weight, dtype=float)
        a_up = a_up * np.exp(0.5 * (weight[up] - weight))
        a_down = a_down * np.exp(0.5 * (weight[down] - weight))
    rows = np.concatenate((idx, idx, idx))
    cols = np.concatenate((idx, up, down))
    data = np.concatenate((-(a_up + a_down), a_up, a_down))
    return sparse.csc_matrix((data, (rows, cols)), shape=(n, n))
