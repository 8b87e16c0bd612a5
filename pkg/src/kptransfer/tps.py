"""Thin-plate splines in normalized image coordinates, plus bilinear resampling.

Points are ``(n, 2)`` arrays of ``(x, y)`` in ``[0, 1]^2`` with y growing
downward. Rasters are row-major ``(h, w)`` float arrays; pixel ``(col, row)``
has its center at normalized ``((col + 0.5) / w, (row + 0.5) / h)``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateControlPoints, EmptyImage, LengthMismatch

# Reciprocal condition number below which the TPS system counts as singular.
_RCOND = 1e-13


def kernel(r2):
    """U(r) = r^2 log(r^2), evaluated from squared distances, with U(0) = 0."""
    r2 = np.asarray(r2, dtype=float)
    out = np.zeros_like(r2)
    nz = r2 > 0
    out[nz] = r2[nz] * np.log(r2[nz])
    return out


def _kernel_matrix(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return kernel(np.einsum("ijk,ijk->ij", diff, diff))


def _affine_rows(pts):
    return np.hstack([pts, np.ones((len(pts), 1))])


def _as_points(pts):
    pts = np.asarray(pts, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"expected an (n, 2) point array, got shape {pts.shape}")
    return pts


@dataclass(frozen=True)
class TpsTransform:
    """Fitted TPS: ``f(x) = affine @ (x, y, 1) + sum_i weights[i] * U(|x - src_points[i]|)``."""

    src_points: np.ndarray  # (n, 2)
    affine: np.ndarray  # (2, 3), columns multiply (x, y, 1)
    weights: np.ndarray  # (n, 2)
    lam: float = 0.0

    def __call__(self, pts):
        return apply_tps(self, pts)

    @classmethod
    def identity(cls, src_points=None):
        if src_points is None:
            src_points = control_grid(2)
        src_points = _as_points(src_points)
        affine = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        return cls(src_points, affine, np.zeros_like(src_points), 0.0)


def control_grid(g, lo=0.0, hi=1.0):
    """Regular ``g x g`` grid of points spanning ``[lo, hi]^2``, row-major (y outer)."""
    ticks = np.linspace(lo, hi, g)
    xx, yy = np.meshgrid(ticks, ticks)
    return np.column_stack([xx.ravel(), yy.ravel()])


def sample_grid(g):
    """``g x g`` grid of cell centers in ``[0, 1]^2``, row-major (y outer)."""
    ticks = (np.arange(g) + 0.5) / g
    xx, yy = np.meshgrid(ticks, ticks)
    return np.column_stack([xx.ravel(), yy.ravel()])


def pixel_centers(w, h):
    """Normalized centers of every pixel of a ``(h, w)`` raster, row-major."""
    xx, yy = np.meshgrid((np.arange(w) + 0.5) / w, (np.arange(h) + 0.5) / h)
    return np.column_stack([xx.ravel(), yy.ravel()])


def _system_inverse(src, lam):
    """Inverse of the bordered TPS matrix ``[[K + lam I, P], [P^T, 0]]``."""
    n = len(src)
    if n < 3:
        raise DegenerateControlPoints(f"need at least 3 control points, got {n}")
    L = np.zeros((n + 3, n + 3))
    L[:n, :n] = _kernel_matrix(src, src) + lam * np.eye(n)
    P = _affine_rows(src)
    L[:n, n:] = P
    L[n:, :n] = P.T
    sv = np.linalg.svd(L, compute_uv=False)
    if sv[-1] <= _RCOND * sv[0]:
        raise DegenerateControlPoints(
            f"TPS system is singular (rcond={sv[-1] / sv[0]:.3g}); "
            "control points are colinear or duplicated"
        )
    # LAPACK gesv: LU with partial pivoting.
    return np.linalg.solve(L, np.eye(n + 3))


def fit_tps(src, dst, lam=0.0):
    """Fit the TPS mapping ``src[i] -> dst[i]``.

    With ``lam == 0`` the transform interpolates the correspondences exactly;
    ``lam > 0`` trades residual for lower bending energy.
    """
    src = _as_points(src)
    dst = _as_points(dst)
    if len(src) != len(dst):
        raise LengthMismatch(f"src has {len(src)} points, dst has {len(dst)}")
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    n = len(src)
    Linv = _system_inverse(src, lam)
    rhs = np.vstack([dst, np.zeros((3, 2))])
    sol = Linv @ rhs
    return TpsTransform(src.copy(), sol[n:].T.copy(), sol[:n].copy(), float(lam))


def apply_tps(t, pts):
    pts = _as_points(pts)
    U = _kernel_matrix(pts, t.src_points)
    return _affine_rows(pts) @ t.affine.T + U @ t.weights


def tps_jacobian(t, pts):
    """Per-point 2x2 Jacobian ``J[m, i, j] = d f_i / d x_j``."""
    pts = _as_points(pts)
    diff = pts[:, None, :] - t.src_points[None, :, :]
    r2 = np.einsum("ijk,ijk->ij", diff, diff)
    # dU/dx = 2 (x - c) (log r^2 + 1), which tends to 0 as r -> 0.
    g = np.zeros_like(r2)
    nz = r2 > 0
    g[nz] = 2.0 * (np.log(r2[nz]) + 1.0)
    dU = g[:, :, None] * diff  # (m, n, 2)
    J = np.einsum("mnj,ni->mij", dU, t.weights)
    return J + t.affine[None, :, :2]


def tps_flow_basis(src_grid, sample_points, lam=0.0):
    """Matrix ``B`` with ``flow(sample_points) = B @ (targets - src_grid)``.

    Flow here is ``f(s) - s`` for the TPS fitted from ``src_grid`` to
    ``targets``; ``B`` has shape ``(len(sample_points), len(src_grid))`` and is
    applied to each coordinate column independently.
    """
    src_grid = _as_points(src_grid)
    sample_points = _as_points(sample_points)
    n = len(src_grid)
    Linv = _system_inverse(src_grid, lam)
    phi = np.hstack([_kernel_matrix(sample_points, src_grid), _affine_rows(sample_points)])
    return phi @ Linv[:, :n]


def tps_system(src_grid, lam=0.0):
    """Columns of the inverse TPS system that act on target positions, ``(n + 3, n)``."""
    src_grid = _as_points(src_grid)
    return _system_inverse(src_grid, lam)[:, : len(src_grid)]


def basis_with_grad(src_grid, system, points):
    """Flow basis rows at ``points`` and their x/y derivatives, each ``(m, n)``.

    ``system`` comes from :func:`tps_system`.
    """
    diff = points[:, None, :] - src_grid[None, :, :]
    r2 = np.einsum("ijk,ijk->ij", diff, diff)
    g = np.zeros_like(r2)
    nz = r2 > 0
    g[nz] = 2.0 * (np.log(r2[nz]) + 1.0)
    m = len(points)
    phi = np.hstack([kernel(r2), _affine_rows(points)])
    dphi_x = np.hstack([g * diff[:, :, 0], np.tile([1.0, 0.0, 0.0], (m, 1))])
    dphi_y = np.hstack([g * diff[:, :, 1], np.tile([0.0, 1.0, 0.0], (m, 1))])
    return phi @ system, dphi_x @ system, dphi_y @ system


def tps_flow_basis_grad(src_grid, points, lam=0.0):
    """``B`` at ``points`` together with ``dB/dx`` and ``dB/dy``."""
    src_grid = _as_points(src_grid)
    return basis_with_grad(src_grid, tps_system(src_grid, lam), _as_points(points))


def invert_tps(t, probe_grid=None):
    """Approximate inverse by refitting on swapped probe correspondences.

    Fits ``t(p) -> p`` for every probe point ``p`` (exact at the probes).
    """
    if probe_grid is None:
        probe_grid = control_grid(17)
    probe_grid = _as_points(probe_grid)
    return fit_tps(apply_tps(t, probe_grid), probe_grid, lam=0.0)


def bilinear_sample(img, x, y, with_grad=False):
    """Bilinearly sample ``img`` at array coordinates with zero padding.

    ``x`` is the column coordinate and ``y`` the row coordinate; integer values
    hit pixel centers. ``img`` is ``(h, w)`` with any-shaped ``x, y``, or
    ``(N, h, w)`` with ``x, y`` of shape ``(N, P)``. With ``with_grad`` also
    returns ``d value / dx`` and ``d value / dy``, the one-sided derivative
    from the cell containing the point.
    """
    img = np.asarray(img, dtype=float)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    h, w = img.shape[-2:]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    if img.ndim == 2:
        flat = img.ravel()

        def gather(xi, yi):
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            idx = np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)
            return np.where(ok, flat[idx], 0.0)

    else:
        flat = img.reshape(img.shape[0], h * w)

        def gather(xi, yi):
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            idx = np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)
            return np.where(ok, np.take_along_axis(flat, idx, axis=1), 0.0)

    v00 = gather(x0, y0)
    v10 = gather(x0 + 1, y0)
    v01 = gather(x0, y0 + 1)
    v11 = gather(x0 + 1, y0 + 1)
    top = v00 + fx * (v10 - v00)
    bottom = v01 + fx * (v11 - v01)
    val = top + fy * (bottom - top)
    if not with_grad:
        return val
    gx = (1 - fy) * (v10 - v00) + fy * (v11 - v01)
    gy = bottom - top
    return val, gx, gy


def bilinear_sample_with_grad(img, p):
    """Sample at a single point ``p = (x, y)``; returns ``(value, (d/dx, d/dy))``."""
    v, gx, gy = bilinear_sample(img, p[0], p[1], with_grad=True)
    return float(v), np.array([float(gx), float(gy)])


def warp_image(img, t_inverse, out_size=None):
    """Backward-warp ``img``: output pixel ``q`` takes ``img`` at ``t_inverse(q)``."""
    img = np.asarray(img, dtype=float)
    if img.ndim != 2 or img.size == 0:
        raise EmptyImage("warp_image needs a nonempty 2-D raster")
    h, w = img.shape
    ow, oh = out_size if out_size is not None else (w, h)
    q = pixel_centers(ow, oh)
    # Offsets keep the identity map exact: index + 0 lands on the pixel itself.
    off = apply_tps(t_inverse, q) - q
    cols, rows = np.meshgrid(np.arange(ow) + 0.5, np.arange(oh) + 0.5)
    x = cols.ravel() * (w / ow) - 0.5 + off[:, 0] * w
    y = rows.ravel() * (h / oh) - 0.5 + off[:, 1] * h
    return bilinear_sample(img, x, y).reshape(oh, ow)
