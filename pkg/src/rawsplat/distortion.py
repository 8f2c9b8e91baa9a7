"""Radial/tangential lens distortion, Newton inversion and resampling maps.

Coordinates passed to :func:`distort_point` / :func:`undistort_point` are
normalized: principal point subtracted, divided by the focal length. Pixel
centers sit at integer pixel coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConvergenceError, SingularityError, ValidationError

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 20


@dataclass(frozen=True)
class DistortionCoeffs:
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    k4: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    def is_zero(self) -> bool:
        return not any((self.k1, self.k2, self.k3, self.k4, self.p1, self.p2))

    def to_dict(self):
        return {n: getattr(self, n) for n in ("k1", "k2", "k3", "k4", "p1", "p2")}

    @classmethod
    def from_dict(cls, doc):
        return cls(**{n: float(doc.get(n, 0.0)) for n in ("k1", "k2", "k3", "k4", "p1", "p2")})


def distort_point(x, y, c: DistortionCoeffs):
    """Forward model; works elementwise on scalars or arrays."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    r2 = x * x + y * y
    radial = 1.0 + r2 * (c.k1 + r2 * (c.k2 + r2 * (c.k3 + r2 * c.k4)))
    xd = x * radial + 2.0 * c.p1 * x * y + c.p2 * (r2 + 2.0 * x * x)
    yd = y * radial + c.p1 * (r2 + 2.0 * y * y) + 2.0 * c.p2 * x * y
    return xd, yd


def distortion_jacobian(x, y, c: DistortionCoeffs):
    """Entries ``(dxd/dx, dxd/dy, dyd/dx, dyd/dy)`` of the forward map."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    r2 = x * x + y * y
    radial = 1.0 + r2 * (c.k1 + r2 * (c.k2 + r2 * (c.k3 + r2 * c.k4)))
    dradial = c.k1 + r2 * (2.0 * c.k2 + r2 * (3.0 * c.k3 + r2 * 4.0 * c.k4))
    j00 = radial + 2.0 * x * x * dradial + 2.0 * c.p1 * y + 6.0 * c.p2 * x
    j01 = 2.0 * x * y * dradial + 2.0 * c.p1 * x + 2.0 * c.p2 * y
    j10 = 2.0 * x * y * dradial + 2.0 * c.p1 * x + 2.0 * c.p2 * y
    j11 = radial + 2.0 * y * y * dradial + 6.0 * c.p1 * y + 2.0 * c.p2 * x
    return j00, j01, j10, j11


def undistort_point(
    xd, yd, c: DistortionCoeffs, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, return_iters=False
):
    """Invert the forward model by Newton-Raphson, starting at ``(xd, yd)``.

    Converged means ``max |distort(x, y) - (xd, yd)| < tol``. A solution on
    the far side of the model's fold (Jacobian determinant <= 0) is rejected
    with :class:`SingularityError` rather than returned.
    """
    if tol <= 0:
        raise ValidationError("tol must be positive")
    xd = np.asarray(xd, dtype=np.float64)
    yd = np.asarray(yd, dtype=np.float64)
    x, y = xd.copy(), yd.copy()
    iters = 0
    while True:
        fx, fy = distort_point(x, y, c)
        rx, ry = fx - xd, fy - yd
        resid = float(np.max(np.maximum(np.abs(rx), np.abs(ry)), initial=0.0))
        if not np.isfinite(resid):
            raise ConvergenceError("Newton iteration diverged", residual=resid)
        if resid < tol:
            break
        if iters >= max_iter:
            raise ConvergenceError(
                f"no convergence after {max_iter} iterations (residual {resid:.3e})",
                residual=resid,
            )
        j00, j01, j10, j11 = distortion_jacobian(x, y, c)
        det = j00 * j11 - j01 * j10
        if np.any(np.abs(det) < 1e-12):
            raise SingularityError("singular distortion Jacobian during Newton iteration")
        x = x - (j11 * rx - j01 * ry) / det
        y = y - (j00 * ry - j10 * rx) / det
        iters += 1
    # det > 0 alone is fooled by a point past the fold where the radial factor
    # is negative (both axes mirrored); the origin's branch has both positive
    j00, j01, j10, j11 = distortion_jacobian(x, y, c)
    r2 = x * x + y * y
    radial = 1.0 + r2 * (c.k1 + r2 * (c.k2 + r2 * (c.k3 + r2 * c.k4)))
    if np.any(j00 * j11 - j01 * j10 <= 0) or np.any(radial <= 0):
        raise SingularityError("solution lies beyond the fold of the distortion model")
    if x.ndim == 0:
        x, y = float(x), float(y)
    return (x, y, iters) if return_iters else (x, y)


@dataclass(frozen=True)
class DistortionMap:
    """Per-target-pixel source coordinates (pixel units) plus validity mask."""

    width: int
    height: int
    src_x: np.ndarray
    src_y: np.ndarray
    mask: np.ndarray
    _matrix: list = field(default_factory=list, repr=False, compare=False)

    @classmethod
    def identity(cls, width, height):
        v, u = np.mgrid[0:height, 0:width].astype(np.float64)
        return cls(width, height, u, v, np.ones((height, width), dtype=bool))

    @property
    def matrix(self) -> sp.csr_matrix:
        """Sparse bilinear resampling operator, built on first use."""
        if not self._matrix:
            self._matrix.append(_bilinear_matrix(self))
        return self._matrix[0]


def _bilinear_matrix(m: DistortionMap) -> sp.csr_matrix:
    w, h = m.width, m.height
    rows = np.flatnonzero(m.mask.ravel())
    sx = m.src_x.ravel()[rows]
    sy = m.src_y.ravel()[rows]
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    ax = sx - x0
    ay = sy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xs0 = np.clip(x0, 0, w - 1)
    xs1 = np.clip(x0 + 1, 0, w - 1)
    ys0 = np.clip(y0, 0, h - 1)
    ys1 = np.clip(y0 + 1, 0, h - 1)
    cols = np.concatenate([ys0 * w + xs0, ys0 * w + xs1, ys1 * w + xs0, ys1 * w + xs1])
    vals = np.concatenate(
        [(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay]
    )
    rr = np.tile(rows, 4)
    keep = vals != 0.0
    mat = sp.coo_matrix((vals[keep], (rr[keep], cols[keep])), shape=(h * w, h * w))
    return mat.tocsr()


def _pixel_grid(camera):
    v, u = np.mgrid[0 : camera.height, 0 : camera.width].astype(np.float64)
    return (u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy


def build_distortion_map(camera, direction: str = "forward") -> DistortionMap:
    """Precompute a resampling map for ``camera``.

    ``direction="forward"`` sends every target pixel through the forward
    model (source = distort(target)): applied to a frame in distorted
    geometry it yields the undistorted geometry. ``direction="inverse"``
    uses Newton inversion (source = undistort(target)): applied to an
    undistorted render it produces the distorted raw geometry, which is the
    ``D(.)`` used by the training losses.
    """
    c = camera.distortion
    xn, yn = _pixel_grid(camera)
    if direction == "forward":
        j00, j01, j10, j11 = distortion_jacobian(xn, yn, c)
        r2 = xn * xn + yn * yn
        radial = 1.0 + r2 * (c.k1 + r2 * (c.k2 + r2 * (c.k3 + r2 * c.k4)))
        if np.any(j00 * j11 - j01 * j10 <= 0) or np.any(radial <= 0):
            raise ValidationError("distortion model is not injective over the image")
        xs, ys = distort_point(xn, yn, c)
    elif direction == "inverse":
        try:
            xs, ys = undistort_point(xn, yn, c)
        except (ConvergenceError, SingularityError) as exc:
            raise ValidationError(f"distortion model not invertible over the image: {exc}") from exc
    else:
        raise ValidationError(f"unknown map direction {direction!r}")
    src_x = xs * camera.fx + camera.cx
    src_y = ys * camera.fy + camera.cy
    w, h = camera.width, camera.height
    mask = (src_x >= -0.5) & (src_x <= w - 0.5) & (src_y >= -0.5) & (src_y <= h - 0.5)
    return DistortionMap(w, h, src_x, src_y, mask)


def _check_dims(image, m):
    if image.shape[-2:] != (m.height, m.width):
        raise ValidationError(f"image shape {image.shape} does not match map {m.height}x{m.width}")


def apply_map(image, m: DistortionMap) -> np.ndarray:
    """Bilinear resampling; masked pixels are 0. Accepts ``(H, W)`` or ``(C, H, W)``."""
    image = np.asarray(image, dtype=np.float64)
    _check_dims(image, m)
    flat = image.reshape(-1, m.height * m.width)
    out = (m.matrix @ flat.T).T
    return out.reshape(image.shape)


def apply_map_backward(grad_out, m: DistortionMap) -> np.ndarray:
    """Adjoint of :func:`apply_map`: scatter gradients through the four taps."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    _check_dims(grad_out, m)
    flat = grad_out.reshape(-1, m.height * m.width)
    return (m.matrix.T @ flat.T).T.reshape(grad_out.shape)
