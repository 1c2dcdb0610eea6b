"""Volumes, displacement fields and the algebra that connects them.

Conventions used everywhere in this package:

* Grids are axis aligned.  Voxel ``(i, j, k)`` sits at world position
  ``origin + (i, j, k) * spacing`` in millimetres; arrays are indexed
  ``data[i, j, k]`` with the same axis order as world coordinates.
* Displacement fields are backward (pull-back) maps stored in millimetres.
  A field ``u`` realises ``phi(x) = x + u(x)``; warping a moving volume
  evaluates ``moving(x + u(x))`` at every voxel center ``x`` of the field's
  own grid.
* The valid sampling region of a grid is the convex hull of its voxel
  centers.  Outside of it scalar interpolation returns the volume's
  background value and field interpolation returns zero displacement
  (unless clamped edge extension is requested explicitly).

All operations are pure: inputs are never modified and arrays held by
volumes and fields are write-protected at construction.
"""

from __future__ import annotations

import functools
import warnings

import numpy as np

from .errors import GridMismatchError, NonConvergenceWarning, ValidationError

__all__ = [
    "GridDomain",
    "ScalarVolume",
    "DisplacementField",
    "sample_trilinear",
    "warp_volume",
    "warp_mask_nn",
    "compose_fields",
    "invert_field",
    "resample_field",
    "downsample",
    "downsample_mask",
    "jacobian_determinant",
]


def _triple(value, name, kind=float):
    try:
        out = tuple(kind(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{name} must be a 3-tuple, got {value!r}") from exc
    if len(out) != 3:
        raise ValidationError(f"{name} must have length 3, got {value!r}")
    return out


class GridDomain:
    """Shape, voxel size and world position shared by volumes and fields."""

    __slots__ = ("dims", "spacing", "origin")

    def __init__(self, dims, spacing, origin=(0.0, 0.0, 0.0)):
        dims = _triple(dims, "dims", int)
        spacing = _triple(spacing, "spacing")
        origin = _triple(origin, "origin")
        if any(d < 1 for d in dims):
            raise ValidationError(f"dims must be positive, got {dims}")
        if any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise ValidationError(f"spacing must be positive and finite, got {spacing}")
        if any(not np.isfinite(o) for o in origin):
            raise ValidationError(f"origin must be finite, got {origin}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    def __setattr__(self, name, value):
        raise AttributeError("GridDomain is immutable")

    def __eq__(self, other):
        if not isinstance(other, GridDomain):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.origin == other.origin
        )

    def __hash__(self):
        return hash((self.dims, self.spacing, self.origin))

    def __repr__(self):
        return f"GridDomain(dims={self.dims}, spacing={self.spacing}, origin={self.origin})"

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def compatible(self, other: "GridDomain", rtol: float = 1e-9) -> bool:
        """Same dims, spacing and origin up to a relative tolerance."""
        if self.dims != other.dims:
            return False
        for a, b in zip(self.spacing + self.origin, other.spacing + other.origin):
            if abs(a - b) > rtol * max(1.0, abs(a), abs(b)):
                return False
        return True

    def require_compatible(self, other: "GridDomain", what: str):
        if not self.compatible(other):
            raise GridMismatchError(f"{what}: grids differ ({self} vs {other})")

    def voxel_centers(self) -> np.ndarray:
        """World coordinates of all voxel centers, shape ``dims + (3,)``, read-only."""
        return _voxel_centers(self)

    def index_points(self) -> np.ndarray:
        """Integer voxel indices as floats, flattened to ``(n_voxels, 3)``, read-only."""
        return _index_points(self.dims)


@functools.lru_cache(maxsize=16)
def _index_points(dims):
    grids = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1)
    pts.setflags(write=False)
    return pts


@functools.lru_cache(maxsize=16)
def _voxel_centers(domain):
    pts = _index_points(domain.dims) * np.asarray(domain.spacing) + np.asarray(domain.origin)
    pts = pts.reshape(domain.dims + (3,))
    pts.setflags(write=False)
    return pts


class ScalarVolume:
    """A 3-D scalar image on a regular grid.

    ``background`` is the value reported for samples outside the grid
    (default -1000, air on a CT-like scale).
    """

    __slots__ = ("domain", "data", "background")

    def __init__(self, data, spacing, origin=(0.0, 0.0, 0.0), background=-1000.0):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim != 3:
            raise ValidationError(f"volume data must be 3-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("volume intensities must all be finite")
        bg = float(background)
        if not np.isfinite(bg):
            raise ValidationError("background must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "domain", GridDomain(arr.shape, spacing, origin))
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "background", bg)

    def __setattr__(self, name, value):
        raise AttributeError("ScalarVolume is immutable")

    @property
    def dims(self):
        return self.domain.dims

    @property
    def spacing(self):
        return self.domain.spacing

    @property
    def origin(self):
        return self.domain.origin

    def with_data(self, data, background=None) -> "ScalarVolume":
        bg = self.background if background is None else background
        return ScalarVolume(data, self.spacing, self.origin, bg)

    def is_binary(self) -> bool:
        return bool(np.all((self.data == 0.0) | (self.data == 1.0)))

    def __repr__(self):
        return f"ScalarVolume({self.domain}, background={self.background})"


class DisplacementField:
    """A backward displacement field in millimetres on a regular grid."""

    __slots__ = ("domain", "u")

    def __init__(self, u, spacing, origin=(0.0, 0.0, 0.0)):
        arr = np.array(u, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise ValidationError(
                f"field data must have shape (nx, ny, nz, 3), got {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValidationError("displacements must all be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "domain", GridDomain(arr.shape[:3], spacing, origin))
        object.__setattr__(self, "u", arr)

    def __setattr__(self, name, value):
        raise AttributeError("DisplacementField is immutable")

    @classmethod
    def zero(cls, domain: GridDomain) -> "DisplacementField":
        return cls(np.zeros(domain.dims + (3,)), domain.spacing, domain.origin)

    @property
    def dims(self):
        return self.domain.dims

    @property
    def spacing(self):
        return self.domain.spacing

    @property
    def origin(self):
        return self.domain.origin

    def with_u(self, u) -> "DisplacementField":
        return DisplacementField(u, self.spacing, self.origin)

    def max_magnitude(self) -> float:
        """Largest Euclidean displacement over the grid, in mm."""
        if self.domain.n_voxels == 0:
            return 0.0
        return float(np.sqrt((self.u ** 2).sum(axis=-1)).max())

    def __repr__(self):
        return f"DisplacementField({self.domain})"


# ---------------------------------------------------------------------------
# trilinear sampling core (index-space coordinates)
# ---------------------------------------------------------------------------
#
# Points are expressed in fractional voxel indices.  Scalar images are
# treated as covering their voxel cells: a point is inside the image iff
# -0.5 <= t_c <= n_c - 0.5 on every axis, and within the half-voxel skin
# beyond the outermost centers the interpolant continues with the edge
# value (zero slope).  Treating the centers themselves as the boundary
# would park every border sample of an untranslated image exactly on the
# overlap cliff, where the first optimizer step of a registration throws
# samples out of the overlap set and deadlocks the line search.
# Displacement fields keep the tighter center-hull convention; their
# samplers never feed the overlap bookkeeping.


def _corner_setup(data, t):
    dims = data.shape
    inside = np.ones(t.shape[0], dtype=bool)
    i0 = np.empty((t.shape[0], 3), dtype=np.intp)
    f = np.empty_like(t)
    for c in range(3):
        n = dims[c]
        tc = t[:, c]
        inside &= (tc >= -0.5) & (tc <= n - 0.5)
        tc = np.clip(tc, 0.0, n - 1.0)  # edge-value continuation in the skin
        base = np.clip(np.floor(tc), 0, max(n - 2, 0)).astype(np.intp)
        i0[:, c] = base
        f[:, c] = tc - base
    ny, nz = dims[1], dims[2]
    flat = data.reshape(-1)
    base_flat = (i0[:, 0] * ny + i0[:, 1]) * nz + i0[:, 2]
    sx = ny * nz
    degen = tuple(n == 1 for n in dims)  # single-voxel axes have no second corner
    ox = 0 if degen[0] else sx
    oy = 0 if degen[1] else nz
    oz = 0 if degen[2] else 1
    c000 = flat[base_flat]
    c001 = flat[base_flat + oz]
    c010 = flat[base_flat + oy]
    c011 = flat[base_flat + oy + oz]
    c100 = flat[base_flat + ox]
    c101 = flat[base_flat + ox + oz]
    c110 = flat[base_flat + ox + oy]
    c111 = flat[base_flat + ox + oy + oz]
    return (c000, c001, c010, c011, c100, c101, c110, c111), f, inside


def _trilinear_from_corners(corners, f):
    # two-sided lerp: exact at f = 0 and f = 1, so node samples reproduce
    # stored values bit for bit
    c000, c001, c010, c011, c100, c101, c110, c111 = corners
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    gz = 1.0 - fz
    v00 = c000 * gz + c001 * fz
    v01 = c010 * gz + c011 * fz
    v10 = c100 * gz + c101 * fz
    v11 = c110 * gz + c111 * fz
    gy = 1.0 - fy
    v0 = v00 * gy + v01 * fy
    v1 = v10 * gy + v11 * fy
    return v0 * (1.0 - fx) + v1 * fx


def _sample_values(data, t):
    """Trilinear values at fractional index points ``t`` (N, 3).

    Returns ``(values, inside)``; values at outside points are whatever the
    clipped corners produced and must be overwritten by the caller.
    """
    corners, f, inside = _corner_setup(data, t)
    return _trilinear_from_corners(corners, f), inside


def _sample_values_and_gradient(data, t, spacing):
    """Values plus the exact spatial gradient of the trilinear interpolant.

    The gradient is the derivative of the interpolation weights, converted
    to world units (per mm).  This is the quantity required to differentiate
    image energies with respect to displacements.
    """
    corners, f, inside = _corner_setup(data, t)
    c000, c001, c010, c011, c100, c101, c110, c111 = corners
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    value = _trilinear_from_corners(corners, f)

    d00 = c100 - c000
    d01 = c101 - c001
    d10 = c110 - c010
    d11 = c111 - c011
    gx = ((d00 + (d01 - d00) * fz) * (1.0 - fy) + (d10 + (d11 - d10) * fz) * fy) / spacing[0]

    e0 = (c010 - c000) + ((c011 - c001) - (c010 - c000)) * fz
    e1 = (c110 - c100) + ((c111 - c101) - (c110 - c100)) * fz
    gy = (e0 + (e1 - e0) * fx) / spacing[1]

    h0 = (c001 - c000) + ((c011 - c010) - (c001 - c000)) * fy
    h1 = (c101 - c100) + ((c111 - c110) - (c101 - c100)) * fy
    gz = (h0 + (h1 - h0) * fx) / spacing[2]

    grad = np.stack([gx, gy, gz], axis=-1)
    # the edge-value continuation is flat along any clamped axis, so the
    # interpolant's true derivative there is zero, not the edge cell slope
    for c in range(3):
        grad[:, c] = np.where(
            (t[:, c] < 0.0) | (t[:, c] > data.shape[c] - 1.0), 0.0, grad[:, c]
        )
    return value, grad, inside


def _world_to_index(domain, pts):
    return (pts - np.asarray(domain.origin)) / np.asarray(domain.spacing)


def _sample_field_index(u, t, mode):
    """Sample a field array (nx, ny, nz, 3) at fractional indices ``t``.

    ``mode='zero'``: zero displacement outside the grid.
    ``mode='clamp'``: nearest-edge extension (used for pyramid prolongation).
    """
    dims = u.shape[:3]
    if mode == "clamp":
        t = np.clip(t, 0.0, np.asarray(dims, dtype=np.float64) - 1.0)
    out = np.empty_like(t)
    inside = None
    for c in range(3):
        vals, ins = _sample_values(u[..., c], t)
        if mode == "zero":
            vals = np.where(ins, vals, 0.0)
        out[:, c] = vals
        inside = ins
    return out, inside


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def sample_trilinear(vol: ScalarVolume, p):
    """Interpolate ``vol`` at world point(s) ``p`` (mm).

    Accepts a single 3-vector or an (N, 3) array.  Points outside the hull
    of voxel centers evaluate to ``vol.background``.
    """
    pts = np.asarray(p, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValidationError(f"points must be (3,) or (N, 3), got shape {np.shape(p)}")
    if not np.all(np.isfinite(pts)):
        raise ValidationError("sample points must be finite")
    t = _world_to_index(vol.domain, pts)
    vals, inside = _sample_values(vol.data, t)
    vals = np.where(inside, vals, vol.background)
    return float(vals[0]) if single else vals


def warp_volume(moving: ScalarVolume, field: DisplacementField) -> ScalarVolume:
    """Pull-back warp: ``out(x) = moving(x + u(x))`` on the field's grid.

    Out-of-domain samples receive ``moving.background``.
    """
    t = _warp_index_coords(moving.domain, field)
    vals, inside = _sample_values(moving.data, t)
    vals = np.where(inside, vals, moving.background)
    return ScalarVolume(
        vals.reshape(field.dims), field.spacing, field.origin, moving.background
    )


def _warp_index_coords(moving_domain, field):
    """Fractional index coordinates into ``moving_domain`` for a pull-back warp.

    When the grids coincide the coordinates are formed directly in index
    space (exact integers for zero displacement); otherwise they go through
    world coordinates.
    """
    spacing = np.asarray(moving_domain.spacing)
    u_flat = field.u.reshape(-1, 3)
    if field.domain.compatible(moving_domain):
        return field.domain.index_points() + u_flat / spacing
    centers = field.domain.voxel_centers().reshape(-1, 3)
    return (centers + u_flat - np.asarray(moving_domain.origin)) / spacing


def warp_mask_nn(mask: ScalarVolume, field: DisplacementField) -> ScalarVolume:
    """Nearest-neighbor pull-back for binary masks; outside samples become 0."""
    if not mask.is_binary():
        raise ValidationError("warp_mask_nn expects a binary (0/1) mask")
    t = _warp_index_coords(mask.domain, field)
    dims = np.asarray(mask.dims, dtype=np.float64)
    inside = np.all((t >= 0.0) & (t <= dims - 1.0), axis=1)
    idx = np.rint(np.clip(t, 0.0, dims - 1.0)).astype(np.intp)
    vals = mask.data[idx[:, 0], idx[:, 1], idx[:, 2]]
    vals = np.where(inside, vals, 0.0)
    return ScalarVolume(vals.reshape(field.dims), field.spacing, field.origin, 0.0)


def compose_fields(outer: DisplacementField, inner: DisplacementField) -> DisplacementField:
    """Composition ``phi_outer o phi_inner`` as a field on the inner grid.

    ``u(x) = u_in(x) + u_out(x + u_in(x))`` with the outer displacement
    interpolated trilinearly and extended by zero outside its grid.
    """
    u_in = inner.u.reshape(-1, 3)
    if inner.domain.compatible(outer.domain):
        t = inner.domain.index_points() + u_in / np.asarray(outer.spacing)
    else:
        pts = inner.domain.voxel_centers().reshape(-1, 3) + u_in
        t = _world_to_index(outer.domain, pts)
    u_out, _ = _sample_field_index(outer.u, t, mode="zero")
    return DisplacementField(
        (u_in + u_out).reshape(inner.dims + (3,)), inner.spacing, inner.origin
    )


def invert_field(
    field: DisplacementField,
    tol: float = 0.01,
    max_iter: int = 50,
    out_domain: GridDomain | None = None,
) -> DisplacementField:
    """Fixed-point inverse of ``phi(x) = x + u(x)``.

    Iterates ``v_{k+1}(y) = -u(y + v_k(y))`` from ``v_0 = 0`` until the
    largest update falls below ``tol`` (mm) or ``max_iter`` is reached.
    Non-convergence is reported as a ``NonConvergenceWarning``, not an error.

    Samples that land outside the field's grid take the nearest edge value.
    Zero-filling there would make the iteration map discontinuous and lock
    border voxels of an expansive field into a two-cycle (sampled value
    flips between 0 and the edge displacement), so it would never converge.

    ``out_domain`` places the inverse on a different grid (typically the
    co-domain of ``phi``); by default the field's own grid is used.
    """
    if tol <= 0 or max_iter < 1:
        raise ValidationError("invert_field needs tol > 0 and max_iter >= 1")
    domain = field.domain if out_domain is None else out_domain
    same = domain.compatible(field.domain)
    spacing = np.asarray(field.spacing)
    if same:
        base = domain.index_points()
    else:
        base = _world_to_index(field.domain, domain.voxel_centers().reshape(-1, 3))
    v = np.zeros((domain.n_voxels, 3))
    delta = np.inf
    for _ in range(max_iter):
        sampled, _ = _sample_field_index(field.u, base + v / spacing, mode="clamp")
        v_new = -sampled
        delta = float(np.sqrt(((v_new - v) ** 2).sum(axis=1)).max())
        v = v_new
        if delta < tol:
            break
    if delta >= tol:
        warnings.warn(
            f"field inversion stopped after {max_iter} iterations "
            f"with max update {delta:.4g} mm (tol {tol:g} mm)",
            NonConvergenceWarning,
            stacklevel=2,
        )
    return DisplacementField(v.reshape(domain.dims + (3,)), domain.spacing, domain.origin)


def resample_field(
    field: DisplacementField, domain: GridDomain, mode: str = "clamp"
) -> DisplacementField:
    """Interpolate a field's displacement values onto another grid.

    Values stay in millimetres (no rescaling); ``mode`` picks the edge
    behaviour as in field sampling.
    """
    if mode not in ("clamp", "zero"):
        raise ValidationError(f"unknown resampling mode {mode!r}")
    t = _world_to_index(field.domain, domain.voxel_centers().reshape(-1, 3))
    u, _ = _sample_field_index(field.u, t, mode=mode)
    return DisplacementField(u.reshape(domain.dims + (3,)), domain.spacing, domain.origin)


def _block_reduce_mean(arr, factor):
    out = arr
    for axis in range(3):
        n = out.shape[axis]
        starts = np.arange(0, n, factor)
        summed = np.add.reduceat(out, starts, axis=axis)
        counts = np.minimum(factor, n - starts).astype(np.float64)
        shape = [1, 1, 1]
        shape[axis] = len(starts)
        out = summed / counts.reshape(shape)
    return out


def _check_downsample_factor(domain, factor):
    if int(factor) != factor or factor < 1:
        raise ValidationError(f"downsample factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    if any(factor > d for d in domain.dims):
        raise ValidationError(
            f"downsample factor {factor} exceeds grid dims {domain.dims}"
        )
    return factor


def _block_center_origin(domain, factor):
    # the mean of a block sits at the block's center, half a block past the
    # first fine voxel center; keeping the fine origin would shift every
    # coarse sample by (factor-1)/2 fine voxels in world space
    return tuple(o + 0.5 * (factor - 1) * s for o, s in zip(domain.origin, domain.spacing))


def downsample(vol: ScalarVolume, factor: int) -> ScalarVolume:
    """Block-average smoothing followed by subsampling.

    Each output voxel holds the mean of a ``factor``-cubed block (partial
    trailing blocks average over the voxels they actually cover).  Spacing is
    multiplied by ``factor``; the origin moves to the first block center so
    the averaged values keep their true world positions.
    """
    factor = _check_downsample_factor(vol.domain, factor)
    if factor == 1:
        return vol
    data = _block_reduce_mean(vol.data, factor)
    spacing = tuple(s * factor for s in vol.spacing)
    origin = _block_center_origin(vol.domain, factor)
    return ScalarVolume(data, spacing, origin, vol.background)


def downsample_mask(mask: ScalarVolume, factor: int) -> ScalarVolume:
    """Downsample a binary mask by block majority (mean >= 0.5)."""
    if not mask.is_binary():
        raise ValidationError("downsample_mask expects a binary (0/1) mask")
    factor = _check_downsample_factor(mask.domain, factor)
    if factor == 1:
        return mask
    frac = _block_reduce_mean(mask.data, factor)
    spacing = tuple(s * factor for s in mask.spacing)
    origin = _block_center_origin(mask.domain, factor)
    return ScalarVolume((frac >= 0.5).astype(np.float64), spacing, origin, 0.0)


def jacobian_determinant(field: DisplacementField) -> ScalarVolume:
    """Determinant of the deformation gradient ``I + grad(u)`` per voxel.

    Spatial derivatives use central differences in the interior and one-sided
    differences at the borders.  Values below zero indicate local folding.
    """
    # du[a][b] = d u_b / d x_a; singleton axes contribute no derivative
    du = [[None] * 3 for _ in range(3)]
    for b in range(3):
        comp = field.u[..., b]
        for a in range(3):
            if field.dims[a] >= 2:
                du[a][b] = np.gradient(comp, field.spacing[a], axis=a)
            else:
                du[a][b] = np.zeros_like(comp)
    j = [[du[a][b] + (1.0 if a == b else 0.0) for b in range(3)] for a in range(3)]
    det = (
        j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
        - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
        + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
    )
    return ScalarVolume(det, field.spacing, field.origin, background=1.0)
