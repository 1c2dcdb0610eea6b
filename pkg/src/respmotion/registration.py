"""Variational registration of volume pairs.

Registration minimises ``distance(fixed, moving o phi) + alpha * regularizer(u)``
over backward displacement fields ``u`` on the fixed grid, by first-order
gradient descent with backtracking inside a coarse-to-fine pyramid.

Distances: plain SSD, and a normalised SSD (NSSD) computed on per-image
standardised intensities over the overlap region, which makes it invariant
to affine intensity rescaling of either image.

Regularizers: diffusive (squared forward-difference gradients of each
displacement component), and a sliding-aware variant that decouples the
tangential displacement components across a binary mask interface while
keeping the boundary-normal component coupled.

The forces returned by the building blocks are exact gradients of the
discrete energies, so descent directions and finite differences of the
energy agree to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .errors import NumericalError, ValidationError
from .grid import (
    DisplacementField,
    ScalarVolume,
    _sample_values,
    _sample_values_and_gradient,
    _world_to_index,
    downsample,
    downsample_mask,
    resample_field,
)

__all__ = [
    "RegistrationParams",
    "RegistrationReport",
    "distance_ssd",
    "distance_nssd",
    "reg_diffusive",
    "reg_sliding",
    "objective_energy",
    "objective_force",
    "register",
    "register_phases",
]

DISTANCES = ("ssd", "nssd")
REGULARIZERS = ("diffusive", "sliding")


@dataclass
class RegistrationParams:
    """Optimisation settings for :func:`register`.

    ``step0`` is the size in mm of the first displacement update at each
    pyramid level (the raw gradient is rescaled accordingly); backtracking
    multiplies the step by ``step_shrink`` whenever a trial raises the
    energy.  ``grad_tol`` stops a level once the maximum force magnitude has
    dropped below ``grad_tol`` times its initial value at that level, which
    keeps the criterion meaningful across the very different force scales of
    SSD and NSSD.
    """

    distance: str = "ssd"
    regularizer: str = "diffusive"
    alpha: float = 1.0
    levels: int = 3
    iters_per_level: int = 100
    step0: float = 1.0
    step_shrink: float = 0.5
    grad_tol: float = 1e-4
    sliding_mask: ScalarVolume | None = None

    def validated(self) -> "RegistrationParams":
        self.distance = str(self.distance).lower()
        self.regularizer = str(self.regularizer).lower()
        if self.distance not in DISTANCES:
            raise ValidationError(f"unknown distance {self.distance!r}, expected {DISTANCES}")
        if self.regularizer not in REGULARIZERS:
            raise ValidationError(
                f"unknown regularizer {self.regularizer!r}, expected {REGULARIZERS}"
            )
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ValidationError(f"alpha must be >= 0, got {self.alpha}")
        if self.levels < 1:
            raise ValidationError(f"levels must be >= 1, got {self.levels}")
        if self.iters_per_level < 0:
            raise ValidationError(f"iters_per_level must be >= 0, got {self.iters_per_level}")
        if not np.isfinite(self.step0) or self.step0 <= 0:
            raise ValidationError(f"step0 must be > 0, got {self.step0}")
        if not 0.0 < self.step_shrink < 1.0:
            raise ValidationError(f"step_shrink must be in (0, 1), got {self.step_shrink}")
        if not np.isfinite(self.grad_tol) or self.grad_tol < 0:
            raise ValidationError(f"grad_tol must be >= 0, got {self.grad_tol}")
        if self.regularizer == "sliding":
            if self.sliding_mask is None:
                raise ValidationError("sliding regularizer requires sliding_mask")
            if not self.sliding_mask.is_binary():
                raise ValidationError("sliding_mask must be binary (0/1)")
        return self


@dataclass
class RegistrationReport:
    """Energy bookkeeping of a registration run.

    ``energy_trace`` holds one ``(level, iteration, distance, regularizer,
    total)`` entry per accepted iterate, iteration 0 being the level's
    starting point.  The trace is non-increasing in ``total`` within each
    level.
    """

    converged: bool = False
    final_step: float = 0.0
    energy_trace: list = dataclass_field(default_factory=list)


# ---------------------------------------------------------------------------
# distances on already-warped volume pairs
# ---------------------------------------------------------------------------


def _overlap_array(fixed, warped, overlap):
    fixed.domain.require_compatible(warped.domain, "distance")
    if overlap is None:
        ov = np.ones(fixed.dims, dtype=bool)
    else:
        ov = np.asarray(overlap, dtype=bool)
        if ov.shape != fixed.dims:
            raise ValidationError(
                f"overlap shape {ov.shape} does not match volume dims {fixed.dims}"
            )
    n = int(ov.sum())
    if n == 0:
        raise NumericalError("empty overlap region")
    return ov, n


def _central_gradient(vol: ScalarVolume) -> np.ndarray:
    grads = [
        np.gradient(vol.data, vol.spacing[a], axis=a) if vol.dims[a] >= 2
        else np.zeros(vol.dims)
        for a in range(3)
    ]
    return np.stack(grads, axis=-1)


def distance_ssd(fixed: ScalarVolume, warped: ScalarVolume, overlap=None):
    """Mean squared intensity difference over the overlap region.

    Returns ``(energy, force)`` where the force is the image-gradient form
    ``2 (warped - fixed) * grad(warped) / n`` with central differences, a
    vector per voxel (zero outside the overlap).
    """
    ov, n = _overlap_array(fixed, warped, overlap)
    r = np.where(ov, warped.data - fixed.data, 0.0)
    energy = float((r ** 2).sum() / n)
    force = (2.0 / n) * r[..., None] * _central_gradient(warped)
    return energy, force


def _standardize(values, what):
    mu = values.mean()
    sd = values.std()
    if sd == 0.0 or not np.isfinite(sd):
        raise NumericalError(f"{what} has zero intensity variance over the overlap")
    return (values - mu) / sd, sd


def distance_nssd(fixed: ScalarVolume, warped: ScalarVolume, overlap=None):
    """SSD on per-image standardised intensities (zero mean, unit variance
    over the overlap), invariant to affine intensity remapping of either
    image.  Returns ``(energy, force)`` like :func:`distance_ssd`; the force
    accounts for the dependence of the warped image's standardisation on its
    intensities, with the fixed image's rescaling a constant.
    """
    ov, n = _overlap_array(fixed, warped, overlap)
    fhat, _ = _standardize(fixed.data[ov], "fixed image")
    what, sd_w = _standardize(warped.data[ov], "warped image")
    diff = what - fhat
    energy = float((diff ** 2).sum() / n)
    rho = float((fhat * what).sum() / n)
    dedw = np.zeros(fixed.dims)
    dedw[ov] = (2.0 / (n * sd_w)) * (rho * what - fhat)
    force = dedw[..., None] * _central_gradient(warped)
    return energy, force


# ---------------------------------------------------------------------------
# regularizers
# ---------------------------------------------------------------------------


def _smoothness_energy_force(u, spacing, mask_data):
    """Shared kernel: sum of squared forward differences of u, optionally
    decoupled across mask transitions (only the boundary-normal component
    keeps its difference there).  Returns the exact gradient as force."""
    n_vox = u.shape[0] * u.shape[1] * u.shape[2]
    energy = 0.0
    force = np.zeros_like(u)
    sl_all = [slice(None)] * 4
    for axis in range(3):
        if u.shape[axis] < 2:
            continue
        h = spacing[axis]
        d = np.diff(u, axis=axis) / h
        if mask_data is not None:
            straddle = np.diff(mask_data, axis=axis) != 0.0
            w = np.ones(d.shape)
            w[straddle] = 0.0
            w[..., axis][straddle] = 1.0  # normal component stays coupled
            wd = w * d
        else:
            wd = d
        energy += float((wd * d).sum())
        g = 2.0 * wd / h
        head = sl_all.copy()
        head[axis] = slice(0, -1)
        tail = sl_all.copy()
        tail[axis] = slice(1, None)
        force[tuple(head)] -= g
        force[tuple(tail)] += g
    return energy / n_vox, force / n_vox


def reg_diffusive(field: DisplacementField):
    """Diffusive smoothness: mean over voxels of the summed squared forward
    differences of every displacement component.  Returns ``(energy, force)``
    with the force equal to the exact energy gradient (a scaled negative
    Neumann Laplacian of ``u``)."""
    return _smoothness_energy_force(field.u, field.spacing, None)


def reg_sliding(field: DisplacementField, mask: ScalarVolume):
    """Sliding-aware smoothness.  Differences that straddle a transition of
    the binary mask only penalise the component normal to the interface
    (the straddling axis), so tangential sliding is free.  With a uniform
    mask this is identical to :func:`reg_diffusive`."""
    if not mask.is_binary():
        raise ValidationError("sliding mask must be binary (0/1)")
    field.domain.require_compatible(mask.domain, "reg_sliding")
    return _smoothness_energy_force(field.u, field.spacing, mask.data)


# ---------------------------------------------------------------------------
# registration objective (distance evaluated through the warp)
# ---------------------------------------------------------------------------


class _Objective:
    """Energy and exact force of u -> D(fixed, moving o (id + u)) + alpha R(u).

    The distance force uses the spatial gradient of the moving image's
    interpolant at the pulled-back sample positions (the true derivative of
    the discrete energy with respect to each displacement vector).
    """

    def __init__(self, fixed, moving, params, sliding_mask):
        self.fixed_flat = fixed.data.ravel()
        self.dims = fixed.dims
        self.moving = moving
        self.params = params
        self.mask_data = sliding_mask.data if sliding_mask is not None else None
        self.spacing_fix = fixed.spacing
        self.mv_spacing = np.asarray(moving.spacing)
        if fixed.domain.compatible(moving.domain):
            self.base = fixed.domain.index_points()
        else:
            centers = fixed.domain.voxel_centers().reshape(-1, 3)
            self.base = _world_to_index(moving.domain, centers)

    def _distance(self, u_flat, with_force):
        t = self.base + u_flat / self.mv_spacing
        if with_force:
            vals, grads, inside = _sample_values_and_gradient(
                self.moving.data, t, self.mv_spacing
            )
        else:
            vals, inside = _sample_values(self.moving.data, t)
            grads = None
        n_ov = int(inside.sum())
        if n_ov == 0:
            raise NumericalError("no overlap between fixed grid and warped moving image")
        if self.params.distance == "ssd":
            r = np.where(inside, vals - self.fixed_flat, 0.0)
            e_d = float(r @ r) / n_ov
            dedw = (2.0 / n_ov) * r if with_force else None
        else:
            fhat, _ = _standardize(self.fixed_flat[inside], "fixed image")
            what, sd_w = _standardize(vals[inside], "warped image")
            diff = what - fhat
            e_d = float(diff @ diff) / n_ov
            if with_force:
                rho = float(fhat @ what) / n_ov
                dedw = np.zeros(vals.shape)
                dedw[inside] = (2.0 / (n_ov * sd_w)) * (rho * what - fhat)
            else:
                dedw = None
        if not np.isfinite(e_d):
            raise NumericalError("distance energy is not finite")
        if with_force:
            return e_d, dedw[:, None] * grads
        return e_d, None

    def _regularizer(self, u_flat):
        u = u_flat.reshape(self.dims + (3,))
        return _smoothness_energy_force(u, self.spacing_fix, self.mask_data)

    def energy(self, u_flat):
        e_d, _ = self._distance(u_flat, with_force=False)
        e_r, _ = self._regularizer(u_flat)
        return e_d + self.params.alpha * e_r, e_d, e_r

    def energy_force(self, u_flat):
        e_d, f_d = self._distance(u_flat, with_force=True)
        e_r, f_r = self._regularizer(u_flat)
        force = f_d + self.params.alpha * f_r.reshape(-1, 3)
        return e_d + self.params.alpha * e_r, e_d, e_r, force


def objective_energy(fixed, moving, field, params):
    """Total registration energy of a field, with its distance and
    regularizer parts: ``(total, distance, regularizer)``."""
    params = params.validated()
    fixed.domain.require_compatible(field.domain, "objective field")
    obj = _Objective(fixed, moving, params, params.sliding_mask)
    return obj.energy(field.u.reshape(-1, 3))


def objective_force(fixed, moving, field, params):
    """Like :func:`objective_energy` but also returns the exact energy
    gradient with respect to the displacement vectors, shaped like ``u``."""
    params = params.validated()
    fixed.domain.require_compatible(field.domain, "objective field")
    obj = _Objective(fixed, moving, params, params.sliding_mask)
    total, e_d, e_r, force = obj.energy_force(field.u.reshape(-1, 3))
    return (total, e_d, e_r), force.reshape(field.dims + (3,))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def _force_max(force):
    return float(np.sqrt((force ** 2).sum(axis=1)).max())


def _descend(fixed, moving, u_flat, params, sliding_mask, level, trace, budget=None):
    obj = _Objective(fixed, moving, params, sliding_mask)
    total, e_d, e_r, force = obj.energy_force(u_flat)
    trace.append((level, 0, e_d, e_r, total))
    gmax0 = _force_max(force)
    if gmax0 == 0.0:
        return u_flat, True, 0.0
    if budget is None:
        budget = params.iters_per_level
    step = params.step0 / gmax0
    step_floor = step * 1e-12
    step_cap = step * 1e6
    converged = False
    for it in range(1, budget + 1):
        if _force_max(force) <= params.grad_tol * gmax0:
            converged = True
            break
        accepted = False
        while step >= step_floor:
            u_try = u_flat - step * force
            total_try, _, _ = obj.energy(u_try)
            if total_try <= total:
                accepted = True
                break
            step *= params.step_shrink
        if not accepted:
            break  # line search exhausted: cannot decrease further
        u_flat = u_try
        total, e_d, e_r, force = obj.energy_force(u_flat)
        trace.append((level, it, e_d, e_r, total))
        step = min(step * 2.0, step_cap)
    else:
        # budget exhausted; check the final iterate against the criterion
        converged = _force_max(force) <= params.grad_tol * gmax0
    return u_flat, converged, step


def register(fixed: ScalarVolume, moving: ScalarVolume, params: RegistrationParams,
             init: DisplacementField | None = None):
    """Estimate the backward field aligning ``moving`` to ``fixed``.

    Runs gradient descent with backtracking on a ``params.levels``-deep
    pyramid (downsampling factors 2^(levels-1) ... 1); displacements are
    upsampled between levels by trilinear interpolation of their mm values.
    Iterations follow a coarse-weighted schedule: the finest level gets
    ``iters_per_level`` and each coarser level four times the next finer
    one.  Coarse sweeps cost a small fraction of a fine sweep and carry the
    low-frequency part of the field, which plain per-voxel descent recovers
    far too slowly on the fine grid.  Returns ``(DisplacementField,
    RegistrationReport)``; the field lives on the fixed grid.  ``init``
    (optional) initialises the finest-grid field and is resampled onto the
    coarsest level.
    """
    params = params.validated()
    if init is not None:
        fixed.domain.require_compatible(init.domain, "registration init field")
    mask = params.sliding_mask
    if params.regularizer == "sliding":
        fixed.domain.require_compatible(mask.domain, "sliding mask")
    else:
        mask = None

    trace = []
    current = init
    converged = False
    final_step = 0.0
    for level in range(params.levels):
        factor = 2 ** (params.levels - 1 - level)
        fx = downsample(fixed, factor)
        mv = downsample(moving, factor)
        msk = downsample_mask(mask, factor) if mask is not None else None
        if current is None:
            u_flat = np.zeros((fx.domain.n_voxels, 3))
        else:
            u_flat = resample_field(current, fx.domain, mode="clamp").u.reshape(-1, 3)
        budget = params.iters_per_level * 4 ** (params.levels - 1 - level)
        u_flat, converged, final_step = _descend(
            fx, mv, u_flat, params, msk, level, trace, budget
        )
        current = DisplacementField(
            u_flat.reshape(fx.dims + (3,)), fx.spacing, fx.origin
        )
    return current, RegistrationReport(converged, final_step, trace)


def register_phases(phases, j_ref: int, params: RegistrationParams):
    """Register every phase of a 4D series against its reference phase.

    ``fixed`` is phase ``j``, ``moving`` the reference phase, so each
    returned field pulls reference-frame content into phase ``j``'s frame.
    The entry at ``j_ref`` is the identity field.
    """
    phases = list(phases)
    if len(phases) < 2:
        raise ValidationError("register_phases needs at least two phases")
    if not 0 <= j_ref < len(phases):
        raise ValidationError(f"j_ref {j_ref} out of range for {len(phases)} phases")
    ref_domain = phases[0].domain
    for j, ph in enumerate(phases):
        if not ph.domain.compatible(ref_domain):
            raise ValidationError(f"phase {j} is not on the shared 4D grid")
    fields = []
    for j, ph in enumerate(phases):
        if j == j_ref:
            fields.append(DisplacementField.zero(ref_domain))
            continue
        try:
            f, _ = register(ph, phases[j_ref], params)
        except (ValidationError, NumericalError) as exc:
            raise type(exc)(f"phase {j}: {exc}") from exc
        fields.append(f)
    return fields
