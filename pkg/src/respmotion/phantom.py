"""Analytic breathing phantom with known ground-truth motion.

The phantom is a smooth CT-like torso (body, two lungs, liver, optional rib
arcs) whose breathing deformation lives exactly in the linear surrogate
family: every phase field is ``a1 * v + a2 * v'`` with analytic coefficient
fields and a3 identically zero.  Phase images are evaluated analytically at
warped voxel centers, not produced by warping a gridded volume, so
``warp_volume(reference, gt_fields[j])`` only differs from ``phases[j]`` by
trilinear interpolation error; intensity transitions are kept a few voxels
wide to make that error small.

Intensities (HU-like): air -1000, body 40, lungs -800, liver 80, ribs 400.
Axes: x left-right, y anterior (low) to couch (high), z feet to head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .grid import DisplacementField, GridDomain, ScalarVolume
from .surrogate import (
    MotionModel,
    SurrogateSignal,
    derive_signal,
    simulate_signal,
)

__all__ = ["Ellipsoid", "PhantomSpec", "PhantomTruth", "generate_phantom", "make_target_variant"]

# spirometry amplitude/period driving the phantom cycle
_SIGNAL_AMPLITUDE = 480.0  # ml
_PERIOD = 4.0  # s

# intensity transition widths (mm); wide enough that trilinear resampling of
# the analytic images stays above 40 dB PSNR at 4 mm voxels
_SKIN_EDGE = 14.0
_LUNG_EDGE = 12.0
_LIVER_EDGE = 10.0
_RIB_PERIOD = 30.0  # mm, arc spacing along z

_AIR, _BODY, _LUNG, _LIVER, _RIB = -1000.0, 40.0, -800.0, 80.0, 400.0

# directions of the principal and hysteresis motion components (unit-ish,
# dominated by z = cranio-caudal, with small anterior-posterior parts)
_DIR_MAIN = np.array([0.0, 0.18, 1.0])
_DIR_HYST = np.array([0.0, -0.6, 0.8])


@dataclass(frozen=True)
class Ellipsoid:
    """Axis-aligned ellipsoid, center and semiaxes as fractions of the extent."""

    center: tuple = (0.5, 0.5, 0.5)
    semiaxes: tuple = (0.25, 0.25, 0.25)


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (64, 64, 64)
    spacing: tuple = (4.0, 4.0, 4.0)
    body: Ellipsoid = field(default_factory=lambda: Ellipsoid((0.5, 0.5, 0.5), (0.40, 0.36, 0.44)))
    lungs: tuple = (
        Ellipsoid((0.33, 0.46, 0.66), (0.13, 0.16, 0.20)),
        Ellipsoid((0.67, 0.46, 0.66), (0.13, 0.16, 0.20)),
    )
    liver: Ellipsoid = field(default_factory=lambda: Ellipsoid((0.34, 0.50, 0.40), (0.155, 0.14, 0.12)))
    ribs: bool = True
    amplitude_z: float = 25.0
    hysteresis_phase: float = 0.35
    n_phases: int = 14
    seed: int = 0


@dataclass(frozen=True)
class PhantomTruth:
    """Everything the generator knows: images, true fields, masks, model."""

    phases: list
    gt_fields: list
    masks: dict
    signal: SurrogateSignal
    j_ref: int
    phase_sample_map: list
    model: MotionModel
    spec: PhantomSpec

    @property
    def reference(self) -> ScalarVolume:
        return self.phases[self.j_ref]


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


class _Geometry:
    """Ellipsoid parameters resolved to world mm for one phantom spec."""

    def __init__(self, spec: PhantomSpec, domain: GridDomain):
        extent = (np.array(domain.dims) - 1) * np.array(domain.spacing)
        origin = np.array(domain.origin)
        self.extent = extent
        self.origin = origin
        self.center = origin + extent / 2.0

        def resolve(ell):
            return origin + np.array(ell.center) * extent, np.array(ell.semiaxes) * extent

        self.body_c, self.body_s = resolve(spec.body)
        self.lung_c = []
        self.lung_s = []
        for ell in spec.lungs:
            c, s = resolve(ell)
            self.lung_c.append(c)
            self.lung_s.append(s)
        self.liver_c, self.liver_s = resolve(spec.liver)
        self.ribs = spec.ribs
        # diaphragm dome: top of the liver, where motion peaks
        self.z_dome = self.liver_c[2] + self.liver_s[2]
        self.z_apex = max(c[2] + s[2] for c, s in zip(self.lung_c, self.lung_s))
        self.couch_y = self.body_c[1] + self.body_s[1]

    def check_containment(self):
        lo = self.origin
        hi = self.origin + self.extent
        for name, c, s in [("body", self.body_c, self.body_s)]:
            if np.any(c - s < lo) or np.any(c + s > hi):
                raise ValidationError(f"phantom {name} exceeds the field of view")
        inner = [("liver", self.liver_c, self.liver_s)]
        inner += [(f"lung {i}", c, s) for i, (c, s) in enumerate(zip(self.lung_c, self.lung_s))]
        for name, c, s in inner:
            for axis in range(3):
                for sign in (-1.0, 1.0):
                    p = c.copy()
                    p[axis] += sign * s[axis]
                    if _q(p[None, :], self.body_c, self.body_s)[0] > 1.0:
                        raise ValidationError(f"phantom {name} extends outside the body")


def _q(pts, center, semi):
    return (((pts - center) / semi) ** 2).sum(axis=1)


def _indicator(q, semi, width_mm):
    # approximate signed distance from the level set q = 1, then smoothstep
    d = (1.0 - q) * (min(semi) / 2.0)
    return _smoothstep(d / width_mm + 0.5)


def _rib_indicator(geom: _Geometry, pts):
    qb = _q(pts, geom.body_c, geom.body_s)
    shell = _smoothstep((qb - 0.70) / 0.12) * (1.0 - _smoothstep((qb - 0.90) / 0.12))
    ring = _smoothstep((np.sin(2.0 * np.pi * pts[:, 2] / _RIB_PERIOD) + 0.05) / 0.85)
    z = pts[:, 2]
    zwin = _smoothstep((z - (geom.z_dome - 12.0)) / 22.0)
    zwin *= 1.0 - _smoothstep((z - (geom.z_apex - 28.0)) / 22.0)
    return shell * ring * zwin


def _intensity(geom: _Geometry, pts):
    values = np.full(pts.shape[0], _AIR)
    s = _indicator(_q(pts, geom.body_c, geom.body_s), geom.body_s, _SKIN_EDGE)
    values += (_BODY - values) * s
    if geom.ribs:
        values += (_RIB - values) * _rib_indicator(geom, pts)
    q_lung = np.minimum(
        _q(pts, geom.lung_c[0], geom.lung_s[0]),
        _q(pts, geom.lung_c[1], geom.lung_s[1]),
    )
    values += (_LUNG - values) * _indicator(q_lung, geom.lung_s[0], _LUNG_EDGE)
    values += (_LIVER - values) * _indicator(
        _q(pts, geom.liver_c, geom.liver_s), geom.liver_s, _LIVER_EDGE
    )
    return values


def _structure_masks(geom: _Geometry, pts):
    q_liver = _q(pts, geom.liver_c, geom.liver_s)
    q_lung = np.minimum(
        _q(pts, geom.lung_c[0], geom.lung_s[0]),
        _q(pts, geom.lung_c[1], geom.lung_s[1]),
    )
    liver = q_liver <= 1.0
    # the liver dome bulges into the right lung and is painted last, so the
    # lung mask excludes it, matching the rendered intensities
    lungs = (q_lung <= 1.0) & ~liver
    return liver.astype(np.float64), lungs.astype(np.float64)


def _envelope(geom: _Geometry, pts):
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    below = 1.0 - 0.45 * _smoothstep((geom.z_dome - z) / max(geom.z_dome - geom.origin[2], 1.0))
    above = 1.0 - _smoothstep((z - geom.z_dome) / max(geom.body_c[2] + geom.body_s[2] - geom.z_dome, 1.0))
    pz = np.where(z <= geom.z_dome, below, above)
    wy = 0.75 * max(geom.couch_y - geom.liver_c[1], 1.0)
    py = _smoothstep((geom.couch_y - y) / wy)
    px = 1.0 - 0.35 * _smoothstep(np.abs(x - geom.body_c[0]) / (1.25 * geom.body_s[0]))
    return pz * py * px


def _coefficients(spec: PhantomSpec, geom: _Geometry, pts, scale_vec):
    env = _envelope(geom, pts)[:, None]
    psi = spec.hysteresis_phase
    base = spec.amplitude_z / _SIGNAL_AMPLITUDE
    a1 = env * (-base * np.cos(psi)) * _DIR_MAIN
    a2 = env * (-base * np.sin(psi) * _PERIOD / (2.0 * np.pi)) * _DIR_HYST
    if scale_vec is not None:
        a1 = a1 * scale_vec
        a2 = a2 * scale_vec
    return a1, a2


def _phase_signal(spec: PhantomSpec) -> tuple:
    """One breathing cycle plus a periodic sample on each side.

    The padding makes the sample paired with the reference phase an interior
    one whose central-difference derivative vanishes exactly (its neighbours
    are bitwise-equal by symmetry), so the reference breathing state is
    exactly (v, v') = (0, 0) under the same derivative rule any consumer of
    the saved t,v series will apply.
    """
    n = spec.n_phases
    cycle = simulate_signal("sinusoid", _SIGNAL_AMPLITUDE, _PERIOD, n, 0.0, spec.seed)
    idx = np.arange(n + 2)
    t = idx * (_PERIOD / n)
    v = cycle.v[idx % n]
    signal = derive_signal(SurrogateSignal(t, v))
    phase_sample_map = list(range(1, n + 1))
    j_ref = n - 1  # paired with sample n: v = 0 and v' = 0 exactly
    return signal, phase_sample_map, j_ref


def _validate_spec(spec: PhantomSpec):
    if spec.n_phases < 3:
        raise ValidationError(f"n_phases must be >= 3, got {spec.n_phases}")
    if any(d < 4 for d in spec.dims):
        raise ValidationError(f"phantom dims must be >= 4 per axis, got {spec.dims}")
    if spec.amplitude_z < 0:
        raise ValidationError("amplitude_z must be >= 0")
    if not -1.5 < spec.hysteresis_phase < 1.5:
        raise ValidationError("hysteresis_phase must lie in (-1.5, 1.5) rad")


def _build(spec: PhantomSpec, scale_vec=None, offset=None) -> PhantomTruth:
    _validate_spec(spec)
    domain = GridDomain(spec.dims, spec.spacing)
    geom = _Geometry(spec, domain)
    geom.check_containment()
    if scale_vec is not None:
        # the world->canonical map for the transformed twin
        center = geom.center
        hi_corner = geom.origin + geom.extent
        for name, c, s in [("body", geom.body_c, geom.body_s)]:
            lo_t = center + scale_vec * (c - s - center) + offset
            hi_t = center + scale_vec * (c + s - center) + offset
            if np.any(lo_t < geom.origin) or np.any(hi_t > hi_corner):
                raise ValidationError(
                    f"transformed phantom {name} exceeds the field of view"
                )

    signal, phase_sample_map, j_ref = _phase_signal(spec)
    centers = domain.voxel_centers().reshape(-1, 3)
    if scale_vec is None:
        canon = centers
    else:
        canon = geom.center + (centers - geom.center - offset) / scale_vec

    a1, a2 = _coefficients(spec, geom, canon, scale_vec)

    phases, gt_fields = [], []
    masks = {"liver": [], "lungs": []}
    shape = domain.dims + (3,)
    for s_idx in phase_sample_map:
        u = a1 * signal.v[s_idx] + a2 * signal.vprime[s_idx]
        pts = centers + u
        canon_pts = pts if scale_vec is None else geom.center + (pts - geom.center - offset) / scale_vec
        phases.append(
            ScalarVolume(_intensity(geom, canon_pts).reshape(domain.dims),
                         spec.spacing, domain.origin, background=_AIR)
        )
        liver, lungs = _structure_masks(geom, canon_pts)
        masks["liver"].append(ScalarVolume(liver.reshape(domain.dims), spec.spacing,
                                           domain.origin, background=0.0))
        masks["lungs"].append(ScalarVolume(lungs.reshape(domain.dims), spec.spacing,
                                           domain.origin, background=0.0))
        gt_fields.append(DisplacementField(u.reshape(shape), spec.spacing, domain.origin))

    model = MotionModel(
        domain,
        a1.reshape(shape),
        a2.reshape(shape),
        np.zeros(shape),
        j_ref=j_ref,
        provenance="phantom analytic truth",
    )
    return PhantomTruth(
        phases=phases,
        gt_fields=gt_fields,
        masks=masks,
        signal=signal,
        j_ref=j_ref,
        phase_sample_map=phase_sample_map,
        model=model,
        spec=spec,
    )


def generate_phantom(spec: PhantomSpec = None) -> PhantomTruth:
    """Build the phantom: phase images, true fields, masks, signal, model.

    Deterministic for a given spec.  The reference phase (maximum
    inhalation, the last one) has exactly zero displacement.
    """
    if spec is None:
        spec = PhantomSpec()
    return _build(spec)


def make_target_variant(truth: PhantomTruth, scale, offset=(0.0, 0.0, 0.0)):
    """A 'second patient': the same anatomy scaled/translated about the center.

    ``scale`` components must lie in [0.8, 1.25].  Returns the target's
    static reference volume together with its own full ground truth, whose
    fields are the closed-form conjugation of the source ones: a point map
    T(x) = c + s*(x - c) + offset turns a source field u into
    u_t(y) = s * u(T^-1(y)).
    """
    scale_vec = np.array(scale, dtype=np.float64)
    if scale_vec.shape == ():
        scale_vec = np.full(3, float(scale_vec))
    if scale_vec.shape != (3,):
        raise ValidationError("scale must be a scalar or a 3-vector")
    if np.any(scale_vec < 0.8) or np.any(scale_vec > 1.25):
        raise ValidationError(f"scale components must lie in [0.8, 1.25], got {tuple(scale_vec)}")
    offset_vec = np.array(offset, dtype=np.float64)
    if offset_vec.shape != (3,) or not np.all(np.isfinite(offset_vec)):
        raise ValidationError("offset must be a finite 3-vector")
    target = _build(truth.spec, scale_vec, offset_vec)
    return target.reference, target
