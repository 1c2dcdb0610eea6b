"""Transfer of a 4D breathing-motion model onto a static 3D patient.

The 4D patient contributes per-phase motion (intra-patient registration of
every phase to a reference phase); a single inter-patient registration links
the static target to that reference frame.  Each phase map is conjugated
into target space,

    phi_transferred_j = phi_inter_inv . phi_4d_j . phi_inter,

and a fresh surrogate model is fit to the conjugated fields, yielding a
model that animates the target anatomy with the 4D patient's breathing.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .errors import NonConvergenceWarning, PipelineError, ValidationError
from .grid import (
    DisplacementField,
    _sample_field_index,
    _world_to_index,
    compose_fields,
    invert_field,
    jacobian_determinant,
)
from .registration import RegistrationParams, register, register_phases
from .surrogate import (
    MotionModel,
    SurrogateSignal,
    derive_signal,
    evaluate_model,
    fit_model,
    pair_observations,
)

__all__ = [
    "TransferConfig",
    "TransferBundle",
    "TransferReport",
    "PhaseStats",
    "register_inter_patient",
    "transfer_phase_field",
    "transfer_model",
]


def _default_intra() -> RegistrationParams:
    return RegistrationParams(distance="nssd", regularizer="diffusive", alpha=0.1)


def _default_inter() -> RegistrationParams:
    return RegistrationParams(distance="ssd", regularizer="diffusive", alpha=1.0)


@dataclass
class TransferConfig:
    """Knobs for the full transfer pipeline.

    ``j_ref`` is mandatory: the 4D phase that anatomically matches the
    static target scan (maximum inhalation by clinical convention).
    ``signal_source`` picks the breathing signal attached to the output for
    animation: the 4D patient's own signal (``"reference"``), the same
    signal rescaled by ``signal_scale`` (``"scaled"``), or a measured
    ``target_signal`` (``"target"``).
    """

    j_ref: int = None
    intra: RegistrationParams = dataclass_field(default_factory=_default_intra)
    inter: RegistrationParams = dataclass_field(default_factory=_default_inter)
    inversion_tol_mm: float = 0.01
    inversion_max_iter: int = 50
    phase_sample_map: list = None
    signal_source: str = "reference"
    signal_scale: float = 1.0
    target_signal: SurrogateSignal = None
    provenance: str = "transferred 4D motion model"


@dataclass(frozen=True)
class PhaseStats:
    phase_index: int
    max_displacement_mm: float
    jacobian_min: float
    jacobian_max: float


@dataclass(frozen=True)
class TransferReport:
    inversion_residual_mm: float
    inversion_converged: bool
    phase_stats: list
    fit_rms_mm: float
    notes: list


@dataclass(frozen=True)
class TransferBundle:
    phi_inter: DisplacementField
    phi_inter_inv: DisplacementField
    transferred_fields: list
    intra_fields: list
    report: TransferReport
    animation_signal: SurrogateSignal


def register_inter_patient(pat3d_ref, pat4d_ref, params: RegistrationParams = None):
    """Deformable registration of the static target (fixed) to the 4D
    patient's reference phase (moving); SSD with diffusive smoothing by
    default."""
    if params is None:
        params = _default_inter()
    field, _ = register(pat3d_ref, pat4d_ref, params)
    return field


def transfer_phase_field(phi_inter, phi_inter_inv, phi_4d_j) -> DisplacementField:
    """Conjugate one phase map into target space.

    All maps are backward (pull-back) fields.  phi_inter lives on the
    target grid and maps into the 4D reference frame; phi_inter_inv is its
    inverse resampled onto the 4D grid.  The result lives on the target
    grid.
    """
    inner = compose_fields(phi_4d_j, phi_inter)
    return compose_fields(phi_inter_inv, inner)


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:
        raise PipelineError(name, str(exc)) from exc


def _roundtrip_residual(forward, inverse, notes):
    """Max |phi o phi^{-1} - id| in mm over round trips that stay inside
    the forward field's grid.

    Points whose inverse displacement leaves that grid (a 4D/3D field of
    view mismatch, inherent when the target anatomy is larger) carry no
    information about inversion quality; they are counted in the notes
    instead of polluting the residual.
    """
    v = inverse.u.reshape(-1, 3)
    pts = inverse.domain.voxel_centers().reshape(-1, 3) + v
    t = _world_to_index(forward.domain, pts)
    u_f, inside = _sample_field_index(forward.u, t, mode="zero")
    if not inside.any():
        notes.append("inversion round trip: no point stays inside the forward grid")
        return float("inf")
    mag = np.sqrt(((v + u_f) ** 2).sum(axis=1))
    n_out = int((~inside).sum())
    if n_out:
        notes.append(
            f"inversion round trip: {n_out} of {inside.size} points leave "
            "the forward field's grid and are excluded from the residual"
        )
    return float(mag[inside].max())


def _animation_signal(config: TransferConfig, signal: SurrogateSignal) -> SurrogateSignal:
    if config.signal_source == "reference":
        return signal
    if config.signal_source == "scaled":
        if not (np.isfinite(config.signal_scale) and config.signal_scale > 0):
            raise ValidationError("signal_scale must be positive and finite")
        return signal.scaled(config.signal_scale)
    if config.signal_source == "target":
        if config.target_signal is None:
            raise ValidationError("signal_source 'target' requires a target_signal")
        ts = config.target_signal
        return ts if ts.vprime is not None else derive_signal(ts)
    raise ValidationError(f"unknown signal_source {config.signal_source!r}")


def transfer_model(pat4d_phases, pat4d_signal, pat3d_ref, config: TransferConfig = None):
    """Run the full pipeline; returns (MotionModel, TransferBundle).

    Stages: intra-patient phase registration, inter-patient registration,
    inversion of the inter-patient map, per-phase conjugation, model fit.
    A failure inside a stage is re-raised as PipelineError naming it.
    """
    if config is None:
        config = TransferConfig()
    pat4d_phases = list(pat4d_phases)
    if config.j_ref is None:
        raise ValidationError(
            "config.j_ref must be set: index of the 4D phase matching the "
            "static reference scan (maximum inhalation by convention)"
        )
    if not 0 <= config.j_ref < len(pat4d_phases):
        raise ValidationError(
            f"j_ref {config.j_ref} outside the {len(pat4d_phases)} supplied phases"
        )
    signal = pat4d_signal if pat4d_signal.vprime is not None else derive_signal(pat4d_signal)
    animation = _animation_signal(config, signal)
    notes = []

    fields_4d = _stage(
        "register_phases", register_phases, pat4d_phases, config.j_ref, config.intra
    )
    phi_inter = _stage(
        "register_inter_patient",
        register_inter_patient,
        pat3d_ref,
        pat4d_phases[config.j_ref],
        config.inter,
    )

    def _invert():
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", NonConvergenceWarning)
            inv = invert_field(
                phi_inter,
                tol=config.inversion_tol_mm,
                max_iter=config.inversion_max_iter,
                out_domain=pat4d_phases[config.j_ref].domain,
            )
        converged = True
        for w in caught:
            if issubclass(w.category, NonConvergenceWarning):
                converged = False
                notes.append(f"inter-patient inversion: {w.message}")
                warnings.warn(w.message, NonConvergenceWarning, stacklevel=3)
        residual = _roundtrip_residual(phi_inter, inv, notes)
        return inv, converged, residual

    phi_inter_inv, inv_converged, inv_residual = _stage("invert_inter_field", _invert)

    def _conjugate():
        return [
            transfer_phase_field(phi_inter, phi_inter_inv, f) for f in fields_4d
        ]

    transferred = _stage("transfer_phase_fields", _conjugate)

    def _fit():
        observations = pair_observations(transferred, signal, config.phase_sample_map)
        return fit_model(observations, j_ref=config.j_ref, provenance=config.provenance)

    model = _stage("fit_model", _fit)

    sq_sum, n_vals = 0.0, 0
    obs = pair_observations(transferred, signal, config.phase_sample_map)
    for o in obs:
        pred = evaluate_model(model, o.v, o.vprime)
        diff = pred.u - o.field.u
        sq_sum += float((diff ** 2).sum())
        n_vals += diff.size
    fit_rms = float(np.sqrt(sq_sum / n_vals)) if n_vals else 0.0

    stats = []
    for j, f in enumerate(transferred):
        det = jacobian_determinant(f)
        stats.append(
            PhaseStats(
                phase_index=j,
                max_displacement_mm=f.max_magnitude(),
                jacobian_min=float(det.data.min()),
                jacobian_max=float(det.data.max()),
            )
        )

    report = TransferReport(
        inversion_residual_mm=inv_residual,
        inversion_converged=inv_converged,
        phase_stats=stats,
        fit_rms_mm=fit_rms,
        notes=notes,
    )
    bundle = TransferBundle(
        phi_inter=phi_inter,
        phi_inter_inv=phi_inter_inv,
        transferred_fields=transferred,
        intra_fields=fields_4d,
        report=report,
        animation_signal=animation,
    )
    return model, bundle
