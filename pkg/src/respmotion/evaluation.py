"""Overlap and field-accuracy metrics.

DICE works on binary masks sharing one grid.  The atlas chain carries every
4D phase mask through the motion and inter-patient maps into target space
and scores it against an expert mask there, which exercises the whole
transfer geometry without needing dense ground-truth correspondences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError
from .grid import DisplacementField, ScalarVolume, invert_field, warp_mask_nn

__all__ = ["OverlapReport", "dice", "atlas_chain_dice", "endpoint_error", "psnr"]


@dataclass(frozen=True)
class OverlapReport:
    structure: str
    phase: int
    dice: float
    voxels_a: int
    voxels_b: int
    voxels_intersect: int
    both_empty: bool = False

    def csv_row(self) -> str:
        return (
            f"{self.structure},{self.phase},{self.dice!r},"
            f"{self.voxels_a},{self.voxels_b},{self.voxels_intersect}"
        )


def _require_binary(vol: ScalarVolume, name: str):
    if not vol.is_binary():
        raise ValidationError(f"{name} must be binary (0/1 values only)")


def dice(mask_a: ScalarVolume, mask_b: ScalarVolume, structure: str = "", phase: int = -1) -> OverlapReport:
    """DICE overlap 2|A n B| / (|A| + |B|); two empty masks score 0, flagged."""
    mask_a.domain.require_compatible(mask_b.domain, "dice masks")
    _require_binary(mask_a, "mask_a")
    _require_binary(mask_b, "mask_b")
    a = mask_a.data > 0.5
    b = mask_b.data > 0.5
    na = int(a.sum())
    nb = int(b.sum())
    ni = int((a & b).sum())
    if na + nb == 0:
        return OverlapReport(structure, phase, 0.0, 0, 0, 0, both_empty=True)
    return OverlapReport(structure, phase, 2.0 * ni / (na + nb), na, nb, ni)


def atlas_chain_dice(
    pat4d_masks,
    phase_fields,
    phi_inter_inv,
    pat3d_mask: ScalarVolume,
    structure: str = "",
    inversion_tol_mm: float = 0.01,
    inversion_max_iter: int = 50,
):
    """Score every 4D phase mask against the target's expert mask.

    Each phase mask is first carried to the 4D reference frame (through the
    inverse of its phase-to-reference map), then into target space through
    the inter-patient link, with nearest-neighbour resampling at both hops.
    ``phi_inter_inv`` must be the field defined over the target grid whose
    pull-back performs that second hop (the inter-patient registration
    output: it maps target points into the reference frame, so sampling
    reference-frame masks through it lands them on the target grid).
    Returns one OverlapReport per phase.
    """
    pat4d_masks = list(pat4d_masks)
    phase_fields = list(phase_fields)
    if len(pat4d_masks) != len(phase_fields):
        raise ValidationError(
            f"got {len(pat4d_masks)} masks but {len(phase_fields)} phase fields"
        )
    _require_binary(pat3d_mask, "pat3d_mask")
    reports = []
    for j, (mask_j, field_j) in enumerate(zip(pat4d_masks, phase_fields)):
        try:
            to_ref = invert_field(field_j, tol=inversion_tol_mm, max_iter=inversion_max_iter)
            in_ref = warp_mask_nn(mask_j, to_ref)
        except ValidationError as exc:
            raise ValidationError(f"atlas chain, phase {j}, to-reference step: {exc}") from exc
        try:
            in_target = warp_mask_nn(in_ref, phi_inter_inv)
            reports.append(dice(in_target, pat3d_mask, structure=structure, phase=j))
        except ValidationError as exc:
            raise ValidationError(f"atlas chain, phase {j}, to-target step: {exc}") from exc
    return reports


def endpoint_error(estimated: DisplacementField, truth: DisplacementField, mask: ScalarVolume = None):
    """Mean and max Euclidean displacement error in mm, optionally masked."""
    estimated.domain.require_compatible(truth.domain, "endpoint error fields")
    err = np.sqrt(((estimated.u - truth.u) ** 2).sum(axis=-1))
    if mask is not None:
        mask.domain.require_compatible(estimated.domain, "endpoint error mask")
        _require_binary(mask, "mask")
        sel = mask.data > 0.5
        if not sel.any():
            raise NumericalError("endpoint error over an empty mask")
        err = err[sel]
    return float(err.mean()), float(err.max())


def psnr(reference: ScalarVolume, test: ScalarVolume) -> float:
    """Peak signal-to-noise ratio in dB; peak is the reference's value range."""
    reference.domain.require_compatible(test.domain, "psnr volumes")
    peak = float(reference.data.max() - reference.data.min())
    mse = float(((reference.data - test.data) ** 2).mean())
    if mse == 0.0:
        return float("inf")
    if peak == 0.0:
        raise NumericalError("PSNR undefined for a constant reference volume")
    return 20.0 * np.log10(peak / np.sqrt(mse))
