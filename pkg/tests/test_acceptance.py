"""Quantitative acceptance gate.

Nine numbered criteria, one test each.  Every test prints a single
``[C<n>] PASS/FAIL`` line with the measured numbers next to their
thresholds; the lines are replayed in the terminal summary after the run.
The twin-phantom pipeline behind criteria 6 and 8 dominates the runtime
at several minutes per run, everything else is seconds.
"""

import os
import time
import warnings

import numpy as np
import pytest

import conftest
from conftest import midcell_field, random_volume, small_domain, smooth_interior_field
from respmotion.evaluation import atlas_chain_dice, dice, endpoint_error
from respmotion.grid import (
    DisplacementField,
    GridDomain,
    ScalarVolume,
    compose_fields,
    invert_field,
)
from respmotion.phantom import PhantomSpec, generate_phantom, make_target_variant
from respmotion.registration import (
    RegistrationParams,
    objective_energy,
    objective_force,
    register,
)
from respmotion.surrogate import fit_model, pair_observations, save_model
from respmotion.transfer import TransferConfig, transfer_model, transfer_phase_field


def _check(tag, ok, detail):
    line = f"[{tag}] {'PASS' if ok else 'FAIL'}  {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def truth64():
    return generate_phantom(PhantomSpec())


# --------------------------------------------------------------------------
# C1: model fit recovers the phantom generator coefficients
# --------------------------------------------------------------------------


def test_c1_fit_recovers_generator_coefficients(truth64):
    t0 = time.time()
    obs = pair_observations(truth64.gt_fields, truth64.signal, truth64.phase_sample_map)
    model = fit_model(obs, j_ref=truth64.j_ref)
    elapsed = time.time() - t0
    rel_a1 = np.abs(model.a1 - truth64.model.a1).max() / np.abs(truth64.model.a1).max()
    rel_a2 = np.abs(model.a2 - truth64.model.a2).max() / np.abs(truth64.model.a2).max()
    abs_a3 = np.abs(model.a3).max()
    ok = rel_a1 < 1e-6 and rel_a2 < 1e-6 and abs_a3 < 1e-6 and elapsed < 30.0
    _check("C1", ok,
           f"coefficient recovery: rel a1 {rel_a1:.2e}, rel a2 {rel_a2:.2e} "
           f"(tol 1e-6), |a3| {abs_a3:.2e} mm (tol 1e-6), {elapsed:.1f}s (limit 30s)")


# --------------------------------------------------------------------------
# C2: analytic forces match central finite differences
# --------------------------------------------------------------------------


def test_c2_forces_match_finite_differences():
    t0 = time.time()
    rng = np.random.default_rng(7)
    dom = small_domain((8, 8, 8), (1.5, 1.5, 1.5))
    mask_data = np.zeros(dom.dims)
    mask_data[:, :, :4] = 1.0
    mask = ScalarVolume(mask_data, dom.spacing, dom.origin, 0.0)
    combos = [(d, r) for d in ("ssd", "nssd") for r in ("diffusive", "sliding")]
    eps, worst = 1e-4, 0.0
    for k in range(20):
        dist, regu = combos[k % 4]
        params = RegistrationParams(
            distance=dist, regularizer=regu, alpha=0.7,
            sliding_mask=mask if regu == "sliding" else None,
        ).validated()
        fixed = random_volume(rng, dom)
        moving = random_volume(rng, dom)
        f = midcell_field(rng, dom)
        _, force = objective_force(fixed, moving, f, params)
        d = rng.normal(0.0, 1.0, dom.dims + (3,))
        d /= np.sqrt((d ** 2).sum())
        e_plus = objective_energy(fixed, moving, f.with_u(f.u + eps * d), params)[0]
        e_minus = objective_energy(fixed, moving, f.with_u(f.u - eps * d), params)[0]
        fd = (e_plus - e_minus) / (2.0 * eps)
        an = float((force * d).sum())
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-12))
    elapsed = time.time() - t0
    ok = worst < 1e-4 and elapsed < 10.0
    _check("C2", ok,
           f"force vs finite differences: worst relative deviation {worst:.2e} "
           f"over 20 random instances (tol 1e-4), {elapsed:.1f}s (limit 10s)")


# --------------------------------------------------------------------------
# C3: registration recovers a 4-voxel translation of a blob
# --------------------------------------------------------------------------


def _blob(dom, center, sigma=16.0, amp=10.0):
    # smooth compact blob with mild directional ramps so the three axes
    # are distinguishable and rotations cost energy
    ramp = lambda t: t / np.sqrt(1.0 + t * t)
    pts = dom.voxel_centers().reshape(-1, 3)
    d = (pts - np.asarray(center)) / sigma
    r2 = (d ** 2).sum(axis=1)
    r = np.sqrt(r2)
    w = np.where(r < 3.0, 0.5 * (1.0 + np.cos(np.pi * np.clip(r / 3.0, 0.0, 1.0))), 0.0)
    mod = 1.0 + 0.4 * ramp(d[:, 2]) + 0.3 * ramp(d[:, 0]) + 0.2 * ramp(d[:, 1])
    val = amp * np.exp(-0.5 * r2) * mod * w
    return ScalarVolume(val.reshape(dom.dims), dom.spacing, dom.origin, 0.0)


def test_c3_registration_recovers_translation():
    dom = GridDomain((64, 64, 64), (2.0, 2.0, 2.0), (0.0, 0.0, 0.0))
    center = np.array([63.0, 63.0, 63.0])
    shift = np.array([0.0, 0.0, 8.0])  # 4 voxels
    fixed = _blob(dom, center + shift)
    moving = _blob(dom, center)
    params = RegistrationParams(distance="ssd", regularizer="diffusive",
                                alpha=1.0, levels=3, iters_per_level=150)
    t0 = time.time()
    field, report = register(fixed, moving, params)
    elapsed = time.time() - t0
    inside = fixed.data > 0.1 * fixed.data.max()
    epe = np.sqrt(((field.u[inside] - (-shift)) ** 2).sum(axis=1)) / dom.spacing[2]
    monotone = True
    last = {}
    for level, _, _, _, total in report.energy_trace:
        if level in last and total > last[level] + 1e-12:
            monotone = False
        last[level] = total
    ok = epe.mean() < 0.5 and monotone and elapsed < 60.0
    _check("C3", ok,
           f"translation recovery: mean endpoint error {epe.mean():.3f} vox "
           f"inside the blob (tol 0.5), energy trace monotone {monotone}, "
           f"{elapsed:.1f}s (limit 60s)")


# --------------------------------------------------------------------------
# C4: inversion round trip on smooth 5 mm fields
# --------------------------------------------------------------------------


def test_c4_inversion_round_trip():
    dom = small_domain((64, 64, 64), (2.0, 2.0, 2.0))
    t0 = time.time()
    worst = 0.0
    for seed in (11, 12, 13):
        rng = np.random.default_rng(seed)
        f = smooth_interior_field(rng, dom, max_mm=5.0)
        with warnings.catch_warnings():
            warnings.simplefilter("error")  # non-convergence must not happen
            inv = invert_field(f, tol=0.01, max_iter=50)
        worst = max(worst, compose_fields(f, inv).max_magnitude())
    elapsed = time.time() - t0
    ok = worst < 0.1 and elapsed < 10.0
    _check("C4", ok,
           f"inversion round trip: sup |phi o phi^-1 - id| {worst:.4f} mm over "
           f"3 smooth 5 mm fields (tol 0.1), {elapsed:.1f}s (limit 10s)")


# --------------------------------------------------------------------------
# C5: conjugation identities
# --------------------------------------------------------------------------


def test_c5_conjugation_identities():
    rng = np.random.default_rng(5)
    dom = small_domain((12, 12, 12), (2.0, 2.0, 2.0))
    ident = DisplacementField.zero(dom)
    phase = smooth_interior_field(rng, dom, max_mm=4.0)
    dev_identity = np.abs(transfer_phase_field(ident, ident, phase).u - phase.u).max()

    s, c = 1.25, np.array([4.0, -2.0, 6.0])
    dom2 = GridDomain((16, 16, 16), (4.0, 4.0, 4.0), (-30.0, -30.0, -30.0))
    pts = dom2.voxel_centers()
    phi_inter = DisplacementField((s - 1.0) * pts, dom2.spacing, dom2.origin)
    phi_inter_inv = DisplacementField((1.0 / s - 1.0) * pts, dom2.spacing, dom2.origin)
    phi_4d = DisplacementField(
        np.broadcast_to(c, dom2.dims + (3,)).copy(), dom2.spacing, dom2.origin)
    out = transfer_phase_field(phi_inter, phi_inter_inv, phi_4d)
    inner = out.u[4:-4, 4:-4, 4:-4]
    dev_scaling = np.sqrt(((inner - c / s) ** 2).sum(axis=-1)).max() / dom2.spacing[0]

    ok = dev_identity < 1e-9 and dev_scaling < 0.1
    _check("C5", ok,
           f"conjugation: identity case max deviation {dev_identity:.2e} mm "
           f"(tol 1e-9), scaling x translation case {dev_scaling:.4f} vox (tol 0.1)")


# --------------------------------------------------------------------------
# C6 + C8: twin-phantom transfer, run twice for determinism
# --------------------------------------------------------------------------


def _run_twin_pipeline(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    reg = dict(distance="nssd", regularizer="diffusive", alpha=1.0,
               levels=4, iters_per_level=100)
    t0 = time.time()
    truth = generate_phantom(PhantomSpec())
    target_ref, target = make_target_variant(truth, scale=1.1)
    cfg = TransferConfig(j_ref=truth.j_ref,
                         intra=RegistrationParams(**reg),
                         inter=RegistrationParams(**reg),
                         phase_sample_map=truth.phase_sample_map)
    model, bundle = transfer_model(truth.phases, truth.signal, target_ref, cfg)

    vox = float(np.mean(truth.spec.spacing))
    epe_vox = [
        endpoint_error(f, target.gt_fields[j], target.masks["liver"][j])[0] / vox
        for j, f in enumerate(bundle.transferred_fields)
    ]
    rows, dice_by_organ = [], {}
    for organ in ("liver", "lungs"):
        reports = atlas_chain_dice(truth.masks[organ], bundle.intra_fields,
                                   bundle.phi_inter, target.masks[organ][truth.j_ref],
                                   structure=organ)
        dice_by_organ[organ] = [r.dice for r in reports]
        rows.extend(reports)
    elapsed = time.time() - t0

    model_path = os.path.join(out_dir, "model.rmm")
    save_model(model, model_path)
    csv_path = os.path.join(out_dir, "evaluation.csv")
    with open(csv_path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("structure,phase,dice,voxels_a,voxels_b,voxels_intersect\n")
        for r in rows:
            fh.write(r.csv_row() + "\n")
    return {
        "elapsed": elapsed,
        "epe_vox": epe_vox,
        "dice": dice_by_organ,
        "fit_rms_mm": bundle.report.fit_rms_mm,
        "model_path": model_path,
        "csv_path": csv_path,
    }


@pytest.fixture(scope="module")
def twin_run(tmp_path_factory):
    return _run_twin_pipeline(tmp_path_factory.mktemp("twin_first"))


def test_c6_twin_phantom_transfer(twin_run):
    mean_epe = float(np.mean(twin_run["epe_vox"]))
    liver = float(np.mean(twin_run["dice"]["liver"]))
    lungs = float(np.mean(twin_run["dice"]["lungs"]))
    liver_min = float(np.min(twin_run["dice"]["liver"]))
    lungs_min = float(np.min(twin_run["dice"]["lungs"]))
    elapsed = twin_run["elapsed"]
    ok = mean_epe < 1.5 and liver >= 0.85 and lungs >= 0.90 and elapsed < 600.0
    _check("C6", ok,
           f"twin transfer: mean liver endpoint error {mean_epe:.3f} vox (tol 1.5), "
           f"chain DICE liver {liver:.4f} (>= 0.85, worst phase {liver_min:.4f}), "
           f"lungs {lungs:.4f} (>= 0.90, worst phase {lungs_min:.4f}), "
           f"fit rms {twin_run['fit_rms_mm']:.3f} mm, {elapsed:.0f}s (limit 600s)")


# --------------------------------------------------------------------------
# C7: overlap score equals a brute-force voxel count
# --------------------------------------------------------------------------


def _brute_dice(a, b):
    na = nb = ni = 0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            for k in range(a.shape[2]):
                va, vb = a[i, j, k] != 0, b[i, j, k] != 0
                na += va
                nb += vb
                ni += va and vb
    return 2.0 * ni / (na + nb)


def test_c7_dice_matches_brute_force():
    rng = np.random.default_rng(77)
    dom = small_domain((16, 16, 16), (1.0, 1.0, 1.0))
    exact = 0
    for _ in range(50):
        a = (rng.random(dom.dims) < 0.5).astype(float)
        b = (rng.random(dom.dims) < 0.5).astype(float)
        va = ScalarVolume(a, dom.spacing, dom.origin, 0.0)
        vb = ScalarVolume(b, dom.spacing, dom.origin, 0.0)
        exact += dice(va, vb).dice == _brute_dice(a, b)

    half_a = np.zeros((20, 20, 20))
    half_b = np.zeros((20, 20, 20))
    half_a[0:10, 0:10, 0:10] = 1.0
    half_b[0:10, 0:10, 5:15] = 1.0
    report = dice(ScalarVolume(half_a, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), 0.0),
                  ScalarVolume(half_b, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), 0.0))
    ok = exact == 50 and report.dice == 0.5
    _check("C7", ok,
           f"overlap score: {exact}/50 random pairs equal the brute-force count "
           f"exactly, half-overlap cube gives {report.dice} (expected exactly 0.5)")


# --------------------------------------------------------------------------
# C8: rerun of the twin pipeline is byte-identical
# --------------------------------------------------------------------------


def test_c8_twin_pipeline_is_deterministic(twin_run, tmp_path_factory):
    again = _run_twin_pipeline(tmp_path_factory.mktemp("twin_second"))
    with open(twin_run["model_path"], "rb") as fh:
        model_a = fh.read()
    with open(again["model_path"], "rb") as fh:
        model_b = fh.read()
    with open(twin_run["csv_path"], "rb") as fh:
        csv_a = fh.read()
    with open(again["csv_path"], "rb") as fh:
        csv_b = fh.read()
    ok = model_a == model_b and csv_a == csv_b
    _check("C8", ok,
           f"determinism: rerun model file ({len(model_b)} bytes) and evaluation "
           f"CSV ({len(csv_b)} bytes) byte-identical: {model_a == model_b} / "
           f"{csv_a == csv_b}")


# --------------------------------------------------------------------------
# C9: NSSD is invariant to affine intensity remaps
# --------------------------------------------------------------------------


def test_c9_nssd_affine_invariance():
    rng = np.random.default_rng(9)
    dom = small_domain((10, 10, 10), (2.0, 2.0, 2.0))
    fixed = random_volume(rng, dom)
    moving = random_volume(rng, dom)
    f = midcell_field(rng, dom)
    params = RegistrationParams(distance="nssd", regularizer="diffusive",
                                alpha=0.5).validated()
    e0 = objective_energy(fixed, moving, f, params)[0]
    e_mov = objective_energy(fixed, moving.with_data(3.0 * moving.data + 100.0),
                             f, params)[0]
    e_fix = objective_energy(fixed.with_data(3.0 * fixed.data + 100.0), moving,
                             f, params)[0]
    drift = max(abs(e_mov - e0), abs(e_fix - e0))
    ok = drift < 1e-9
    _check("C9", ok,
           f"intensity invariance: energy drift {drift:.2e} under the remap "
           f"3*I + 100 of either image (tol 1e-9)")
