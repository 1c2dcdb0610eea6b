import numpy as np
import pytest

from respmotion.errors import ValidationError
from respmotion.grid import warp_volume
from respmotion.phantom import Ellipsoid, PhantomSpec, generate_phantom, make_target_variant
from respmotion.surrogate import fit_model, pair_observations
from respmotion.evaluation import psnr


@pytest.fixture(scope="module")
def truth():
    return generate_phantom(PhantomSpec())


def test_phantom_structure(truth):
    n = truth.spec.n_phases
    assert len(truth.phases) == n
    assert len(truth.gt_fields) == n
    assert len(truth.masks["liver"]) == n
    assert len(truth.masks["lungs"]) == n
    assert truth.j_ref == n - 1
    assert truth.reference is truth.phases[truth.j_ref]
    # reference phase carries exactly zero displacement
    assert np.all(truth.gt_fields[truth.j_ref].u == 0.0)
    for m in truth.masks["liver"] + truth.masks["lungs"]:
        assert m.is_binary()
        assert m.data.sum() > 0


def test_reference_breathing_state_is_zero(truth):
    s = truth.phase_sample_map[truth.j_ref]
    assert truth.signal.v[s] == 0.0
    assert truth.signal.vprime[s] == 0.0


def test_generator_self_consistency_psnr(truth):
    # warping the reference by the true field must reproduce each rendered
    # phase almost exactly; the residual is pure interpolation error
    for j, (phase, gt) in enumerate(zip(truth.phases, truth.gt_fields)):
        value = psnr(phase, warp_volume(truth.reference, gt))
        assert value > 40.0, f"phase {j}: psnr {value:.1f} dB"


def test_gt_fields_lie_in_model_family(truth):
    obs = pair_observations(truth.gt_fields, truth.signal, truth.phase_sample_map)
    fitted = fit_model(obs, j_ref=truth.j_ref)
    assert np.abs(fitted.a1 - truth.model.a1).max() < 1e-6
    assert np.abs(fitted.a2 - truth.model.a2).max() < 1e-6
    assert np.abs(fitted.a3).max() < 1e-6


def test_phantom_deterministic(truth):
    again = generate_phantom(PhantomSpec())
    for a, b in zip(truth.phases, again.phases):
        assert np.array_equal(a.data, b.data)
    for a, b in zip(truth.gt_fields, again.gt_fields):
        assert np.array_equal(a.u, b.u)
    assert np.array_equal(truth.signal.v, again.signal.v)
    for organ in ("liver", "lungs"):
        for a, b in zip(truth.masks[organ], again.masks[organ]):
            assert np.array_equal(a.data, b.data)


def test_hysteresis_separates_inhale_exhale(truth):
    # equal-v phase pairs differ only through the v' term; with hysteresis
    # on, that difference must be visible in the fields
    n = truth.spec.n_phases
    vmap = truth.phase_sample_map
    j_a, j_b = 2, n - 2 - 2  # samples 3 and n-3: equal v, opposite v'
    assert truth.signal.v[vmap[j_a]] == truth.signal.v[vmap[j_b]]
    diff = truth.gt_fields[j_a].u - truth.gt_fields[j_b].u
    assert np.sqrt((diff ** 2).sum(axis=-1)).max() > 0.5


def test_amplitude_zero_freezes_motion():
    spec = PhantomSpec(dims=(16, 16, 16), amplitude_z=0.0, n_phases=4)
    truth = generate_phantom(spec)
    for f in truth.gt_fields:
        assert np.all(f.u == 0.0)
    for p in truth.phases[1:]:
        assert np.array_equal(p.data, truth.phases[0].data)


def test_hysteresis_zero_disables_vprime_term():
    spec = PhantomSpec(dims=(16, 16, 16), hysteresis_phase=0.0, n_phases=6)
    truth = generate_phantom(spec)
    assert np.all(truth.model.a2 == 0.0)
    # equal v now means equal field, bit for bit
    v = truth.signal.v
    vmap = truth.phase_sample_map
    pairs = [(a, b) for a in range(6) for b in range(a + 1, 6)
             if v[vmap[a]] == v[vmap[b]]]
    assert pairs
    for a, b in pairs:
        assert np.array_equal(truth.gt_fields[a].u, truth.gt_fields[b].u)


def test_spec_validation():
    with pytest.raises(ValidationError):
        generate_phantom(PhantomSpec(n_phases=2))
    with pytest.raises(ValidationError):
        generate_phantom(PhantomSpec(dims=(3, 16, 16)))
    with pytest.raises(ValidationError):
        generate_phantom(PhantomSpec(amplitude_z=-1.0))
    with pytest.raises(ValidationError):
        generate_phantom(PhantomSpec(hysteresis_phase=1.6))


def test_structures_must_fit():
    big_body = PhantomSpec(dims=(16, 16, 16),
                           body=Ellipsoid((0.5, 0.5, 0.5), (0.6, 0.4, 0.4)))
    with pytest.raises(ValidationError, match="field of view"):
        generate_phantom(big_body)
    stray_liver = PhantomSpec(dims=(16, 16, 16),
                              liver=Ellipsoid((0.92, 0.5, 0.4), (0.15, 0.14, 0.12)))
    with pytest.raises(ValidationError, match="outside the body"):
        generate_phantom(stray_liver)


# ---------------------------------------------------------------------------
# target variants
# ---------------------------------------------------------------------------


def test_variant_identity_reproduces_reference(truth):
    ref, target = make_target_variant(truth, 1.0)
    assert np.allclose(ref.data, truth.reference.data, atol=1e-6)
    for a, b in zip(target.gt_fields, truth.gt_fields):
        assert np.allclose(a.u, b.u, atol=1e-9)


def test_variant_scales_anatomy(truth):
    _, target = make_target_variant(truth, 1.1)
    ratio = target.masks["liver"][truth.j_ref].data.sum() / \
        truth.masks["liver"][truth.j_ref].data.sum()
    assert abs(ratio - 1.1 ** 3) < 0.07, f"liver volume ratio {ratio:.3f}"
    # motion amplitude scales with the anatomy
    src_max = truth.gt_fields[5].max_magnitude()
    tgt_max = target.gt_fields[5].max_magnitude()
    assert abs(tgt_max / src_max - 1.1) < 0.02


def test_variant_offset_moves_anatomy(truth):
    _, target = make_target_variant(truth, 1.0, offset=(8.0, 0.0, -8.0))
    src = truth.masks["liver"][truth.j_ref].data
    tgt = target.masks["liver"][truth.j_ref].data
    # 8 mm = 2 voxels at 4 mm spacing
    assert np.array_equal(tgt, np.roll(src, (2, -2), axis=(0, 2)))


def test_variant_amplitude_zero_truth_is_static():
    spec = PhantomSpec(dims=(16, 16, 16), amplitude_z=0.0, n_phases=4)
    _, target = make_target_variant(generate_phantom(spec), 1.1)
    for f in target.gt_fields:
        assert np.all(f.u == 0.0)


def test_variant_validation(truth):
    with pytest.raises(ValidationError):
        make_target_variant(truth, 0.7)
    with pytest.raises(ValidationError):
        make_target_variant(truth, 1.3)
    with pytest.raises(ValidationError):
        make_target_variant(truth, (1.1, 1.0))
    with pytest.raises(ValidationError):
        make_target_variant(truth, 1.0, offset=(np.nan, 0.0, 0.0))
    with pytest.raises(ValidationError, match="field of view"):
        make_target_variant(truth, 1.0, offset=(0.0, 0.0, 40.0))
