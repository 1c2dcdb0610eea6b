"""Patient-specific respiratory motion models and their transfer.

Volumes live on axis-aligned grids; motion is represented by backward
(pull-back) displacement fields in millimetres; a surrogate model predicts
a field from a spirometry state (v, v') with one linear coefficient triple
per voxel.  The transfer pipeline conjugates a 4D patient's phase maps into
a static patient's space through a single inter-patient registration and
refits the model there.
"""

from .errors import (
    GridMismatchError,
    NonConvergenceWarning,
    NumericalError,
    PipelineError,
    ValidationError,
)
from .evaluation import OverlapReport, atlas_chain_dice, dice, endpoint_error, psnr
from .grid import (
    DisplacementField,
    GridDomain,
    ScalarVolume,
    compose_fields,
    downsample,
    downsample_mask,
    invert_field,
    jacobian_determinant,
    resample_field,
    sample_trilinear,
    warp_mask_nn,
    warp_volume,
)
from .io import (
    read_field,
    read_volume,
    render_coronal_slice,
    write_field,
    write_manifest,
    write_pgm,
    write_volume,
)
from .phantom import (
    Ellipsoid,
    PhantomSpec,
    PhantomTruth,
    generate_phantom,
    make_target_variant,
)
from .registration import (
    RegistrationParams,
    RegistrationReport,
    distance_nssd,
    distance_ssd,
    objective_energy,
    objective_force,
    reg_diffusive,
    reg_sliding,
    register,
    register_phases,
)
from .surrogate import (
    MotionModel,
    PhaseObservation,
    SurrogateSignal,
    derive_signal,
    evaluate_model,
    fit_model,
    load_model,
    load_signal,
    pair_observations,
    save_model,
    save_signal,
    simulate_signal,
)
from .transfer import (
    PhaseStats,
    TransferBundle,
    TransferConfig,
    TransferReport,
    register_inter_patient,
    transfer_model,
    transfer_phase_field,
)

__version__ = "0.1.0"

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
    "SurrogateSignal",
    "MotionModel",
    "PhaseObservation",
    "load_signal",
    "save_signal",
    "derive_signal",
    "simulate_signal",
    "pair_observations",
    "fit_model",
    "evaluate_model",
    "save_model",
    "load_model",
    "TransferConfig",
    "TransferBundle",
    "TransferReport",
    "PhaseStats",
    "register_inter_patient",
    "transfer_phase_field",
    "transfer_model",
    "Ellipsoid",
    "PhantomSpec",
    "PhantomTruth",
    "generate_phantom",
    "make_target_variant",
    "OverlapReport",
    "dice",
    "atlas_chain_dice",
    "endpoint_error",
    "psnr",
    "read_volume",
    "write_volume",
    "read_field",
    "write_field",
    "write_manifest",
    "write_pgm",
    "render_coronal_slice",
    "ValidationError",
    "GridMismatchError",
    "NumericalError",
    "PipelineError",
    "NonConvergenceWarning",
    "__version__",
]
