"""Spirometry surrogate signals and the per-voxel linear motion model.

A motion model predicts a backward displacement field from a breathing state
``(v, v')``, spirometry volume (ml) and its temporal derivative (ml/s),
as ``u(x) = a1(x) * v + a2(x) * v' + a3(x)`` with one coefficient vector per
voxel.  Coefficients are estimated by ordinary least squares against
observed phase fields; because the design matrix is shared by all voxels a
single 3x3 normal-equations solve covers the whole grid.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .grid import DisplacementField, GridDomain

__all__ = [
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
]


class SurrogateSignal:
    """Time series of spirometry samples: t (s), v (ml), optional v' (ml/s)."""

    __slots__ = ("t", "v", "vprime")

    def __init__(self, t, v, vprime=None):
        t = np.array(t, dtype=np.float64)
        v = np.array(v, dtype=np.float64)
        if t.ndim != 1 or v.shape != t.shape or t.size < 1:
            raise ValidationError("signal needs matching 1-D t and v arrays")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
            raise ValidationError("signal samples must be finite")
        if np.any(np.diff(t) <= 0):
            raise ValidationError("signal times must be strictly increasing")
        if vprime is not None:
            vprime = np.array(vprime, dtype=np.float64)
            if vprime.shape != t.shape or not np.all(np.isfinite(vprime)):
                raise ValidationError("vprime must match t and be finite")
            vprime.setflags(write=False)
        t.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "vprime", vprime)

    def __setattr__(self, name, value):
        raise AttributeError("SurrogateSignal is immutable")

    def __len__(self):
        return self.t.size

    def scaled(self, factor: float) -> "SurrogateSignal":
        """Multiply v (and v' if present) by a plain factor."""
        if not np.isfinite(factor):
            raise ValidationError("scale factor must be finite")
        vp = None if self.vprime is None else self.vprime * factor
        return SurrogateSignal(self.t, self.v * factor, vp)


def load_signal(path) -> SurrogateSignal:
    """Read a ``t,v`` CSV (seconds, millilitres).

    Strictly increasing t is required; problems are reported with their
    1-based line number.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "t,v":
        raise ValidationError(f"{path}:1: expected header 't,v'")
    ts, vs = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise ValidationError(f"{path}:{lineno}: expected two comma-separated values")
        try:
            t_val = float(parts[0])
            v_val = float(parts[1])
        except ValueError as exc:
            raise ValidationError(f"{path}:{lineno}: malformed number: {line!r}") from exc
        if not (np.isfinite(t_val) and np.isfinite(v_val)):
            raise ValidationError(f"{path}:{lineno}: non-finite value")
        if ts and t_val <= ts[-1]:
            raise ValidationError(f"{path}:{lineno}: t not strictly increasing")
        ts.append(t_val)
        vs.append(v_val)
    if len(ts) < 2:
        raise ValidationError(f"{path}: signal needs at least 2 rows, got {len(ts)}")
    return SurrogateSignal(ts, vs)


def save_signal(sig: SurrogateSignal, path):
    """Write the ``t,v`` CSV with full-precision (round-trippable) floats."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t,v\n")
        for t_val, v_val in zip(sig.t, sig.v):
            fh.write(f"{float(t_val)!r},{float(v_val)!r}\n")


def derive_signal(sig: SurrogateSignal) -> SurrogateSignal:
    """Attach v' computed by central differences (one-sided at the ends)."""
    if len(sig) < 2:
        raise ValidationError("derivative needs at least 2 samples")
    t, v = sig.t, sig.v
    vp = np.empty_like(v)
    vp[1:-1] = (v[2:] - v[:-2]) / (t[2:] - t[:-2])
    vp[0] = (v[1] - v[0]) / (t[1] - t[0])
    vp[-1] = (v[-1] - v[-2]) / (t[-1] - t[-2])
    return SurrogateSignal(t, v, vp)


def simulate_signal(
    kind: str,
    amplitude: float,
    period: float,
    n: int,
    amp_jitter: float = 0.0,
    seed: int = 0,
    n_cycles: float = 1.0,
) -> SurrogateSignal:
    """Synthesize a breathing signal.

    ``v(t) = -A * (1 - cos(2 pi t / period)) / 2``: zero at maximum
    inhalation (t = 0), most negative (-A) at full exhalation, so v measures
    exhaled volume relative to the inhaled reference state.
    ``kind='sinusoid'`` keeps A = amplitude; ``'variable_amplitude'`` draws A
    per cycle uniformly from ``amplitude * [1 - amp_jitter, 1 + amp_jitter]``.
    ``n`` samples span ``n_cycles`` periods (endpoint excluded).  Deterministic
    for a fixed seed.
    """
    if kind not in ("sinusoid", "variable_amplitude"):
        raise ValidationError(f"unknown signal kind {kind!r}")
    if n < 2:
        raise ValidationError(f"signal needs n >= 2 samples, got {n}")
    if period <= 0 or n_cycles <= 0:
        raise ValidationError("period and n_cycles must be positive")
    if amplitude < 0 or amp_jitter < 0:
        raise ValidationError("amplitude and amp_jitter must be >= 0")

    samples_per_cycle = n / float(n_cycles)
    idx = np.arange(n, dtype=np.float64)
    cycle = np.floor(idx / samples_per_cycle).astype(int)
    m = idx - cycle * samples_per_cycle
    # fold to the first half cycle: cos is even, and folding makes samples
    # that sit symmetrically around a peak bitwise equal
    m = np.minimum(m, samples_per_cycle - m)
    theta = (2.0 * np.pi / samples_per_cycle) * m

    if kind == "sinusoid":
        amps = np.full(cycle.max() + 1, float(amplitude))
    else:
        rng = np.random.default_rng(seed)
        lo = amplitude * (1.0 - amp_jitter)
        hi = amplitude * (1.0 + amp_jitter)
        amps = rng.uniform(lo, hi, size=cycle.max() + 1)

    v = -amps[cycle] * (1.0 - np.cos(theta)) / 2.0
    t = idx * (period / samples_per_cycle)
    return SurrogateSignal(t, v)


@dataclass(frozen=True)
class PhaseObservation:
    """One regression row: a phase field and the breathing state it belongs to."""

    field: DisplacementField
    v: float
    vprime: float
    phase_index: int


def pair_observations(fields, signal: SurrogateSignal, phase_sample_map=None):
    """Pair phase fields with signal samples.

    ``phase_sample_map[j]`` is the signal sample index for phase ``j``
    (default: identity order).  The derivative is computed on demand.
    """
    fields = list(fields)
    sig = signal if signal.vprime is not None else derive_signal(signal)
    if phase_sample_map is None:
        phase_sample_map = list(range(len(fields)))
    phase_sample_map = [int(i) for i in phase_sample_map]
    if len(phase_sample_map) != len(fields):
        raise ValidationError(
            f"phase->sample map has {len(phase_sample_map)} entries "
            f"for {len(fields)} fields"
        )
    for i in phase_sample_map:
        if not 0 <= i < len(sig):
            raise ValidationError(f"sample index {i} outside signal of length {len(sig)}")
    return [
        PhaseObservation(f, float(sig.v[i]), float(sig.vprime[i]), j)
        for j, (f, i) in enumerate(zip(fields, phase_sample_map))
    ]


class MotionModel:
    """Per-voxel linear motion model: three coefficient vector fields.

    a1 in mm/ml, a2 in mm/(ml/s), a3 in mm.  ``provenance`` is free text
    describing which data or transfer produced the model.
    """

    __slots__ = ("domain", "a1", "a2", "a3", "j_ref", "provenance")

    def __init__(self, domain: GridDomain, a1, a2, a3, j_ref: int = 0, provenance: str = ""):
        coeffs = []
        for name, arr in (("a1", a1), ("a2", a2), ("a3", a3)):
            arr = np.array(arr, dtype=np.float64)
            if arr.shape != domain.dims + (3,):
                raise ValidationError(
                    f"{name} shape {arr.shape} does not match domain {domain.dims}"
                )
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} must be finite everywhere")
            arr.setflags(write=False)
            coeffs.append(arr)
        object.__setattr__(self, "domain", domain)
        object.__setattr__(self, "a1", coeffs[0])
        object.__setattr__(self, "a2", coeffs[1])
        object.__setattr__(self, "a3", coeffs[2])
        object.__setattr__(self, "j_ref", int(j_ref))
        object.__setattr__(self, "provenance", str(provenance))

    def __setattr__(self, name, value):
        raise AttributeError("MotionModel is immutable")


def _design_matrix(observations):
    g = np.array([[o.v, o.vprime, 1.0] for o in observations])
    rank = np.linalg.matrix_rank(g)
    if rank < 3:
        reasons = []
        if np.ptp(g[:, 0]) == 0.0:
            reasons.append("v is constant (collinear with the intercept)")
        if np.ptp(g[:, 1]) == 0.0:
            reasons.append("v' is constant (collinear with the intercept)")
        if not reasons:
            vc = g[:, 0] - g[:, 0].mean()
            pc = g[:, 1] - g[:, 1].mean()
            denom = np.linalg.norm(vc) * np.linalg.norm(pc)
            if denom > 0 and abs(vc @ pc) >= denom * (1 - 1e-12):
                reasons.append("v and v' are collinear")
        if not reasons:
            reasons.append("columns (v, v', 1) are linearly dependent")
        raise ValidationError(
            "cannot fit motion model, design matrix is rank deficient: "
            + "; ".join(reasons)
        )
    return g


def fit_model(observations, j_ref: int = 0, provenance: str = "") -> MotionModel:
    """Ordinary least squares of observed displacements against (v, v', 1).

    Every voxel and displacement component is fit independently, but all of
    them share the same design matrix, so the normal equations are factored
    once and applied to the stacked right-hand sides.
    """
    observations = list(observations)
    if len(observations) < 3:
        raise ValidationError(f"need >= 3 observations, got {len(observations)}")
    domain = observations[0].field.domain
    for o in observations:
        if not o.field.domain.compatible(domain):
            raise ValidationError(f"phase {o.phase_index}: field grid differs")
        if not (np.isfinite(o.v) and np.isfinite(o.vprime)):
            raise ValidationError(f"phase {o.phase_index}: non-finite signal state")
    g = _design_matrix(observations)
    u_rows = np.stack([o.field.u.reshape(-1) for o in observations])  # (n, 3N)
    coef = np.linalg.solve(g.T @ g, g.T @ u_rows)  # one 3x3 factorization
    shape = domain.dims + (3,)
    return MotionModel(
        domain,
        coef[0].reshape(shape),
        coef[1].reshape(shape),
        coef[2].reshape(shape),
        j_ref=j_ref,
        provenance=provenance,
    )


def evaluate_model(model: MotionModel, v: float, vprime: float) -> DisplacementField:
    """Predict the field at breathing state (v, v'): exactly linear in both."""
    if not (np.isfinite(v) and np.isfinite(vprime)):
        raise ValidationError("evaluate_model needs finite v and v'")
    u = model.a1 * float(v) + model.a2 * float(vprime) + model.a3
    return DisplacementField(u, model.domain.spacing, model.domain.origin)


# ---------------------------------------------------------------------------
# model file format: versioned binary, little-endian, bit-exact round trip
# ---------------------------------------------------------------------------

_MODEL_MAGIC = b"RMOTMDL\x00"
_MODEL_VERSION = 1


def _coeff_bytes(arr):
    # x-fastest voxel order, 3 interleaved components, little-endian doubles
    return np.ascontiguousarray(arr.transpose(2, 1, 0, 3)).astype("<f8").tobytes()


def save_model(model: MotionModel, path):
    """Write the versioned binary model file (lossless round trip)."""
    prov = model.provenance.encode("utf-8")
    header = _MODEL_MAGIC
    header += struct.pack("<I", _MODEL_VERSION)
    header += struct.pack("<3I", *model.domain.dims)
    header += struct.pack("<3d", *model.domain.spacing)
    header += struct.pack("<3d", *model.domain.origin)
    header += struct.pack("<i", model.j_ref)
    header += struct.pack("<I", len(prov)) + prov
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in (model.a1, model.a2, model.a3):
            fh.write(_coeff_bytes(arr))


def load_model(path) -> MotionModel:
    """Read a model file written by :func:`save_model`."""
    with open(path, "rb") as fh:
        blob = fh.read()

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise ValidationError(f"model file {path}: truncated while reading {what}")
        out = blob[pos:pos + n]
        pos += n
        return out

    pos = 0
    if take(len(_MODEL_MAGIC), "magic") != _MODEL_MAGIC:
        raise ValidationError(f"model file {path}: bad magic bytes")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != _MODEL_VERSION:
        raise ValidationError(
            f"model file {path}: unsupported version {version} (expected {_MODEL_VERSION})"
        )
    dims = struct.unpack("<3I", take(12, "dims"))
    spacing = struct.unpack("<3d", take(24, "spacing"))
    origin = struct.unpack("<3d", take(24, "origin"))
    (j_ref,) = struct.unpack("<i", take(4, "j_ref"))
    (prov_len,) = struct.unpack("<I", take(4, "provenance length"))
    provenance = take(prov_len, "provenance").decode("utf-8")
    n = dims[0] * dims[1] * dims[2] * 3
    coeffs = []
    for name in ("a1", "a2", "a3"):
        raw = take(n * 8, name)
        arr = np.frombuffer(raw, dtype="<f8").reshape(dims[2], dims[1], dims[0], 3)
        coeffs.append(arr.transpose(2, 1, 0, 3).astype(np.float64))
    if pos != len(blob):
        raise ValidationError(
            f"model file {path}: {len(blob) - pos} trailing bytes "
            "(dims in header do not match payload)"
        )
    domain = GridDomain(dims, spacing, origin)
    return MotionModel(domain, *coeffs, j_ref=j_ref, provenance=provenance)
