"""Command line interface.

Subcommands: phantom, register, fit, transfer, evaluate, animate.  Every
command takes ``--config <yaml>``, ``--out <dir>``, ``--seed <int>`` and
``--threads <int>``; flags win over config values, and RESPMOTION_THREADS
is honoured only when --threads is absent.  Inputs are fully validated and
loaded before anything is written.  Each run records its resolved
configuration and a manifest with content hashes; reruns with identical
inputs produce byte-identical outputs.

Exit codes: 0 success, 2 invalid input or config, 3 numerical failure,
4 file system problems.
"""

from __future__ import annotations

import argparse
import glob as globmod
import json
import os
import sys

import numpy as np
import yaml

from .errors import NumericalError, PipelineError, ValidationError
from .evaluation import atlas_chain_dice, dice, endpoint_error
from .grid import DisplacementField, warp_volume
from .io import (
    read_field,
    read_volume,
    render_coronal_slice,
    write_field,
    write_manifest,
    write_pgm,
    write_volume,
)
from .phantom import PhantomSpec, generate_phantom, make_target_variant
from .registration import RegistrationParams, register
from .surrogate import (
    derive_signal,
    evaluate_model,
    fit_model,
    load_model,
    load_signal,
    pair_observations,
    save_model,
    save_signal,
)
from .transfer import TransferConfig, transfer_model

_TOP_KEYS = {"seed", "threads", "io", "registration", "model", "transfer", "phantom", "inputs"}
_REG_BLOCK_KEYS = {
    "distance", "regularizer", "alpha", "levels", "iters_per_level",
    "step0", "step_shrink", "grad_tol", "sliding_mask",
}
_MODEL_KEYS = {"j_ref", "phase_sample_map", "provenance"}
_TRANSFER_KEYS = {
    "signal_source", "signal_scale", "target_signal",
    "inversion_tol_mm", "inversion_max_iter",
}
_PHANTOM_KEYS = {
    "dims", "spacing", "amplitude_z", "hysteresis_phase", "n_phases", "ribs", "target",
}
_INPUT_KEYS = {
    "fixed", "moving", "role", "phases", "signal", "target", "fields",
    "model", "volume", "phase_fields", "inter_field", "structures", "endpoint",
}


def _check_keys(section: dict, allowed: set, where: str):
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ValidationError(f"config: unknown keys in {where}: {', '.join(unknown)}")


def _section(cfg: dict, name: str, allowed: set) -> dict:
    value = cfg.get(name, {})
    if value is None:
        value = {}
    if not isinstance(value, dict):
        raise ValidationError(f"config: section '{name}' must be a mapping")
    _check_keys(value, allowed, f"section '{name}'")
    return value


def _load_config(path) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ValidationError(f"config {path}: not valid YAML: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ValidationError(f"config {path}: top level must be a mapping")
    _check_keys(data, _TOP_KEYS, "config")
    return data


def _resolve_seed(args, cfg) -> int:
    if args.seed is not None:
        return int(args.seed)
    if "seed" in cfg:
        try:
            return int(cfg["seed"])
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"config: seed must be an integer: {cfg['seed']!r}") from exc
    return 0


def _resolve_threads(args, cfg) -> int:
    if args.threads is not None:
        n = args.threads
    elif "threads" in cfg:
        n = cfg["threads"]
    elif os.environ.get("RESPMOTION_THREADS"):
        raw = os.environ["RESPMOTION_THREADS"]
        try:
            n = int(raw)
        except ValueError as exc:
            raise ValidationError(f"RESPMOTION_THREADS must be an integer: {raw!r}") from exc
    else:
        n = 1
    try:
        n = int(n)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"threads must be an integer: {n!r}") from exc
    if n < 1:
        raise ValidationError(f"threads must be >= 1, got {n}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    return n


def _resolve_out(args, cfg) -> str:
    io_sec = _section(cfg, "io", {"out"})
    out = args.out or io_sec.get("out")
    if not out:
        raise ValidationError("an output directory is required (--out or io.out)")
    return str(out)


def _expand_paths(value, what) -> list:
    if value is None:
        raise ValidationError(f"config: inputs.{what} is required")
    if isinstance(value, str):
        if any(ch in value for ch in "*?["):
            matches = sorted(globmod.glob(value))
            if not matches:
                raise ValidationError(f"inputs.{what}: pattern {value!r} matched nothing")
            return matches
        return [value]
    if isinstance(value, list) and all(isinstance(v, str) for v in value):
        if not value:
            raise ValidationError(f"inputs.{what} must not be empty")
        return list(value)
    raise ValidationError(f"inputs.{what} must be a path, glob pattern or list of paths")


def _single_path(section: dict, key: str, where: str = "inputs") -> str:
    value = section.get(key)
    if not isinstance(value, str) or not value:
        raise ValidationError(f"config: {where}.{key} (a path) is required")
    return value


def _reg_params(cfg: dict, role: str) -> RegistrationParams:
    reg = _section(cfg, "registration", {"intra", "inter"})
    block = reg.get(role, {})
    if block is None:
        block = {}
    if not isinstance(block, dict):
        raise ValidationError(f"config: registration.{role} must be a mapping")
    _check_keys(block, _REG_BLOCK_KEYS, f"registration.{role}")
    if role == "intra":
        params = RegistrationParams(distance="nssd", regularizer="diffusive", alpha=0.1)
    else:
        params = RegistrationParams(distance="ssd", regularizer="diffusive", alpha=1.0)
    for key in ("distance", "regularizer"):
        if key in block:
            setattr(params, key, str(block[key]))
    for key in ("alpha", "step0", "step_shrink", "grad_tol"):
        if key in block:
            setattr(params, key, float(block[key]))
    for key in ("levels", "iters_per_level"):
        if key in block:
            setattr(params, key, int(block[key]))
    if block.get("sliding_mask"):
        params.sliding_mask = read_volume(str(block["sliding_mask"]), background=0.0)
        params.regularizer = "sliding"
    return params.validated()


def _write_run_records(out_dir, command, cfg, seed, threads, filenames):
    resolved = dict(cfg)
    resolved["command"] = command
    resolved["seed"] = seed
    resolved["threads"] = threads
    path = os.path.join(out_dir, "resolved_config.yaml")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        yaml.safe_dump(resolved, fh, sort_keys=True, default_flow_style=False)
    write_manifest(out_dir, sorted(filenames) + ["resolved_config.yaml"], {"command": command})


def _write_json(out_dir, name, payload) -> str:
    with open(os.path.join(out_dir, name), "w", encoding="ascii", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return name


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _triple_from(cfg_value, what, cast):
    if cfg_value is None:
        return None
    if not isinstance(cfg_value, (list, tuple)) or len(cfg_value) != 3:
        raise ValidationError(f"config: phantom.{what} must have 3 entries")
    return tuple(cast(v) for v in cfg_value)


def cmd_phantom(cfg, out_dir, seed):
    sec = _section(cfg, "phantom", _PHANTOM_KEYS)
    kwargs = {"seed": seed}
    dims = _triple_from(sec.get("dims"), "dims", int)
    if dims:
        kwargs["dims"] = dims
    spacing = _triple_from(sec.get("spacing"), "spacing", float)
    if spacing:
        kwargs["spacing"] = spacing
    for key, cast in (
        ("amplitude_z", float),
        ("hysteresis_phase", float),
        ("n_phases", int),
        ("ribs", bool),
    ):
        if key in sec:
            kwargs[key] = cast(sec[key])
    spec = PhantomSpec(**kwargs)
    truth = generate_phantom(spec)

    target = None
    tsec = sec.get("target")
    if tsec is not None:
        if not isinstance(tsec, dict):
            raise ValidationError("config: phantom.target must be a mapping")
        _check_keys(tsec, {"scale", "offset"}, "phantom.target")
        scale = tsec.get("scale", 1.0)
        offset = tsec.get("offset", (0.0, 0.0, 0.0))
        _, target = make_target_variant(truth, scale, offset)

    os.makedirs(out_dir, exist_ok=True)
    files = []

    def put_volume(name, vol):
        write_volume(vol, os.path.join(out_dir, name))
        files.extend([name, name[:-4] + ".raw"])

    def put_field(name, fld):
        write_field(fld, os.path.join(out_dir, name))
        files.extend([name, name[:-4] + ".raw"])

    put_volume("reference.mhd", truth.reference)
    for j in range(spec.n_phases):
        put_volume(f"phase_{j:03d}.mhd", truth.phases[j])
        put_field(f"gt_field_{j:03d}.mhd", truth.gt_fields[j])
        put_volume(f"mask_liver_{j:03d}.mhd", truth.masks["liver"][j])
        put_volume(f"mask_lungs_{j:03d}.mhd", truth.masks["lungs"][j])
    save_signal(truth.signal, os.path.join(out_dir, "signal.csv"))
    files.append("signal.csv")
    save_model(truth.model, os.path.join(out_dir, "truth_model.rmm"))
    files.append("truth_model.rmm")

    if target is not None:
        put_volume("target_reference.mhd", target.reference)
        put_volume("target_mask_liver.mhd", target.masks["liver"][target.j_ref])
        put_volume("target_mask_lungs.mhd", target.masks["lungs"][target.j_ref])
        for j in range(spec.n_phases):
            put_field(f"target_gt_field_{j:03d}.mhd", target.gt_fields[j])
        save_model(target.model, os.path.join(out_dir, "target_truth_model.rmm"))
        files.append("target_truth_model.rmm")

    print(
        f"phantom: {spec.n_phases} phases, dims {spec.dims}, "
        f"j_ref {truth.j_ref}, sample map {truth.phase_sample_map[0]}..{truth.phase_sample_map[-1]}"
    )
    return files


def cmd_register(cfg, out_dir, seed):
    inputs = _section(cfg, "inputs", _INPUT_KEYS)
    role = inputs.get("role", "inter")
    if role not in ("intra", "inter"):
        raise ValidationError(f"inputs.role must be 'intra' or 'inter', got {role!r}")
    fixed = read_volume(_single_path(inputs, "fixed"))
    moving = read_volume(_single_path(inputs, "moving"))
    params = _reg_params(cfg, role)
    field, report = register(fixed, moving, params)

    os.makedirs(out_dir, exist_ok=True)
    write_field(field, os.path.join(out_dir, "field.mhd"))
    trace = [
        {"level": lv, "iteration": it, "distance": d, "regularizer": r, "total": t}
        for (lv, it, d, r, t) in report.energy_trace
    ]
    report_name = _write_json(out_dir, "report.json", {
        "converged": report.converged,
        "final_step": report.final_step,
        "energy_trace": trace,
        "max_displacement_mm": field.max_magnitude(),
    })
    print(
        f"register ({role}): final energy {trace[-1]['total']:.6g}, "
        f"max |u| {field.max_magnitude():.3f} mm, converged {report.converged}"
    )
    return ["field.mhd", "field.raw", report_name]


def _fit_residual(model, observations):
    sq, n = 0.0, 0
    for o in observations:
        diff = evaluate_model(model, o.v, o.vprime).u - o.field.u
        sq += float((diff ** 2).sum())
        n += diff.size
    return float(np.sqrt(sq / n)) if n else 0.0


def cmd_fit(cfg, out_dir, seed):
    inputs = _section(cfg, "inputs", _INPUT_KEYS)
    msec = _section(cfg, "model", _MODEL_KEYS)
    if "j_ref" not in msec:
        raise ValidationError("config: model.j_ref is required for fit")
    j_ref = int(msec["j_ref"])
    field_paths = _expand_paths(inputs.get("fields"), "fields")
    fields = [read_field(p) for p in field_paths]
    signal = load_signal(_single_path(inputs, "signal"))
    observations = pair_observations(fields, signal, msec.get("phase_sample_map"))
    if not 0 <= j_ref < len(fields):
        raise ValidationError(f"model.j_ref {j_ref} outside the {len(fields)} fields")
    model = fit_model(
        observations,
        j_ref=j_ref,
        provenance=str(msec.get("provenance", "fit from phase fields")),
    )
    rms = _fit_residual(model, observations)

    os.makedirs(out_dir, exist_ok=True)
    save_model(model, os.path.join(out_dir, "model.rmm"))
    report_name = _write_json(out_dir, "fit_report.json", {
        "n_observations": len(observations),
        "j_ref": j_ref,
        "rms_residual_mm": rms,
    })
    print(f"fit: {len(observations)} observations, rms residual {rms:.3e} mm")
    return ["model.rmm", report_name]


def cmd_transfer(cfg, out_dir, seed):
    inputs = _section(cfg, "inputs", _INPUT_KEYS)
    msec = _section(cfg, "model", _MODEL_KEYS)
    tsec = _section(cfg, "transfer", _TRANSFER_KEYS)
    if "j_ref" not in msec:
        raise ValidationError("config: model.j_ref is required for transfer")

    phase_paths = _expand_paths(inputs.get("phases"), "phases")
    phases = [read_volume(p) for p in phase_paths]
    signal = load_signal(_single_path(inputs, "signal"))
    pat3d = read_volume(_single_path(inputs, "target"))

    tconf = TransferConfig(
        j_ref=int(msec["j_ref"]),
        intra=_reg_params(cfg, "intra"),
        inter=_reg_params(cfg, "inter"),
        phase_sample_map=msec.get("phase_sample_map"),
        provenance=str(msec.get("provenance", "transferred 4D motion model")),
    )
    if "signal_source" in tsec:
        tconf.signal_source = str(tsec["signal_source"])
    if "signal_scale" in tsec:
        tconf.signal_scale = float(tsec["signal_scale"])
    if tsec.get("target_signal"):
        tconf.target_signal = load_signal(str(tsec["target_signal"]))
    if "inversion_tol_mm" in tsec:
        tconf.inversion_tol_mm = float(tsec["inversion_tol_mm"])
    if "inversion_max_iter" in tsec:
        tconf.inversion_max_iter = int(tsec["inversion_max_iter"])

    model, bundle = transfer_model(phases, signal, pat3d, tconf)

    os.makedirs(out_dir, exist_ok=True)
    files = []
    save_model(model, os.path.join(out_dir, "model.rmm"))
    files.append("model.rmm")
    write_field(bundle.phi_inter, os.path.join(out_dir, "phi_inter.mhd"))
    files.extend(["phi_inter.mhd", "phi_inter.raw"])
    write_field(bundle.phi_inter_inv, os.path.join(out_dir, "phi_inter_inv.mhd"))
    files.extend(["phi_inter_inv.mhd", "phi_inter_inv.raw"])
    for j, f in enumerate(bundle.transferred_fields):
        name = f"transferred_field_{j:03d}.mhd"
        write_field(f, os.path.join(out_dir, name))
        files.extend([name, name[:-4] + ".raw"])
    save_signal(bundle.animation_signal, os.path.join(out_dir, "animation_signal.csv"))
    files.append("animation_signal.csv")
    rep = bundle.report
    report_name = _write_json(out_dir, "transfer_report.json", {
        "inversion_residual_mm": rep.inversion_residual_mm,
        "inversion_converged": rep.inversion_converged,
        "fit_rms_mm": rep.fit_rms_mm,
        "notes": rep.notes,
        "phase_stats": [
            {
                "phase": s.phase_index,
                "max_displacement_mm": s.max_displacement_mm,
                "jacobian_min": s.jacobian_min,
                "jacobian_max": s.jacobian_max,
            }
            for s in rep.phase_stats
        ],
    })
    files.append(report_name)
    print(
        f"transfer: {len(phases)} phases, inversion residual "
        f"{rep.inversion_residual_mm:.4f} mm, fit rms {rep.fit_rms_mm:.3e} mm"
    )
    return files


def cmd_evaluate(cfg, out_dir, seed):
    inputs = _section(cfg, "inputs", _INPUT_KEYS)
    structures = inputs.get("structures")
    if not isinstance(structures, dict) or not structures:
        raise ValidationError("config: inputs.structures mapping is required for evaluate")

    phase_fields = None
    inter_field = None
    if inputs.get("phase_fields") is not None:
        phase_fields = [read_field(p) for p in _expand_paths(inputs["phase_fields"], "phase_fields")]
        inter_field = read_field(_single_path(inputs, "inter_field"))

    loaded = {}
    for name, block in sorted(structures.items()):
        if not isinstance(block, dict):
            raise ValidationError(f"inputs.structures.{name} must be a mapping")
        _check_keys(block, {"phase_masks", "target_mask"}, f"inputs.structures.{name}")
        masks = [
            read_volume(p, background=0.0)
            for p in _expand_paths(block.get("phase_masks"), f"structures.{name}.phase_masks")
        ]
        target_mask = read_volume(
            _single_path(block, "target_mask", f"inputs.structures.{name}"), background=0.0
        )
        if phase_fields is not None and len(masks) != len(phase_fields):
            raise ValidationError(
                f"structure {name}: {len(masks)} masks vs {len(phase_fields)} phase fields"
            )
        loaded[name] = (masks, target_mask)

    endpoint = inputs.get("endpoint")
    ep_data = None
    if endpoint is not None:
        if not isinstance(endpoint, dict):
            raise ValidationError("inputs.endpoint must be a mapping")
        _check_keys(endpoint, {"estimated", "truth", "mask"}, "inputs.endpoint")
        est = [read_field(p) for p in _expand_paths(endpoint.get("estimated"), "endpoint.estimated")]
        tru = [read_field(p) for p in _expand_paths(endpoint.get("truth"), "endpoint.truth")]
        if len(est) != len(tru):
            raise ValidationError(f"endpoint: {len(est)} estimated vs {len(tru)} truth fields")
        ep_mask = None
        if endpoint.get("mask"):
            ep_mask = read_volume(str(endpoint["mask"]), background=0.0)
        ep_data = (est, tru, ep_mask)

    rows = []
    for name, (masks, target_mask) in sorted(loaded.items()):
        if phase_fields is None:
            for j, m in enumerate(masks):
                rows.append(dice(m, target_mask, structure=name, phase=j))
        else:
            rows.extend(
                atlas_chain_dice(masks, phase_fields, inter_field, target_mask, structure=name)
            )

    os.makedirs(out_dir, exist_ok=True)
    files = []
    csv_path = os.path.join(out_dir, "evaluation.csv")
    with open(csv_path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("structure,phase,dice,voxels_a,voxels_b,voxels_intersect\n")
        for r in rows:
            fh.write(r.csv_row() + "\n")
    files.append("evaluation.csv")

    if ep_data is not None:
        est, tru, ep_mask = ep_data
        ep_path = os.path.join(out_dir, "endpoint.csv")
        with open(ep_path, "w", encoding="ascii", newline="\n") as fh:
            fh.write("phase,mean_mm,max_mm\n")
            for j, (e, t) in enumerate(zip(est, tru)):
                mean_mm, max_mm = endpoint_error(e, t, ep_mask)
                fh.write(f"{j},{mean_mm!r},{max_mm!r}\n")
        files.append("endpoint.csv")

    mean_dice = float(np.mean([r.dice for r in rows])) if rows else float("nan")
    print(f"evaluate: {len(rows)} overlap rows, mean DICE {mean_dice:.4f}")
    return files


def cmd_animate(cfg, out_dir, seed, args):
    inputs = _section(cfg, "inputs", _INPUT_KEYS)
    model_path = args.model or inputs.get("model")
    volume_path = args.volume or inputs.get("volume")
    signal_path = args.signal or inputs.get("signal")
    for what, val in (("model", model_path), ("volume", volume_path), ("signal", signal_path)):
        if not val:
            raise ValidationError(f"animate needs a {what} path (--{what} or inputs.{what})")
    model = load_model(model_path)
    volume = read_volume(volume_path)
    signal = derive_signal(load_signal(signal_path))
    volume.domain.require_compatible(model.domain, "animate volume vs model")

    os.makedirs(out_dir, exist_ok=True)
    files = []
    for i in range(len(signal)):
        field = evaluate_model(model, float(signal.v[i]), float(signal.vprime[i]))
        frame = warp_volume(volume, field)
        name = f"frame_{i:03d}.mhd"
        write_volume(frame, os.path.join(out_dir, name))
        files.extend([name, name[:-4] + ".raw"])
        png = f"slice_{i:03d}.pgm"
        write_pgm(os.path.join(out_dir, png), render_coronal_slice(frame, field))
        files.append(png)
    print(f"animate: {len(signal)} frames from {os.path.basename(str(model_path))}")
    return files


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="respmotion",
        description="Respiratory motion modelling: phantom data, registration, "
        "surrogate model fitting, inter-patient transfer, evaluation.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML configuration file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="random seed (wins over config)")
    common.add_argument("--threads", type=int, help="thread cap (wins over config and env)")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("phantom", parents=[common], help="generate the analytic breathing phantom")
    sub.add_parser("register", parents=[common], help="register two volumes")
    sub.add_parser("fit", parents=[common], help="fit a motion model to phase fields")
    sub.add_parser("transfer", parents=[common], help="transfer a 4D motion model to a static scan")
    sub.add_parser("evaluate", parents=[common], help="overlap and endpoint-error metrics")
    anim = sub.add_parser("animate", parents=[common], help="animate a volume with a motion model")
    anim.add_argument("--model", help="motion model file")
    anim.add_argument("--volume", help="volume to animate (.mhd)")
    anim.add_argument("--signal", help="breathing signal CSV")
    return parser


def _run(args) -> int:
    cfg = _load_config(args.config)
    seed = _resolve_seed(args, cfg)
    threads = _resolve_threads(args, cfg)
    out_dir = _resolve_out(args, cfg)

    if args.command == "phantom":
        files = cmd_phantom(cfg, out_dir, seed)
    elif args.command == "register":
        files = cmd_register(cfg, out_dir, seed)
    elif args.command == "fit":
        files = cmd_fit(cfg, out_dir, seed)
    elif args.command == "transfer":
        files = cmd_transfer(cfg, out_dir, seed)
    elif args.command == "evaluate":
        files = cmd_evaluate(cfg, out_dir, seed)
    elif args.command == "animate":
        files = cmd_animate(cfg, out_dir, seed, args)
    else:  # pragma: no cover - argparse enforces the choices
        raise ValidationError(f"unknown command {args.command!r}")

    _write_run_records(out_dir, args.command, cfg, seed, threads, files)
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _run(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        cause = exc.__cause__
        if isinstance(cause, ValidationError):
            return 2
        if isinstance(cause, OSError):
            return 4
        return 3
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
