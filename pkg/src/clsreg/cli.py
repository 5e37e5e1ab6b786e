"""Command-line entry point: ``clsreg {train,infer,warp,generate,synth,bench}``.

Settings resolve as defaults < ``--config`` JSON < ``--set key=value`` < explicit
flags, and the effective values are written into every output's provenance.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from clsreg import __version__
from clsreg.cpd import CpdConfig, CpdError
from clsreg.geometry import voxel_downsample
from clsreg.grasp import GraspAnnotation, warp_grasp
from clsreg.inference import InferenceConfig, InferenceError, infer, result_from_json
from clsreg.io import FormatError, dump_json, load_json, read_cloud, write_cloud
from clsreg.shape_space import CategoryModel, TrainingError, decode, train_category

log = logging.getLogger("clsreg")

EXIT_OK, EXIT_USAGE, EXIT_TRAIN, EXIT_NONCONVERGED, EXIT_TRIALS = 0, 2, 3, 4, 5
CLOUD_SUFFIXES = (".ply", ".csv")


class UsageError(Exception):
    """Bad input detected before any computation (exit status 2)."""


def default_settings() -> dict:
    return {"cpd": CpdConfig().to_json(), "inference": InferenceConfig().to_json(), "seed": 0,
            "threads": os.cpu_count() or 1}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _merge(settings: dict, overrides: dict, where: str) -> None:
    for key, val in overrides.items():
        if key not in settings:
            raise UsageError(f"{where}: unknown setting {key!r}")
        if isinstance(settings[key], dict):
            if not isinstance(val, dict):
                raise UsageError(f"{where}: setting {key!r} expects an object")
            _merge(settings[key], val, f"{where}.{key}")
        else:
            settings[key] = val


def _apply_set(settings: dict, pairs) -> None:
    for pair in pairs or []:
        key, sep, raw = pair.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        nested = _parse_value(raw)
        for part in reversed(key.split(".")):
            nested = {part: nested}
        _merge(settings, nested, "--set")


def resolve_settings(args) -> dict:
    """Effective settings after config file, ``--set`` pairs and flags."""
    settings = default_settings()
    if getattr(args, "config", None):
        _merge(settings, _load_json_arg(args.config, "--config"), "config")
    _apply_set(settings, getattr(args, "set", None))
    flag_map = {"beta": ("cpd", "beta"), "lam": ("cpd", "lambda"), "omega": ("cpd", "omega"),
                "sigma2": ("inference", "sigma2")}
    for attr, (section, key) in flag_map.items():
        val = getattr(args, attr, None)
        if val is not None:
            settings[section][key] = val
    if getattr(args, "literal_eq12", False):
        settings["inference"]["energy_direction"] = "canonical-outer"
    if getattr(args, "seed", None) is not None:
        settings["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        settings["threads"] = args.threads
    try:
        CpdConfig.from_json(settings["cpd"])
        InferenceConfig.from_json(settings["inference"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid settings: {exc}") from exc
    if not isinstance(settings["threads"], int) or settings["threads"] < 1:
        raise UsageError("threads must be a positive integer")
    return settings


def _load_json_arg(path, flag: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: file not found: {p}")
    try:
        return load_json(p)
    except FormatError as exc:
        raise UsageError(str(exc)) from exc


def _require_file(path, flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: file not found: {p}")
    return p


def _require_output(path, flag: str = "--output") -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if p.parent and not p.parent.exists():
        raise UsageError(f"{flag}: directory {p.parent} does not exist")
    return p


def _load_model(path) -> CategoryModel:
    p = _require_file(path, "--model")
    try:
        return CategoryModel.from_json(load_json(p))
    except (FormatError, KeyError, ValueError) as exc:
        raise UsageError(f"{p}: not a valid category model ({exc})") from exc


def _read_cloud(path, flag: str = "--input") -> np.ndarray:
    p = _require_file(path, flag)
    try:
        return read_cloud(p)
    except FormatError as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------- subcommands

def cmd_train(args) -> int:
    src = Path(args.input) if args.input else None
    if src is None or not src.is_dir():
        raise UsageError(f"--input must be a directory of training clouds, got {args.input}")
    paths = sorted(p for p in src.iterdir() if p.suffix.lower() in CLOUD_SUFFIXES)
    if len(paths) < 2:
        raise UsageError(f"{src}: need at least two .ply/.csv clouds, found {len(paths)}")
    out = _require_output(args.output)
    canonical = args.canonical
    if canonical != "auto":
        try:
            canonical = int(canonical)
        except ValueError:
            raise UsageError(f"--canonical must be 'auto' or an index, got {canonical!r}") from None
        if not 0 <= canonical < len(paths):
            raise UsageError(f"--canonical {canonical} out of range for {len(paths)} clouds")
    settings = resolve_settings(args)
    clouds = [_read_cloud(p, "training cloud") for p in paths]
    try:
        model = train_category(clouds, canonical=canonical, cfg=CpdConfig.from_json(settings["cpd"]),
                               labels=[p.stem for p in paths], seed=settings["seed"],
                               threads=settings["threads"])
    except (TrainingError, CpdError) as exc:
        print(f"error: training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    model.provenance["settings"] = {k: settings[k] for k in ("cpd", "seed", "threads")}
    model.provenance["inputs"] = [p.name for p in paths]
    dump_json(out, model.to_json())
    print(f"canonical: {model.provenance['canonical_label']}")
    print(f"latent dimension q = {model.latent_dim}")
    print(f"explained variance = {model.explained_variance:.4f}")
    for label, res in zip(model.labels, model.residuals):
        print(f"  residual {label}: {res:.6g}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model = _load_model(args.model)
    obs = _read_cloud(args.input)
    prefix = _require_output(args.output)
    settings = resolve_settings(args)
    cfg = InferenceConfig.from_json(settings["inference"])
    try:
        result = infer(model, obs, cfg)
    except (InferenceError, ValueError) as exc:
        print(f"error: inference failed: {exc}", file=sys.stderr)
        return EXIT_USAGE
    doc = result.to_json()
    doc["provenance"] = {"inference": cfg.to_json(), "model": Path(args.model).name,
                         "input": Path(args.input).name}
    write_cloud(prefix.with_suffix(".ply"), result.deformed)
    dump_json(prefix.with_suffix(".json"), doc)
    trace = result.energy_trace
    print(f"energy {trace[0]:.6g} -> {trace[-1]:.6g} in {result.iterations} iterations "
          f"({'converged' if result.converged else 'NOT converged'})")
    print(f"wall time {result.wall_time:.2f} s")
    if not result.converged and not args.allow_nonconverged:
        print("error: inference did not converge (use --allow-nonconverged to accept)",
              file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_warp(args) -> int:
    model = _load_model(args.model)
    res_doc = _load_json_arg(_require_file(args.result, "--result"), "--result")
    ann_doc = _load_json_arg(_require_file(args.annotation, "--annotation"), "--annotation")
    out = _require_output(args.output)
    try:
        result = result_from_json(model, res_doc)
        annotation = GraspAnnotation.from_json(ann_doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid result or annotation: {exc}") from exc
    if not result.converged and not args.allow_nonconverged:
        print("error: inference result is not converged (use --allow-nonconverged)", file=sys.stderr)
        return EXIT_NONCONVERGED
    warped = warp_grasp(annotation, result)
    warped.provenance["model"] = Path(args.model).name
    warped.provenance["result"] = Path(args.result).name
    dump_json(out, warped.to_json())
    print(f"warped {len(warped.poses)} pose(s) -> {out}")
    return EXIT_OK


def cmd_generate(args) -> int:
    model = _load_model(args.model)
    out = _require_output(args.output)
    settings = resolve_settings(args)
    if args.latent is not None:
        try:
            x = np.array([float(v) for v in args.latent.split(",") if v.strip()])
        except ValueError:
            raise UsageError(f"--latent must be comma-separated numbers, got {args.latent!r}") from None
        if x.shape != (model.latent_dim,):
            raise UsageError(f"--latent has {x.size} values, model expects q={model.latent_dim}")
    else:
        rng = np.random.default_rng(settings["seed"])
        x = rng.normal(size=model.latent_dim) * model.latent_sd
    write_cloud(out, decode(model, x).deformed_template)
    print("latent: " + ",".join(repr(float(v)) for v in x))
    return EXIT_OK


def cmd_synth(args) -> int:
    from clsreg.shapes import generate_family, get_family

    try:
        spec = get_family(args.family)
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    if args.count < 1:
        raise UsageError("--count must be positive")
    if args.output is None:
        raise UsageError("--output is required")
    out = Path(args.output)
    settings = resolve_settings(args)
    out.mkdir(parents=True, exist_ok=True)
    clouds, params = generate_family(spec, args.count, settings["seed"], n_points=args.samples)
    for i, (c, p) in enumerate(zip(clouds, params)):
        if args.leaf:
            c = voxel_downsample(c, args.leaf)
        write_cloud(out / f"{spec.name}_{i:02d}.ply", c)
    dump_json(out / "params.json", {"family": spec.name, "seed": settings["seed"],
                                    "leaf": args.leaf, "instances": params})
    print(f"wrote {len(clouds)} {spec.name} instance(s) to {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from clsreg.bench import ExperimentPlan, aggregate, run_plan, write_outputs

    if args.input and args.config:
        raise UsageError("bench reads its plan from --input or --config, not both")
    plan_path = args.input or args.config
    if args.output is None:
        raise UsageError("--output is required")
    # the plan is this subcommand's config: defaults < plan file < --set < flags
    d = ExperimentPlan().to_json()
    if plan_path:
        _merge(d, _load_json_arg(plan_path, "--input"), "plan")
    _apply_set(d, args.set)
    for attr, key in (("beta", "beta"), ("lam", "lambda"), ("omega", "omega")):
        if getattr(args, attr) is not None:
            d["cpd"][key] = getattr(args, attr)
    if args.sigma2 is not None:
        d["inference"]["sigma2"] = args.sigma2
    if args.literal_eq12:
        d["inference"]["energy_direction"] = "canonical-outer"
    if args.seed is not None:
        d["seed"] = args.seed
    if args.threads is not None:
        d["threads"] = args.threads
    try:
        plan = ExperimentPlan.from_json(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid plan: {exc}") from exc
    records = run_plan(plan)
    summary = aggregate(records)
    written = write_outputs(args.output, plan, records, summary, figures=not args.no_figures)
    failed = sum(r.status != "ok" for r in records)
    for row in summary:
        print(f"{row.visibility:7s} noise={row.noise:<5g} trans={row.translation:<5g} "
              f"angle={row.angle:<7.4g} {row.method}: {row.mean:.6g} +- {row.sd:.3g} (n={row.n})")
    print(f"{len(records)} trial(s), {failed} failed; outputs: {', '.join(p.name for p in written)}")
    return EXIT_TRIALS if failed else EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="random seed (default 0)")
    common.add_argument("--threads", type=int, help="worker count (default: logical cores)")
    common.add_argument("--config", help="JSON settings file {cpd: {...}, inference: {...}, seed, threads}")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one setting, e.g. inference.gtol=1e-7 (repeatable)")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging")

    cpd_flags = argparse.ArgumentParser(add_help=False)
    cpd_flags.add_argument("--beta", type=float, help="CPD kernel width (default 1)")
    cpd_flags.add_argument("--lambda", dest="lam", type=float, help="CPD regularization weight (default 3)")
    cpd_flags.add_argument("--omega", type=float, help="CPD outlier weight in [0, 1) (default 0.1)")

    inf_flags = argparse.ArgumentParser(add_help=False)
    inf_flags.add_argument("--sigma2", type=float, help="inference mixture variance (default (0.05*diag)^2)")
    inf_flags.add_argument("--literal-eq12", action="store_true",
                           help="score canonical points against the observation instead of the reverse")
    inf_flags.add_argument("--allow-nonconverged", action="store_true",
                           help="accept non-converged inference results (exit 0 instead of 4)")

    parser = argparse.ArgumentParser(
        prog="clsreg", description="Category-level non-rigid registration with a learned latent space.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common, cpd_flags], help="build a category model")
    p.add_argument("--input", help="directory of training clouds (.ply/.csv, sorted by name)")
    p.add_argument("--output", help="model JSON to write")
    p.add_argument("--canonical", default="auto", help="'auto' or index of the canonical cloud")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common, inf_flags], help="fit a model to an observation")
    p.add_argument("--model", help="model JSON")
    p.add_argument("--input", help="observed cloud (.ply/.csv)")
    p.add_argument("--output", help="output prefix; writes PREFIX.ply and PREFIX.json")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("warp", parents=[common], help="transfer grasp poses to a fitted instance")
    p.add_argument("--model", help="model JSON")
    p.add_argument("--result", help="inference result JSON written by 'infer'")
    p.add_argument("--annotation", help="grasp annotation JSON in canonical coordinates")
    p.add_argument("--output", help="warped annotation JSON to write")
    p.add_argument("--allow-nonconverged", action="store_true",
                   help="warp even if the inference result is not converged")
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("generate", parents=[common], help="decode a latent vector into a shape")
    p.add_argument("--model", help="model JSON")
    p.add_argument("--latent", help="comma-separated latent vector; write --latent=-1,2 for negative leading values "
                   "(default: random from --seed)")
    p.add_argument("--output", help="cloud to write (.ply/.csv)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("synth", parents=[common], help="write synthetic training instances")
    p.add_argument("--family", default="mug", help="shape family (mug, drill)")
    p.add_argument("--count", type=int, default=10, help="number of instances (first is nominal)")
    p.add_argument("--samples", type=int, default=3000, help="surface samples before downsampling")
    p.add_argument("--leaf", type=float, default=0.06, help="voxel leaf (0 disables downsampling)")
    p.add_argument("--output", help="directory to write into")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", parents=[common, cpd_flags, inf_flags], help="run an experiment plan")
    p.add_argument("--input", help="plan JSON (default: the desk-scale plan)")
    p.add_argument("--output", help="directory for CSV/JSON reports and figures")
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
