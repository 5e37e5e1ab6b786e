"""Noise / misalignment / occlusion sweeps comparing latent-space inference (CLS)
against plain CPD registration of the canonical shape.

A plan trains one category model, then for every held-out instance, condition
and view builds a perturbed observation, fits it with each method and scores
the result against the noiseless, fully observed instance.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from clsreg.cpd import CpdConfig, cpd_register
from clsreg.geometry import (
    MISALIGNMENT_ANGLES,
    NOISE_TRANSLATION_FACTORS,
    add_noise,
    apply_rigid,
    chamfer_error,
    nearest_distances,
    sample_misalignment,
    visible_mask,
    voxel_downsample,
)
from clsreg.inference import InferenceConfig, LatentShapeModel, infer
from clsreg.shape_space import CategoryModel, train_category
from clsreg.shapes import generate_family, get_family

log = logging.getLogger(__name__)

METHODS = ("CLS", "CPD")


def default_views(n: int) -> list[list[float]]:
    """``n`` viewing directions on a ring 20 degrees above the horizon, starting behind the handle."""
    elev = math.radians(20.0)
    out = []
    for k in range(n):
        az = math.pi + 2 * math.pi * k / n
        out.append([round(math.cos(elev) * math.cos(az), 12), round(math.cos(elev) * math.sin(az), 12),
                    round(math.sin(elev), 12)])
    return out


@dataclass
class ExperimentPlan:
    family: str = "mug"
    n_train: int = 10
    n_test: int = 4
    samples_per_instance: int = 3000
    leaf: float = 0.06
    noise_factors: list[float] = field(default_factory=lambda: [0.0, *NOISE_TRANSLATION_FACTORS])
    misalignments: list[list[float]] = field(
        default_factory=lambda: [[f, a] for f, a in zip(NOISE_TRANSLATION_FACTORS, MISALIGNMENT_ANGLES)])
    visibilities: list[str] = field(default_factory=lambda: ["full", "partial"])
    views: list[list[float]] = field(default_factory=lambda: default_views(3))
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    seed: int = 0
    canonical: int | str = 0
    cpd: dict = field(default_factory=lambda: CpdConfig().to_json())
    inference: dict = field(default_factory=lambda: InferenceConfig().to_json())
    threads: int = 1

    def __post_init__(self):
        if self.n_train < 2 or self.n_test < 1:
            raise ValueError("plan needs >= 2 training and >= 1 test instances")
        for name in ("noise_factors", "visibilities", "methods"):
            if not getattr(self, name):
                raise ValueError(f"plan field {name!r} must be non-empty")
        if "partial" in self.visibilities and not self.views:
            raise ValueError("partial visibility requested without view directions")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")
        if set(self.visibilities) - {"full", "partial"}:
            raise ValueError("visibilities must be 'full' and/or 'partial'")
        for f, a in self.misalignments:
            if f not in NOISE_TRANSLATION_FACTORS or not any(
                    math.isclose(a, b) for b in MISALIGNMENT_ANGLES):
                log.warning("misalignment (%g, %g) is outside the reference protocol lists", f, a)
        CpdConfig.from_json(self.cpd)
        InferenceConfig.from_json(self.inference)

    @classmethod
    def from_json(cls, d: dict) -> ExperimentPlan:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown plan keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> dict:
        return asdict(self)

    def conditions(self) -> list[tuple[str, float, float, float]]:
        """``(visibility, noise, translation, angle)`` tuples, without duplicates."""
        out = []
        for vis in self.visibilities:
            for nz in self.noise_factors:
                out.append((vis, float(nz), 0.0, 0.0))
            for f, a in self.misalignments:
                out.append((vis, 0.0, float(f), float(a)))
        seen, unique = set(), []
        for c in out:
            if c not in seen:
                seen.add(c)
                unique.append(c)
        return unique


@dataclass
class TrialRecord:
    instance: int
    visibility: str
    view: int
    noise: float
    translation: float
    angle: float
    method: str
    error: float
    coverage: float
    converged: bool
    seed: int
    status: str = "ok"
    message: str = ""
    wall_time: float = 0.0

    @property
    def condition(self) -> tuple:
        return (self.visibility, self.noise, self.translation, self.angle)

    def sort_key(self) -> tuple:
        return (*self.condition, self.method, self.instance, self.view)


RECORD_COLUMNS = ["instance", "visibility", "view", "noise", "translation", "angle", "method",
                  "error", "coverage", "converged", "seed", "status", "message"]
SUMMARY_COLUMNS = ["visibility", "noise", "translation", "angle", "method", "mean", "sd", "n"]
UNITS_NOTE = ("lengths and noise/translation factors are relative to the nominal instance's "
              "bounding-box diagonal (= 1); errors are mean squared distances in those units")


@dataclass
class SummaryRow:
    visibility: str
    noise: float
    translation: float
    angle: float
    method: str
    mean: float
    sd: float
    n: int


def occluded_coverage(completed, truth, visible, leaf: float) -> float:
    """Share of hidden ground-truth points with a completed point within two voxel leafs."""
    hidden = truth[~visible]
    if len(hidden) == 0:
        return float("nan")
    return float(np.mean(nearest_distances(hidden, completed) <= 2.0 * leaf))


@dataclass
class _Prepared:
    plan: ExperimentPlan
    model: CategoryModel
    tests: list[np.ndarray]


_WORKER: dict = {}


def prepare(plan: ExperimentPlan) -> _Prepared:
    """Generate the family, train the model and return held-out test clouds."""
    spec = get_family(plan.family)
    clouds, _ = generate_family(spec, plan.n_train + plan.n_test, plan.seed,
                                n_points=plan.samples_per_instance)
    clouds = [voxel_downsample(c, plan.leaf) for c in clouds]
    train, tests = clouds[:plan.n_train], clouds[plan.n_train:]
    model = train_category(train, canonical=plan.canonical, cfg=CpdConfig.from_json(plan.cpd),
                           labels=[f"{plan.family}_{i}" for i in range(plan.n_train)],
                           seed=plan.seed, threads=plan.threads)
    return _Prepared(plan, model, tests)


def _trial_seed(plan_seed: int, instance: int, cond_index: int, view: int) -> int:
    ss = np.random.SeedSequence([plan_seed, instance, cond_index, view + 1])
    return int(ss.generate_state(1)[0])


def build_observation(truth, condition, view_dir, seed: int):
    """Return ``(observation, ground_truth_in_observed_frame, visible_mask)``."""
    vis, noise, trans, angle = condition
    if vis == "partial":
        mask = visible_mask(truth, view_dir)
        if not mask.any():
            raise ValueError("partial view is empty")
    else:
        mask = np.ones(len(truth), dtype=bool)
    obs = add_noise(truth[mask], noise, seed)
    gt = truth
    if trans or angle:
        tf = sample_misalignment(trans, angle, seed + 1)
        obs = apply_rigid(obs, tf)
        gt = apply_rigid(truth, tf)
    return obs, gt, mask


def run_trial(prep: _Prepared, sm: LatentShapeModel | None, instance: int, cond_index: int,
              condition, view: int, method: str) -> TrialRecord:
    plan = prep.plan
    seed = _trial_seed(plan.seed, instance, cond_index, view)
    vis, noise, trans, angle = condition
    rec = TrialRecord(instance, vis, view, noise, trans, angle, method, float("nan"), float("nan"),
                      False, seed)
    start = time.perf_counter()
    try:
        truth = prep.tests[instance]
        view_dir = plan.views[view] if vis == "partial" else None
        obs, gt, mask = build_observation(truth, condition, view_dir, seed)
        if method == "CLS":
            res = infer(prep.model, obs, InferenceConfig.from_json(plan.inference), shape_model=sm)
            completed, rec.converged = res.deformed, res.converged
        else:
            # same beta, lambda, omega as training
            fld = cpd_register(prep.model.canonical, obs, CpdConfig.from_json(plan.cpd))
            completed, rec.converged = fld.deformed_template, fld.converged
        rec.error = chamfer_error(completed, gt)
        if vis == "partial":
            rec.coverage = occluded_coverage(completed, gt, mask, plan.leaf)
    except Exception as exc:  # recorded, the sweep continues
        rec.status = "error"
        rec.message = f"{type(exc).__name__}: {exc}"
        log.error("trial %s failed: %s", rec.sort_key(), rec.message)
    rec.wall_time = time.perf_counter() - start
    return rec


def _jobs(plan: ExperimentPlan, n_tests: int):
    for ci, cond in enumerate(plan.conditions()):
        views = range(len(plan.views)) if cond[0] == "partial" else [-1]
        for inst in range(n_tests):
            for v in views:
                for method in plan.methods:
                    yield inst, ci, cond, v, method


def _worker_init(prep):
    _WORKER["prep"] = prep
    _WORKER["sm"] = LatentShapeModel(prep.model)


def _worker_run(job):
    return run_trial(_WORKER["prep"], _WORKER["sm"], *job)


def run_plan(plan: ExperimentPlan, prepared: _Prepared | None = None) -> list[TrialRecord]:
    """Run every (instance, condition, view, method) trial; failures are recorded, not raised."""
    prep = prepared or prepare(plan)
    jobs = list(_jobs(plan, len(prep.tests)))
    log.info("running %d trials with %d worker(s)", len(jobs), plan.threads)
    if plan.threads > 1:
        with ProcessPoolExecutor(plan.threads, initializer=_worker_init, initargs=(prep,)) as pool:
            records = list(pool.map(_worker_run, jobs, chunksize=1))
    else:
        sm = LatentShapeModel(prep.model)
        records = [run_trial(prep, sm, *job) for job in jobs]
    return sorted(records, key=TrialRecord.sort_key)


def aggregate(records) -> list[SummaryRow]:
    """Mean/sd per (condition, method): errors are averaged over views first, then over instances."""
    groups: dict[tuple, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    counts: dict[tuple, int] = defaultdict(int)
    for r in records:
        if r.status != "ok":
            continue
        key = (*r.condition, r.method)
        groups[key][r.instance].append(r.error)
        counts[key] += 1
    rows = []
    for key in sorted(groups):
        per_instance = [float(np.mean(v)) for _, v in sorted(groups[key].items())]
        rows.append(SummaryRow(*key, float(np.mean(per_instance)), float(np.std(per_instance)),
                               counts[key]))
    return rows


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    return str(v)


def records_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    for r in records:
        w.writerow([_fmt(getattr(r, c)) for c in RECORD_COLUMNS])
    return buf.getvalue()


def summary_to_csv(summary) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for row in summary:
        w.writerow([_fmt(getattr(row, c)) for c in SUMMARY_COLUMNS])
    return buf.getvalue()


def summary_to_json(summary) -> str:
    doc = {"columns": SUMMARY_COLUMNS, "rows": [asdict(r) for r in summary], "units": UNITS_NOTE}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def summary_from_json(text: str) -> list[SummaryRow]:
    doc = json.loads(text)
    return [SummaryRow(**r) for r in doc["rows"]]


def emit_report(summary, path, fmt: str = "csv") -> Path:
    """Write the summary table; output bytes depend only on ``summary``."""
    path = Path(path)
    if fmt == "csv":
        text = summary_to_csv(summary)
    elif fmt == "json":
        text = summary_to_json(summary)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    path.write_text(text, encoding="utf-8")
    return path


def write_outputs(out_dir, plan: ExperimentPlan, records, summary, figures: bool = True) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [
        emit_report(summary, out / "summary.csv", "csv"),
        emit_report(summary, out / "summary.json", "json"),
    ]
    (out / "records.csv").write_text(records_to_csv(records), encoding="utf-8")
    (out / "plan.json").write_text(json.dumps(plan.to_json(), indent=2, sort_keys=True) + "\n",
                                   encoding="utf-8")
    # wall-clock times are inherently irreproducible and live apart from the records
    with open(out / "timings.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance", "visibility", "view", "noise", "translation", "angle", "method",
                    "wall_time"])
        for r in records:
            w.writerow([r.instance, r.visibility, r.view, _fmt(r.noise), _fmt(r.translation),
                        _fmt(r.angle), r.method, f"{r.wall_time:.3f}"])
    written += [out / "records.csv", out / "plan.json", out / "timings.csv"]
    if figures:
        from clsreg.plotting import plot_summary

        written += plot_summary(summary, out)
    return written


def default_threads() -> int:
    return os.cpu_count() or 1
