"""Synthetic parametric shape families used as training and test corpora.

Two families share the topology of real object categories:

* ``mug``: open-top cylinder with a bottom cap and a half-torus handle on +x.
* ``drill``: horizontal body cylinder (capped) along x and a handle cylinder
  hanging down along -z.

Every family is expressed in its canonical frame (body axis up, handle to
the right) and divided by the bounding-box diagonal of its nominal instance,
so the nominal instance has diagonal 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ParamRange:
    low: float
    nominal: float
    high: float

    def __post_init__(self):
        if not self.low <= self.nominal <= self.high or self.low == self.high:
            raise ValueError(f"invalid parameter range {self}")


@dataclass(frozen=True)
class CategorySpec:
    name: str
    params: dict[str, ParamRange]
    n_points: int = 2000

    def nominal(self) -> dict[str, float]:
        return {k: r.nominal for k, r in self.params.items()}

    def validate(self, params: dict[str, float]) -> dict[str, float]:
        unknown = set(params) - set(self.params)
        if unknown:
            raise ValueError(f"unknown parameters for {self.name}: {sorted(unknown)}")
        full = self.nominal()
        full.update(params)
        for k, v in full.items():
            r = self.params[k]
            if not r.low <= v <= r.high:
                raise ValueError(f"{self.name}.{k}={v} outside [{r.low}, {r.high}]")
        return full

    def sample_params(self, rng: np.random.Generator) -> dict[str, float]:
        return {k: float(rng.uniform(r.low, r.high)) for k, r in sorted(self.params.items())}


MUG = CategorySpec(
    "mug",
    {
        "body_radius": ParamRange(0.28, 0.36, 0.46),
        "height": ParamRange(0.70, 0.90, 1.10),
        "handle_radius": ParamRange(0.16, 0.22, 0.28),
        "handle_thickness": ParamRange(0.035, 0.05, 0.07),
        "handle_height": ParamRange(-0.08, 0.0, 0.08),
        "scale": ParamRange(0.80, 1.0, 1.25),
    },
)

DRILL = CategorySpec(
    "drill",
    {
        "body_length": ParamRange(0.70, 0.85, 1.00),
        "body_radius": ParamRange(0.11, 0.14, 0.18),
        "handle_length": ParamRange(0.45, 0.55, 0.70),
        "handle_radius": ParamRange(0.07, 0.09, 0.12),
        "handle_offset": ParamRange(-0.10, 0.0, 0.15),
        "scale": ParamRange(0.80, 1.0, 1.25),
    },
)

FAMILIES = {"mug": MUG, "drill": DRILL}


def get_family(name: str) -> CategorySpec:
    try:
        return FAMILIES[name]
    except KeyError:
        raise ValueError(f"unknown family {name!r}; choose from {sorted(FAMILIES)}") from None


# ---------------------------------------------------------------------------
# primitive surface samplers; each takes (rng, n) and returns (n, 3)


@dataclass
class Face:
    name: str
    area: float
    sampler: object = field(repr=False)


def _cylinder_side(center, axis, radius, length):
    """Lateral surface of a cylinder starting at ``center`` and extending along ``axis``."""
    axis = np.asarray(axis, dtype=float)
    u, v = _orthonormal_pair(axis)

    def sample(rng, n):
        theta = rng.uniform(0, 2 * math.pi, n)
        s = rng.uniform(0, length, n)
        return (np.asarray(center) + s[:, None] * axis
                + radius * (np.cos(theta)[:, None] * u + np.sin(theta)[:, None] * v))

    return 2 * math.pi * radius * length, sample


def _disk(center, normal, radius):
    u, v = _orthonormal_pair(np.asarray(normal, dtype=float))

    def sample(rng, n):
        r = radius * np.sqrt(rng.uniform(0, 1, n))
        theta = rng.uniform(0, 2 * math.pi, n)
        return np.asarray(center) + r[:, None] * (np.cos(theta)[:, None] * u + np.sin(theta)[:, None] * v)

    return math.pi * radius**2, sample


def _half_torus_xz(center, major, minor):
    """Half torus in the xz-plane bulging towards +x (the mug handle)."""
    center = np.asarray(center, dtype=float)

    def sample(rng, n):
        out = np.empty((0, 3))
        while len(out) < n:
            m = 2 * (n - len(out)) + 16
            phi = rng.uniform(-math.pi / 2, math.pi / 2, m)
            tube = rng.uniform(0, 2 * math.pi, m)
            # area element is proportional to (major + minor*cos(tube))
            keep = rng.uniform(0, major + minor, m) < major + minor * np.cos(tube)
            phi, tube = phi[keep], tube[keep]
            ring = major + minor * np.cos(tube)
            pts = np.stack([ring * np.cos(phi), minor * np.sin(tube), ring * np.sin(phi)], axis=1)
            out = np.vstack([out, center + pts])
        return out[:n]

    return 2 * math.pi**2 * major * minor, sample


def _orthonormal_pair(axis):
    axis = axis / np.linalg.norm(axis)
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(axis, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(axis, u)


def _mug_faces(p):
    r, h = p["body_radius"], p["height"]
    R, a = p["handle_radius"], p["handle_thickness"]
    zc = p["handle_height"]
    return [
        Face("body", *_cylinder_side((0, 0, -h / 2), (0, 0, 1), r, h)),
        Face("bottom", *_disk((0, 0, -h / 2), (0, 0, -1), r)),
        Face("handle", *_half_torus_xz((r, 0, zc), R, a)),
    ]


def _mug_bbox(p):
    r, h = p["body_radius"], p["height"]
    R, a, zc = p["handle_radius"], p["handle_thickness"], p["handle_height"]
    lo = np.array([-r, -max(r, a), min(-h / 2, zc - R - a)])
    hi = np.array([r + R + a, max(r, a), max(h / 2, zc + R + a)])
    return lo, hi


def _drill_faces(p):
    lb, rb = p["body_length"], p["body_radius"]
    lh, rh, off = p["handle_length"], p["handle_radius"], p["handle_offset"]
    return [
        Face("body", *_cylinder_side((-lb / 2, 0, 0), (1, 0, 0), rb, lb)),
        Face("body_front", *_disk((lb / 2, 0, 0), (1, 0, 0), rb)),
        Face("body_back", *_disk((-lb / 2, 0, 0), (-1, 0, 0), rb)),
        Face("handle", *_cylinder_side((off, 0, -rb), (0, 0, -1), rh, lh)),
        Face("handle_cap", *_disk((off, 0, -rb - lh), (0, 0, -1), rh)),
    ]


def _drill_bbox(p):
    lb, rb = p["body_length"], p["body_radius"]
    lh, rh, off = p["handle_length"], p["handle_radius"], p["handle_offset"]
    lo = np.array([min(-lb / 2, off - rh), -rb, -rb - lh])
    hi = np.array([max(lb / 2, off + rh), rb, rb])
    return lo, hi


_BUILDERS = {"mug": (_mug_faces, _mug_bbox), "drill": (_drill_faces, _drill_bbox)}


def family_unit(spec: CategorySpec) -> float:
    """Length of the nominal instance's bounding-box diagonal (before normalization)."""
    lo, hi = _BUILDERS[spec.name][1](spec.nominal())
    return float(np.linalg.norm(hi - lo))


def instance_faces(spec: CategorySpec, params: dict[str, float]) -> list[Face]:
    """Faces of the un-normalized, un-scaled parametric shape."""
    return _BUILDERS[spec.name][0](spec.validate(params))


def allocate_counts(areas, n: int) -> np.ndarray:
    """Split ``n`` samples across faces proportionally to area (largest remainder)."""
    areas = np.asarray(areas, dtype=float)
    exact = n * areas / areas.sum()
    counts = np.floor(exact).astype(int)
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[: n - counts.sum()]] += 1
    return counts


def generate_instance(spec: CategorySpec, params: dict[str, float] | None = None, seed=0,
                      n_points: int | None = None) -> np.ndarray:
    """Uniform surface samples of one family member in the canonical frame."""
    full = spec.validate(params or {})
    n = spec.n_points if n_points is None else n_points
    faces = instance_faces(spec, full)
    counts = allocate_counts([f.area for f in faces], n)
    rng = np.random.default_rng(seed)
    pts = np.vstack([f.sampler(rng, c) for f, c in zip(faces, counts) if c > 0])
    return pts * (full["scale"] / family_unit(spec))


def generate_family(spec: CategorySpec, count: int, seed, n_points: int | None = None,
                    include_nominal: bool = True) -> tuple[list[np.ndarray], list[dict[str, float]]]:
    """``count`` instances; the first is the nominal member when ``include_nominal``."""
    rng = np.random.default_rng(seed)
    clouds, params = [], []
    for i in range(count):
        p = spec.nominal() if (i == 0 and include_nominal) else spec.sample_params(rng)
        params.append(p)
        clouds.append(generate_instance(spec, p, seed=int(rng.integers(2**31)), n_points=n_points))
    return clouds, params
