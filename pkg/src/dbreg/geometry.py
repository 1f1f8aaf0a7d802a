"""Point-cloud data model, rigid transforms, sampling primitives, the
synthetic corruption protocol, overlap labeling, and evaluation metrics.

All randomness flows through explicit ``numpy.random.Generator`` instances
so dataset generation is reproducible from a seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GeometryError(Exception):
    pass


ROT_TOL = 1e-9


@dataclass(frozen=True)
class PointCloud:
    """Ordered n x 3 coordinates in unit-sphere-normalized model units."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise GeometryError(f"point cloud must be (n>=1, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class RigidTransform:
    """Rotation R in SO(3) plus translation t."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise GeometryError("R must be 3x3")
        if np.abs(R.T @ R - np.eye(3)).max() > ROT_TOL:
            raise GeometryError("R is not orthonormal within tolerance")
        if abs(np.linalg.det(R) - 1.0) > ROT_TOL:
            raise GeometryError("det(R) != +1 within tolerance")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.R.T, -self.R.T @ self.t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.R.T + self.t


@dataclass(frozen=True)
class PairSample:
    """One registration problem: two partial clouds plus the ground truth."""

    source: PointCloud
    target: PointCloud
    gt: RigidTransform
    source_overlap_labels: np.ndarray
    target_overlap_labels: np.ndarray

    def __post_init__(self):
        sl = np.asarray(self.source_overlap_labels, dtype=np.uint8)
        tl = np.asarray(self.target_overlap_labels, dtype=np.uint8)
        if sl.shape != (len(self.source),) or tl.shape != (len(self.target),):
            raise GeometryError("overlap label lengths must match cloud sizes")
        object.__setattr__(self, "source_overlap_labels", sl)
        object.__setattr__(self, "target_overlap_labels", tl)


@dataclass
class ErrorMetrics:
    """Dataset-level aggregates; rotations in degrees."""

    rmse_rot: float
    rmse_trans: float
    mae_rot: float
    mae_trans: float
    iso_rot: float
    iso_trans: float

    def as_dict(self):
        return {
            "rmse_r": self.rmse_rot,
            "rmse_t": self.rmse_trans,
            "mae_r": self.mae_rot,
            "mae_t": self.mae_trans,
            "iso_r": self.iso_rot,
            "iso_t": self.iso_trans,
        }


# -- rotations -------------------------------------------------------------


def euler_zyx_matrix(z_deg: float, y_deg: float, x_deg: float) -> np.ndarray:
    """Rotation from intrinsic Z-Y-X Euler angles (degrees)."""
    az, ay, ax = np.deg2rad([z_deg, y_deg, x_deg])
    cz, sz = np.cos(az), np.sin(az)
    cy, sy = np.cos(ay), np.sin(ay)
    cx, sx = np.cos(ax), np.sin(ax)
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    return rz @ ry @ rx


def matrix_to_euler_zyx(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`euler_zyx_matrix`; returns [z, y, x] in degrees."""
    sy = -R[2, 0]
    sy = min(1.0, max(-1.0, sy))
    y = np.arcsin(sy)
    if abs(sy) < 1.0 - 1e-12:
        x = np.arctan2(R[2, 1], R[2, 2])
        z = np.arctan2(R[1, 0], R[0, 0])
    else:
        # gimbal lock: fold everything into the x rotation
        x = np.arctan2(-R[0, 1], R[1, 1])
        z = 0.0
    return np.rad2deg([z, y, x])


# -- core operations ---------------------------------------------------------


def farthest_point_sample(pc: PointCloud, m: int, start: int = 0) -> np.ndarray:
    """Greedy max-min subset of ``m`` indices, seeded at ``start``.

    Each pick maximizes the minimum distance to everything already picked;
    ties resolve to the lowest index (argmax convention).
    """
    n = len(pc)
    if not 1 <= m <= n:
        raise GeometryError(f"sample count {m} out of range [1, {n}]")
    if not 0 <= start < n:
        raise GeometryError(f"start index {start} out of range")
    pts = pc.points
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start
    mind = np.linalg.norm(pts - pts[start], axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(mind))
        chosen[i] = nxt
        np.minimum(mind, np.linalg.norm(pts - pts[nxt], axis=1), out=mind)
    return chosen


def knn(query: PointCloud, reference: PointCloud, k: int) -> np.ndarray:
    """Indices of the k nearest reference points per query row, ascending
    by distance, ties by lowest index."""
    if not 1 <= k <= len(reference):
        raise GeometryError(f"k={k} out of range [1, {len(reference)}]")
    q, r = query.points, reference.points
    d2 = ((q[:, None, :] - r[None, :, :]) ** 2).sum(axis=2)
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def apply_transform(T: RigidTransform, pc: PointCloud) -> PointCloud:
    return PointCloud(T.apply(pc.points))


def random_transform(rng, max_euler_deg: float = 45.0, max_trans: float = 1.0) -> RigidTransform:
    """Euler angles uniform per axis in +-max_euler_deg, translation
    components uniform in +-max_trans."""
    z, y, x = rng.uniform(-max_euler_deg, max_euler_deg, size=3)
    t = rng.uniform(-max_trans, max_trans, size=3)
    return RigidTransform(euler_zyx_matrix(z, y, x), t)


def crop_partial(pc: PointCloud, keep_ratio: float = 0.7, rng=None):
    """Half-space sweep: keep the ceil(keep_ratio * n) points with the
    highest projection onto a random direction."""
    if not 0 < keep_ratio <= 1:
        raise GeometryError("keep_ratio must be in (0, 1]")
    n = len(pc)
    keep = int(np.ceil(keep_ratio * n))
    if keep >= n:
        return PointCloud(pc.points.copy()), np.arange(n)
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    proj = pc.points @ direction
    order = np.argsort(-proj, kind="stable")
    kept = np.sort(order[:keep])
    return PointCloud(pc.points[kept]), kept


def jitter_gaussian(pc: PointCloud, sigma: float = 0.01, clip: float = 0.05, rng=None) -> PointCloud:
    if sigma < 0 or clip < 0:
        raise GeometryError("sigma and clip must be nonnegative")
    if sigma == 0:
        return PointCloud(pc.points.copy())
    noise = np.clip(rng.normal(0.0, sigma, size=pc.points.shape), -clip, clip)
    return PointCloud(pc.points + noise)


def overlap_labels(X: PointCloud, Y: PointCloud, T_gt: RigidTransform, eps_o: float) -> np.ndarray:
    """1 where the transformed source point has a target neighbor closer
    than ``eps_o``, else 0."""
    if eps_o <= 0:
        raise GeometryError("eps_o must be positive")
    if len(Y) < 1:
        raise GeometryError("target cloud is empty")
    moved = T_gt.apply(X.points)
    d2 = ((moved[:, None, :] - Y.points[None, :, :]) ** 2).sum(axis=2)
    return (np.sqrt(d2.min(axis=1)) < eps_o).astype(np.uint8)


@dataclass
class PairErrors:
    """Raw per-pair errors, later aggregated across a dataset."""

    iso_rot_deg: float
    iso_trans: float
    euler_diff_deg: np.ndarray
    trans_diff: np.ndarray


def pair_errors(gt: RigidTransform, pred: RigidTransform) -> PairErrors:
    rel = gt.R.T @ pred.R
    cos = (np.trace(rel) - 1.0) / 2.0
    iso_rot = np.rad2deg(np.arccos(min(1.0, max(-1.0, cos))))
    iso_trans = float(np.linalg.norm(gt.t - pred.t))
    euler_diff = matrix_to_euler_zyx(pred.R) - matrix_to_euler_zyx(gt.R)
    return PairErrors(float(iso_rot), iso_trans, euler_diff, pred.t - gt.t)


def aggregate_metrics(errors: list[PairErrors]) -> ErrorMetrics:
    eul = np.stack([e.euler_diff_deg for e in errors])
    tra = np.stack([e.trans_diff for e in errors])
    return ErrorMetrics(
        rmse_rot=float(np.sqrt((eul**2).mean())),
        rmse_trans=float(np.sqrt((tra**2).mean())),
        mae_rot=float(np.abs(eul).mean()),
        mae_trans=float(np.abs(tra).mean()),
        iso_rot=float(np.mean([e.iso_rot_deg for e in errors])),
        iso_trans=float(np.mean([e.iso_trans for e in errors])),
    )


# -- synthetic shapes --------------------------------------------------------

SHAPE_KINDS = ("sphere", "box", "cylinder", "torus", "composite")


def _sample_box(n, rng, half):
    a, b, c = half
    areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b]) * 4.0
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    for f in range(6):
        m = faces == f
        axis = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        others = [i for i in range(3) if i != axis]
        pts[m, axis] = sign * half[axis]
        pts[m, others[0]] = u[m, 0] * half[others[0]]
        pts[m, others[1]] = u[m, 1] * half[others[1]]
    return pts


def _sample_cylinder(n, rng, radius, half_height):
    side = 2 * np.pi * radius * (2 * half_height)
    cap = np.pi * radius**2
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.empty((n, 3))
    m = part == 0
    pts[m, 0] = radius * np.cos(theta[m])
    pts[m, 1] = radius * np.sin(theta[m])
    pts[m, 2] = rng.uniform(-half_height, half_height, size=m.sum())
    for p, z in ((1, half_height), (2, -half_height)):
        m = part == p
        r = radius * np.sqrt(rng.uniform(0, 1, size=m.sum()))
        pts[m, 0] = r * np.cos(theta[m])
        pts[m, 1] = r * np.sin(theta[m])
        pts[m, 2] = z
    return pts


def _sample_torus(n, rng, ring_radius, tube_radius):
    # area element goes like (R + r cos v); rejection-sample v
    pts = np.empty((n, 3))
    got = 0
    while got < n:
        cand = rng.uniform(0, 2 * np.pi, size=2 * (n - got))
        keep = rng.uniform(0, 1, size=cand.size) < (ring_radius + tube_radius * np.cos(cand)) / (ring_radius + tube_radius)
        cand = cand[keep][: n - got]
        u = rng.uniform(0, 2 * np.pi, size=cand.size)
        rad = ring_radius + tube_radius * np.cos(cand)
        pts[got : got + cand.size, 0] = rad * np.cos(u)
        pts[got : got + cand.size, 1] = rad * np.sin(u)
        pts[got : got + cand.size, 2] = tube_radius * np.sin(cand)
        got += cand.size
    return pts


def _sample_composite(n, rng, dims):
    """Box body with an off-center cylindrical boss and a corner fin.

    Deliberately has no nontrivial rotational symmetry, so correspondence
    between two independent samplings is unambiguous.
    """
    half = dims["box_half"]
    r = dims["boss_radius"]
    length = dims["boss_length"]
    off = dims["boss_offset"]
    fin = dims["fin_half"]
    fin_center = dims["fin_center"]

    a_box = 8 * (half[0] * half[1] + half[1] * half[2] + half[0] * half[2])
    a_boss = 2 * np.pi * r * length + np.pi * r**2
    a_fin = 8 * (fin[0] * fin[1] + fin[1] * fin[2] + fin[0] * fin[2])
    counts = rng.multinomial(n, np.array([a_box, a_boss, a_fin]) / (a_box + a_boss + a_fin))

    parts = [_sample_box(counts[0], rng, half)]

    nb = counts[1]
    side = 2 * np.pi * r * length
    cap = np.pi * r**2
    which = rng.choice(2, size=nb, p=np.array([side, cap]) / (side + cap))
    theta = rng.uniform(0, 2 * np.pi, size=nb)
    boss = np.empty((nb, 3))
    m = which == 0
    boss[m, 1] = off[0] + r * np.cos(theta[m])
    boss[m, 2] = off[1] + r * np.sin(theta[m])
    boss[m, 0] = half[0] + rng.uniform(0, length, size=m.sum())
    m = which == 1
    rad = r * np.sqrt(rng.uniform(0, 1, size=m.sum()))
    boss[m, 1] = off[0] + rad * np.cos(theta[m])
    boss[m, 2] = off[1] + rad * np.sin(theta[m])
    boss[m, 0] = half[0] + length
    parts.append(boss)

    parts.append(_sample_box(counts[2], rng, fin) + np.asarray(fin_center))
    return np.concatenate(parts, axis=0)


DEFAULT_COMPOSITE_DIMS = {
    "box_half": (0.70, 0.36, 0.20),
    "boss_radius": 0.13,
    "boss_length": 0.55,
    "boss_offset": (0.12, 0.07),
    "fin_half": (0.09, 0.22, 0.04),
    "fin_center": (-0.48, 0.0, 0.24),
}


def _composite_bound(dims) -> float:
    half = np.asarray(dims["box_half"])
    corners = np.linalg.norm(half)
    tip = np.hypot(half[0] + dims["boss_length"],
                   np.linalg.norm(dims["boss_offset"]) + dims["boss_radius"])
    fin = max(np.linalg.norm(np.asarray(dims["fin_center"]) + s * np.asarray(dims["fin_half"]))
              for s in ((1, 1, 1), (1, 1, -1), (1, -1, 1), (1, -1, -1),
                        (-1, 1, 1), (-1, 1, -1), (-1, -1, 1), (-1, -1, -1)))
    return float(max(corners, tip, fin))


def synthesize_shape(kind: str, n: int, rng, dims: dict | None = None) -> PointCloud:
    """Uniform area sampling of a parametric surface, scaled by the shape's
    analytic circumradius so it fits the unit sphere."""
    if kind not in SHAPE_KINDS:
        raise GeometryError(f"unknown shape kind {kind!r}")
    if kind == "sphere":
        v = rng.standard_normal((n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        pts, bound = v, 1.0
    elif kind == "box":
        half = np.asarray((dims or {}).get("half", (1.0, 0.75, 0.5)), dtype=np.float64)
        pts, bound = _sample_box(n, rng, half), np.linalg.norm(half)
    elif kind == "cylinder":
        d = dims or {}
        r, hh = d.get("radius", 0.35), d.get("half_height", 0.9)
        pts, bound = _sample_cylinder(n, rng, r, hh), np.hypot(r, hh)
    elif kind == "torus":
        d = dims or {}
        rr, tr = d.get("ring_radius", 0.8), d.get("tube_radius", 0.18)
        pts, bound = _sample_torus(n, rng, rr, tr), rr + tr
    else:
        d = dims or DEFAULT_COMPOSITE_DIMS
        pts, bound = _sample_composite(n, rng, d), _composite_bound(d)
    return PointCloud(pts / bound)


def random_composite_dims(rng) -> dict:
    """Per-sample jitter of the composite dimensions (keeps asymmetry)."""
    base = DEFAULT_COMPOSITE_DIMS

    def j(v, lo=0.8, hi=1.2):
        return v * rng.uniform(lo, hi)

    return {
        "box_half": tuple(j(v) for v in base["box_half"]),
        "boss_radius": j(base["boss_radius"]),
        "boss_length": j(base["boss_length"]),
        "boss_offset": tuple(j(v) for v in base["boss_offset"]),
        "fin_half": tuple(j(v) for v in base["fin_half"]),
        "fin_center": tuple(j(v) for v in base["fin_center"]),
    }


# -- pair generation ---------------------------------------------------------


@dataclass
class CorruptionParams:
    n_points: int = 256
    keep_ratio: float = 0.7
    sigma: float = 0.01
    clip: float = 0.05
    max_euler_deg: float = 45.0
    max_trans: float = 1.0
    eps_o: float = 0.1
    kind: str = "composite"
    randomize_dims: bool = True

    def as_dict(self):
        return dict(self.__dict__)


def generate_pair(rng, params: CorruptionParams) -> PairSample:
    """Sample one registration pair following the corruption protocol:
    two independent surface samplings, a random rigid transform applied to
    the target side, independent half-space crops, then clipped noise."""
    dims = None
    if params.kind == "composite" and params.randomize_dims:
        dims = random_composite_dims(rng)
    src_full = synthesize_shape(params.kind, params.n_points, rng, dims)
    tgt_full = synthesize_shape(params.kind, params.n_points, rng, dims)
    gt = random_transform(rng, params.max_euler_deg, params.max_trans)
    tgt_full = apply_transform(gt, tgt_full)

    src_crop, _ = crop_partial(src_full, params.keep_ratio, rng)
    tgt_crop, _ = crop_partial(tgt_full, params.keep_ratio, rng)
    source = jitter_gaussian(src_crop, params.sigma, params.clip, rng)
    target = jitter_gaussian(tgt_crop, params.sigma, params.clip, rng)

    src_labels = overlap_labels(source, target, gt, params.eps_o)
    tgt_labels = overlap_labels(target, source, gt.inverse(), params.eps_o)
    return PairSample(source, target, gt, src_labels, tgt_labels)


def generate_dataset(seed: int, n_pairs: int, params: CorruptionParams) -> list[PairSample]:
    rng = np.random.default_rng(seed)
    return [generate_pair(rng, params) for _ in range(n_pairs)]


# -- PLY io -------------------------------------------------------------------


def write_ply(path, pc: PointCloud) -> None:
    with open(path, "w", encoding="ascii") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(pc)}\n")
        f.write("property double x\nproperty double y\nproperty double z\n")
        f.write("end_header\n")
        for x, y, z in pc.points:
            f.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")


def read_ply(path) -> PointCloud:
    with open(path, "r", encoding="ascii") as f:
        if f.readline().strip() != "ply":
            raise GeometryError(f"{path} is not a PLY file")
        n = None
        props = []
        for line in f:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "element" and tok[1] == "vertex":
                n = int(tok[2])
            elif tok[0] == "property" and n is not None:
                props.append(tok[2])
            elif tok[0] == "end_header":
                break
        if n is None or props[:3] != ["x", "y", "z"]:
            raise GeometryError(f"{path}: expected x y z vertex properties")
        pts = np.loadtxt(f, dtype=np.float64, max_rows=n, ndmin=2)
    return PointCloud(pts[:, :3])
