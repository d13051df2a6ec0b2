"""Synthetic meshes, surface sampling, virtual depth scans, partial crops and registration pairs."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .formats import read_cloud, read_keyvalue, read_transform, write_cloud, write_keyvalue, write_transform
from .geom import (PointCloud, RigidTransform, apply_transform, farthest_point_sample, nearest_distances,
                   random_se3)

log = logging.getLogger(__name__)

SHAPE_KINDS = ("box", "cylinder", "torus", "capsule", "composite")
OVERLAP_TAU = 0.05


@dataclass
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @property
    def corners(self) -> np.ndarray:
        """(T, 3, 3) triangle corner coordinates."""
        return self.vertices[self.triangles]

    def face_areas(self) -> np.ndarray:
        c = self.corners
        return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)

    def face_normals(self) -> np.ndarray:
        c = self.corners
        n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def transformed(self, t: RigidTransform, scale: float = 1.0) -> "TriMesh":
        return TriMesh(t.apply(self.vertices * scale), self.triangles.copy())


def merge_meshes(meshes) -> TriMesh:
    verts, tris, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        offset += len(m.vertices)
    return TriMesh(np.concatenate(verts), np.concatenate(tris))


# -- primitives ---------------------------------------------------------------

def _box(size) -> TriMesh:
    sx, sy, sz = (0.5 * float(s) for s in size)
    v = np.array([[x, y, z] for x in (-sx, sx) for y in (-sy, sy) for z in (-sz, sz)])
    # corner index = 4*ix + 2*iy + iz; two outward-facing triangles per face
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = []
    for a, b, c, d in quads:
        tris += [(a, b, c), (a, c, d)]
    return TriMesh(v, tris)


def _revolve(profile, segments: int) -> TriMesh:
    """Surface of revolution about z; profile is (radius, z) from bottom pole to top pole."""
    profile = np.asarray(profile, dtype=np.float64)
    if profile[0, 0] != 0 or profile[-1, 0] != 0:
        raise ValueError("profile must start and end on the axis")
    rings = profile[1:-1]
    ang = 2 * np.pi * np.arange(segments) / segments
    verts = [[0.0, 0.0, profile[0, 1]]]
    for r, z in rings:
        verts += [[r * np.cos(a), r * np.sin(a), z] for a in ang]
    verts.append([0.0, 0.0, profile[-1, 1]])
    top = len(verts) - 1

    def ring(k, s):
        return 1 + k * segments + (s % segments)

    tris = [(0, ring(0, s + 1), ring(0, s)) for s in range(segments)]
    for k in range(len(rings) - 1):
        for s in range(segments):
            a, b = ring(k, s), ring(k, s + 1)
            c, d = ring(k + 1, s + 1), ring(k + 1, s)
            tris += [(a, b, c), (a, c, d)]
    last = len(rings) - 1
    tris += [(top, ring(last, s), ring(last, s + 1)) for s in range(segments)]
    return TriMesh(verts, tris)


def _cylinder(radius, height, segments) -> TriMesh:
    h = 0.5 * height
    return _revolve([(0, -h), (radius, -h), (radius, h), (0, h)], segments)


def _capsule(radius, length, segments, rings) -> TriMesh:
    h = 0.5 * length
    prof = [(0.0, -h - radius)]
    for i in range(1, rings + 1):
        a = -0.5 * np.pi + 0.5 * np.pi * i / rings
        prof.append((radius * np.cos(a), -h + radius * np.sin(a)))
    start = 0 if length > 0 else 1
    for i in range(start, rings):
        a = 0.5 * np.pi * i / rings
        prof.append((radius * np.cos(a), h + radius * np.sin(a)))
    prof.append((0.0, h + radius))
    return _revolve(prof, segments)


def _torus(major, minor, u_seg, v_seg) -> TriMesh:
    if minor >= major:
        raise ValueError("torus minor radius must be below the major radius")
    u = 2 * np.pi * np.arange(u_seg) / u_seg
    v = 2 * np.pi * np.arange(v_seg) / v_seg
    uu, vv = np.meshgrid(u, v, indexing="ij")
    rr = major + minor * np.cos(vv)
    verts = np.stack([rr * np.cos(uu), rr * np.sin(uu), minor * np.sin(vv)], axis=-1).reshape(-1, 3)
    tris = []
    for i in range(u_seg):
        for j in range(v_seg):
            a = i * v_seg + j
            b = ((i + 1) % u_seg) * v_seg + j
            c = ((i + 1) % u_seg) * v_seg + (j + 1) % v_seg
            d = i * v_seg + (j + 1) % v_seg
            tris += [(a, b, c), (a, c, d)]
    return TriMesh(verts, tris)


def _random_rotation(rng) -> np.ndarray:
    return random_se3((0.0, 180.0), (0.0, 0.0), rng).rotation


def _composite(params, rng) -> TriMesh:
    parts = int(params.get("parts", rng.integers(2, 5)))
    if parts < 1:
        raise ValueError("composite needs at least one part")
    meshes = []
    for p in range(parts):
        kind = ("box", "cylinder", "capsule", "torus")[int(rng.integers(0, 4))] if p else "box"
        if kind == "box":
            m = _box(rng.uniform(0.2, 1.0, size=3))
        elif kind == "cylinder":
            m = _cylinder(rng.uniform(0.1, 0.35), rng.uniform(0.3, 1.0), 24)
        elif kind == "capsule":
            m = _capsule(rng.uniform(0.1, 0.3), rng.uniform(0.2, 0.8), 24, 6)
        else:
            major = rng.uniform(0.25, 0.45)
            m = _torus(major, rng.uniform(0.05, 0.4 * major), 24, 12)
        offset = np.zeros(3) if p == 0 else rng.uniform(-0.5, 0.5, size=3)
        meshes.append(m.transformed(RigidTransform(_random_rotation(rng), offset)))
    return merge_meshes(meshes)


def _cleanup(mesh: TriMesh, eps: float = 1e-14) -> TriMesh:
    keep = mesh.face_areas() > eps
    return TriMesh(mesh.vertices, mesh.triangles[keep])


def _normalise(mesh: TriMesh) -> TriMesh:
    v = mesh.vertices
    center = 0.5 * (v.min(axis=0) + v.max(axis=0))
    v = v - center
    r = np.linalg.norm(v, axis=1).max()
    return TriMesh(v / r, mesh.triangles)


def make_shape(kind: str, params: dict | None = None, seed: int = 0) -> TriMesh:
    """Watertight primitive (or union of primitives) centred and scaled into the unit ball.

    Recognised params: box ``size``; cylinder ``radius``, ``height``, ``segments``;
    torus ``R``, ``r``, ``u``, ``v``; capsule ``radius``, ``length``, ``segments``,
    ``rings``; composite ``parts`` (primitives drawn from ``seed``).
    """
    params = dict(params or {})
    rng = np.random.default_rng(seed)
    if kind == "box":
        size = np.asarray(params.pop("size", (1.0, 1.0, 1.0)), dtype=np.float64)
        _positive(size, "box size")
        mesh = _box(size)
    elif kind == "cylinder":
        r, h, s = params.pop("radius", 0.4), params.pop("height", 1.2), int(params.pop("segments", 32))
        _positive((r, h, s - 2), "cylinder")
        mesh = _cylinder(r, h, s)
    elif kind == "torus":
        big, small = params.pop("R", 0.4), params.pop("r", 0.15)
        u, v = int(params.pop("u", 32)), int(params.pop("v", 16))
        _positive((big, small, u - 2, v - 2), "torus")
        mesh = _torus(big, small, u, v)
    elif kind == "capsule":
        r, length = params.pop("radius", 0.3), params.pop("length", 0.8)
        s, k = int(params.pop("segments", 32)), int(params.pop("rings", 8))
        _positive((r, s - 2, k), "capsule")
        if length < 0:
            raise ValueError("capsule length must be nonnegative")
        mesh = _capsule(r, length, s, k)
    elif kind == "composite":
        mesh = _composite(params, rng)
        params.pop("parts", None)
    else:
        raise ValueError(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")
    if params:
        raise ValueError(f"unknown {kind} parameters: {sorted(params)}")
    return _normalise(_cleanup(mesh))


def _positive(values, what):
    if np.any(np.asarray(values, dtype=np.float64) <= 0):
        raise ValueError(f"{what} dimensions must be positive")


def random_shapes(count: int, seed: int = 0) -> list:
    """``count`` asymmetric composite shapes with independent seeds."""
    seeds = np.random.SeedSequence(seed).generate_state(count)
    return [make_shape("composite", seed=int(s)) for s in seeds]


# -- sampling -----------------------------------------------------------------

def surface_sample(mesh: TriMesh, n: int, seed: int = 0) -> PointCloud:
    """Area-weighted uniform surface sample with face normals."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    face = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    c = mesh.corners[face]
    pts = (1 - r1)[:, None] * c[:, 0] + (r1 * (1 - r2))[:, None] * c[:, 1] + (r1 * r2)[:, None] * c[:, 2]
    return PointCloud(pts, mesh.face_normals()[face])


# -- virtual scanning ---------------------------------------------------------

def look_at(center, target=(0.0, 0.0, 0.0)) -> RigidTransform:
    """Camera-to-world pose whose +z optical axis points from ``center`` at ``target``."""
    center = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    fwd /= np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    if abs(fwd @ up) > 0.99:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return RigidTransform(np.stack([right, down, fwd], axis=1), center)


def camera_ring(count: int = 26, radius: float = 2.0) -> list:
    """Fibonacci-lattice camera centres (half-step latitude offset) looking at the origin.

    The golden-angle azimuth step is replaced by pi when ``count == 2`` so the two
    centres are antipodal.
    """
    if count < 2:
        raise ValueError("camera_ring needs count >= 2")
    golden = np.pi if count == 2 else np.pi * (3.0 - np.sqrt(5.0))
    poses = []
    for i in range(count):
        z = 1.0 - (2.0 * i + 1.0) / count
        r = np.sqrt(max(0.0, 1.0 - z * z))
        a = golden * i
        poses.append(look_at(radius * np.array([r * np.cos(a), r * np.sin(a), z])))
    return poses


@dataclass
class Intrinsics:
    width: int
    height: int
    fov_deg: float = 65.0

    @property
    def focal(self) -> float:
        return 0.5 * self.width / math.tan(math.radians(self.fov_deg) / 2)

    def ray_dirs(self) -> np.ndarray:
        """(H, W, 3) camera-frame rays through pixel centres, unit z component."""
        u = (np.arange(self.width) + 0.5 - 0.5 * self.width) / self.focal
        v = (np.arange(self.height) + 0.5 - 0.5 * self.height) / self.focal
        uu, vv = np.meshgrid(u, v)
        return np.stack([uu, vv, np.ones_like(uu)], axis=-1)


def depth_map(mesh: TriMesh, camera: RigidTransform, width: int = 160, height: int = 160,
              fov_deg: float = 65.0) -> np.ndarray:
    """Z-buffer rasterisation; returns (H, W) camera-frame depth with inf for misses."""
    intr = Intrinsics(width, height, fov_deg)
    vc = (mesh.vertices - camera.translation) @ camera.rotation
    if np.any(vc[:, 2] <= 0):
        raise ValueError("mesh extends behind the camera")
    f = intr.focal
    px = f * vc[:, 0] / vc[:, 2] + 0.5 * width
    py = f * vc[:, 1] / vc[:, 2] + 0.5 * height
    inv_z = 1.0 / vc[:, 2]
    depth = np.full((height, width), np.inf)
    for tri in mesh.triangles:
        x, y, iz = px[tri], py[tri], inv_z[tri]
        x0, x1 = max(int(np.floor(x.min() - 0.5)), 0), min(int(np.ceil(x.max() - 0.5)), width - 1)
        y0, y1 = max(int(np.floor(y.min() - 0.5)), 0), min(int(np.ceil(y.max() - 0.5)), height - 1)
        if x0 > x1 or y0 > y1:
            continue
        area = (x[1] - x[0]) * (y[2] - y[0]) - (x[2] - x[0]) * (y[1] - y[0])
        if area == 0:
            continue
        gx, gy = np.meshgrid(np.arange(x0, x1 + 1) + 0.5, np.arange(y0, y1 + 1) + 0.5)
        w0 = (x[1] - gx) * (y[2] - gy) - (x[2] - gx) * (y[1] - gy)
        w1 = (x[2] - gx) * (y[0] - gy) - (x[0] - gx) * (y[2] - gy)
        w2 = (x[0] - gx) * (y[1] - gy) - (x[1] - gx) * (y[0] - gy)
        b0, b1, b2 = w0 / area, w1 / area, w2 / area
        inside = (b0 >= 0) & (b1 >= 0) & (b2 >= 0)
        if not inside.any():
            continue
        z = 1.0 / (b0 * iz[0] + b1 * iz[1] + b2 * iz[2])
        tile = depth[y0:y1 + 1, x0:x1 + 1]
        closer = inside & (z < tile)
        tile[closer] = z[closer]
    return depth


def virtual_scan(mesh: TriMesh, camera: RigidTransform, resolution=(160, 160), n_out: int | None = 2048,
                 fov_deg: float = 65.0, view: str = "view") -> PointCloud:
    """Back-projected depth scan in the model frame, reduced to ``n_out`` points by FPS."""
    width, height = resolution
    if width < 32 or height < 32:
        raise ValueError("scan resolution must be at least 32x32")
    bound = np.linalg.norm(mesh.vertices, axis=1).max()
    if np.linalg.norm(camera.translation) <= bound:
        raise ValueError(f"{view}: camera lies inside the mesh bounding sphere")
    depth = depth_map(mesh, camera, width, height, fov_deg)
    hit = np.isfinite(depth)
    rays = Intrinsics(width, height, fov_deg).ray_dirs()
    pts_cam = rays[hit] * depth[hit][:, None]
    cloud = PointCloud(camera.apply(pts_cam))
    if n_out is None:
        return cloud
    if len(cloud) < n_out:
        raise ValueError(f"{view}: only {len(cloud)} hit pixels, need {n_out}")
    return cloud.subset(farthest_point_sample(cloud, n_out))


# -- partial crops and noise --------------------------------------------------

def crop_indices(points: np.ndarray, keep: int, rng=None, anchor=None) -> np.ndarray:
    n = len(points)
    if not 1 <= keep < n:
        raise ValueError(f"keep must lie in [1, {n - 1}], got {keep}")
    if anchor is None:
        rng = np.random.default_rng(rng)
        d = rng.normal(size=3)
        anchor = 1.1 * d / np.linalg.norm(d)
    dist = np.linalg.norm(points - np.asarray(anchor, dtype=np.float64), axis=1)
    return np.sort(np.argsort(dist, kind="stable")[:keep])


def crop_partial(cloud: PointCloud, keep: int = 768, seed=None, anchor=None) -> PointCloud:
    """Keep the ``keep`` points nearest a random anchor on the radius-1.1 sphere."""
    return cloud.subset(crop_indices(cloud.points, keep, seed, anchor))


def add_noise(cloud: PointCloud, sigma: float, clip: float = 0.05, seed=None) -> PointCloud:
    """Clipped iid Gaussian jitter; normals are dropped and must be re-estimated."""
    if sigma < 0 or clip < 0:
        raise ValueError("sigma and clip must be nonnegative")
    rng = np.random.default_rng(seed)
    delta = np.clip(rng.normal(scale=sigma, size=cloud.points.shape), -clip, clip) if sigma > 0 else 0.0
    return PointCloud(cloud.points + delta)


# -- pairs --------------------------------------------------------------------

@dataclass
class RegPair:
    source: PointCloud
    target: PointCloud
    gt: RigidTransform
    overlap_ratio: float = 1.0
    shape_id: str = ""
    category: str = ""
    pair_id: str = ""


def overlap_ratio(source: PointCloud, target: PointCloud, gt: RigidTransform, tau: float = OVERLAP_TAU) -> float:
    d = nearest_distances(gt.apply(source.points), target.points)
    return float(np.mean(d <= tau))


def build_pairs(meshes, views_per_mesh: int = 4, min_overlap: float = 0.4, seed: int = 0,
                n_points: int = 768, resolution=(160, 160), noise_sigma: float = 0.0,
                categories=None) -> list:
    """Scan each mesh from distinct ring cameras, pose each scan randomly, keep overlapping pairs."""
    if views_per_mesh < 2:
        raise ValueError("pairs need at least 2 views per mesh")
    ring = camera_ring(26)
    if views_per_mesh > len(ring):
        raise ValueError(f"at most {len(ring)} views per mesh")
    rng = np.random.default_rng(seed)
    pairs = []
    for mi, mesh in enumerate(meshes):
        cams = rng.choice(len(ring), size=views_per_mesh, replace=False)
        obs = []
        for c in cams:
            scan = virtual_scan(mesh, ring[c], resolution, n_points, view=f"mesh {mi} camera {c}")
            if noise_sigma > 0:
                scan = add_noise(scan, noise_sigma, seed=rng.integers(2**32))
            pose = random_se3(rng=rng)
            obs.append((apply_transform(scan, pose), pose))
        kept = 0
        for a in range(views_per_mesh):
            for b in range(a + 1, views_per_mesh):
                (src, pa), (tgt, pb) = obs[a], obs[b]
                gt = pb.compose(pa.inverse())
                ov = overlap_ratio(src, tgt, gt)
                if ov >= min_overlap:
                    cat = categories[mi] if categories is not None else "composite"
                    pairs.append(RegPair(src, tgt, gt, ov, f"shape{mi:04d}", cat,
                                         f"s{mi:04d}_v{cams[a]:02d}_v{cams[b]:02d}"))
                    kept += 1
        if not kept:
            log.warning("mesh %d: no view pair reaches overlap %.2f; skipped", mi, min_overlap)
    return pairs


def crop_pair(mesh: TriMesh, seed, n_surface: int = 1024, keep: int = 768, rot_range=(0.0, 180.0),
              trans_range=(-0.5, 0.5), noise_sigma: float = 0.0, noise_clip: float = 0.05) -> RegPair:
    """Two independent nearest-region crops of one surface sample, the second rigidly moved."""
    rng = np.random.default_rng(seed)
    cloud = surface_sample(mesh, n_surface, int(rng.integers(2**32))).without_normals()
    gt = random_se3(rot_range, trans_range, rng)
    src = crop_partial(cloud, keep, rng)
    tgt = crop_partial(apply_transform(cloud, gt), keep, rng)
    if noise_sigma > 0:
        src = add_noise(src, noise_sigma, noise_clip, rng)
        tgt = add_noise(tgt, noise_sigma, noise_clip, rng)
    return RegPair(src, tgt, gt, overlap_ratio(src, tgt, gt))


def crop_pairs(meshes, seed, **kwargs) -> list:
    seeds = np.random.SeedSequence(seed).generate_state(len(meshes))
    pairs = []
    for i, (mesh, s) in enumerate(zip(meshes, seeds)):
        p = crop_pair(mesh, int(s), **kwargs)
        p.shape_id, p.category, p.pair_id = f"shape{i:04d}", "composite", f"c{seed}_{i:04d}"
        pairs.append(p)
    return pairs


# -- dataset directories ------------------------------------------------------

MANIFEST_FIELDS = ("pair_id", "shape", "category", "overlap", "source_points", "target_points")


def save_pairs(pairs, root, seed: int | None = None) -> Path:
    root = Path(root)
    (root / "pairs").mkdir(parents=True, exist_ok=True)
    with open(root / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_FIELDS)
        for p in pairs:
            d = root / "pairs" / p.pair_id
            d.mkdir(exist_ok=True)
            write_cloud(d / "source.pcb", p.source)
            write_cloud(d / "target.pcb", p.target)
            write_transform(d / "gt.txt", p.gt)
            meta = {"shape": p.shape_id, "category": p.category, "overlap": repr(p.overlap_ratio)}
            if seed is not None:
                meta["seed"] = seed
            write_keyvalue(d / "meta.txt", meta)
            w.writerow([p.pair_id, p.shape_id, p.category, f"{p.overlap_ratio:.6f}", len(p.source), len(p.target)])
    return root


def load_pairs(root) -> list:
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.csv under {root}")
    pairs = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            d = root / "pairs" / row["pair_id"]
            meta = read_keyvalue(d / "meta.txt")
            pairs.append(RegPair(read_cloud(d / "source.pcb"), read_cloud(d / "target.pcb"),
                                 read_transform(d / "gt.txt"), float(meta.get("overlap", row["overlap"])),
                                 row["shape"], row["category"], row["pair_id"]))
    return pairs
