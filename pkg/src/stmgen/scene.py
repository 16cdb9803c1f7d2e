"""Scene point clouds: synthesis, cropping, downsampling, spatial queries.

Clouds are immutable after construction: oriented unit normals, unit-range
RGB colors, and an optional list of per-frame dynamic point sets for scenes
with a moving interactor. The spatial index is a uniform voxel hash grid
(0.25 m cells) whose nearest-neighbor answers match an exhaustive scan
exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

VOXEL_CELL = 0.25


class VoxelGrid:
    """Uniform hash grid over points for exact nearest-neighbor queries."""

    def __init__(self, points, cell=VOXEL_CELL):
        self.points = np.asarray(points, dtype=np.float64)
        self.cell = cell
        keys = np.floor(self.points / cell).astype(np.int64)
        self.cells = {}
        for i, k in enumerate(map(tuple, keys)):
            self.cells.setdefault(k, []).append(i)

    def nearest(self, query):
        """Index of the closest point; exact (ring expansion with bound check)."""
        q = np.asarray(query, dtype=np.float64)
        base = np.floor(q / self.cell).astype(np.int64)
        best_i, best_d2 = -1, np.inf
        ring = 0
        max_ring = 1 + int(np.ceil(
            np.abs(self.points - q).max() / self.cell)) if len(self.points) else 0
        while ring <= max_ring:
            cand = []
            for dx in range(-ring, ring + 1):
                for dy in range(-ring, ring + 1):
                    for dz in range(-ring, ring + 1):
                        if max(abs(dx), abs(dy), abs(dz)) != ring:
                            continue
                        cand.extend(self.cells.get(
                            (base[0] + dx, base[1] + dy, base[2] + dz), ()))
            if cand:
                idx = np.array(cand)
                d2 = ((self.points[idx] - q) ** 2).sum(axis=1)
                j = int(d2.argmin())
                i = int(idx[d2 == d2[j]].min())   # ties -> lower point index
                if d2[j] < best_d2 or (d2[j] == best_d2 and i < best_i):
                    best_i, best_d2 = i, d2[j]
            # a point in a farther ring can still be closer (or tie with a
            # lower index): stop only once the minimum possible distance of
            # the remaining rings strictly exceeds the best found
            if best_i >= 0 and (ring * self.cell) ** 2 > best_d2:
                break
            ring += 1
        return best_i, np.sqrt(best_d2)


@dataclass(frozen=True)
class ScenePointCloud:
    points: np.ndarray                     # (N, 3) meters
    colors: np.ndarray                     # (N, 3) in [0, 1]
    normals: np.ndarray                    # (N, 3) unit
    dynamic_frames: tuple = ()             # per-frame (points, colors, normals)
    _grid: object = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        col = np.ascontiguousarray(self.colors, dtype=np.float64)
        nrm = np.ascontiguousarray(self.normals, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError("points must be (N>=1, 3)")
        if col.shape != pts.shape or nrm.shape != pts.shape:
            raise ValueError("colors/normals must match points")
        lens = np.linalg.norm(nrm, axis=1)
        if not np.allclose(lens, 1.0, atol=1e-4):
            raise ValueError("normals must be unit length")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "colors", col)
        object.__setattr__(self, "normals", nrm)

    @property
    def size(self):
        return self.points.shape[0]

    def grid(self):
        if self._grid is None:
            object.__setattr__(self, "_grid", VoxelGrid(self.points))
        return self._grid

    def features(self):
        """Raw per-point features f_p = (x, y, z, r, g, b), shape (N, 6)."""
        return np.concatenate([self.points, self.colors], axis=1)

    def frame_cloud(self, frame_index):
        """Static points plus the interactor points of one dynamic frame."""
        if not self.dynamic_frames:
            return self
        p, c, n = self.dynamic_frames[frame_index % len(self.dynamic_frames)]
        return ScenePointCloud(np.concatenate([self.points, p]),
                               np.concatenate([self.colors, c]),
                               np.concatenate([self.normals, n]))


def nearest(cloud, query):
    """(index, unsigned distance, signed distance) for the closest point.

    Signed distance is dot(query - p, normal(p)): positive on the oriented
    outside of the surface.
    """
    if cloud.size == 0:
        raise ValueError("empty cloud")
    i, dist = cloud.grid().nearest(query)
    q = np.asarray(query, dtype=np.float64)
    signed = float(np.dot(q - cloud.points[i], cloud.normals[i]))
    return i, float(dist), signed


def signed_distances(cloud, queries):
    """Vectorized exhaustive (index, unsigned, signed) for a query batch."""
    q = np.asarray(queries, dtype=np.float64)
    d2 = ((q[:, None, :] - cloud.points[None, :, :]) ** 2).sum(-1)
    idx = d2.argmin(axis=1)
    dist = np.sqrt(d2[np.arange(len(q)), idx])
    signed = np.einsum("ij,ij->i", q - cloud.points[idx], cloud.normals[idx])
    return idx, dist, signed


def crop_and_normalize(cloud, anchor, radius):
    """Keep points within horizontal `radius` of `anchor`; translate so the
    anchor maps to (0, 0) horizontally, preserving heights relative to the
    anchor's ground height (anchor z)."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    anchor = np.asarray(anchor, dtype=np.float64)
    d = np.linalg.norm(cloud.points[:, :2] - anchor[:2], axis=1)
    keep = d <= radius
    if not keep.any():
        raise ValueError("crop produced an empty cloud")
    pts = cloud.points[keep] - anchor
    return ScenePointCloud(pts, cloud.colors[keep], cloud.normals[keep],
                           dynamic_frames=tuple(
                               (p - anchor, c, n)
                               for p, c, n in cloud.dynamic_frames))


def fps_indices(points, n, start=0):
    """Greedy farthest-point sampling from `start`; distance ties broken
    toward the lower index."""
    pts = np.asarray(points, dtype=np.float64)
    N = len(pts)
    n = min(n, N)
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = start
    mind = np.linalg.norm(pts - pts[start], axis=1)
    for i in range(1, n):
        nxt = int(mind.argmax())   # argmax returns the first (lowest) index
        chosen[i] = nxt
        mind = np.minimum(mind, np.linalg.norm(pts - pts[nxt], axis=1))
    return chosen


def downsample(cloud, n_points, method="fps", seed=0):
    """Deterministic subset of at most `n_points` points."""
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    if cloud.size <= n_points:
        return cloud
    if method == "fps":
        idx = fps_indices(cloud.points, n_points)
    elif method == "random":
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(cloud.size, size=n_points, replace=False))
    else:
        raise ValueError(f"unknown downsample method {method!r}")
    return ScenePointCloud(cloud.points[idx], cloud.colors[idx],
                           cloud.normals[idx], cloud.dynamic_frames)


def estimate_normals(points, k=16):
    """k-NN plane-fit normals oriented upward (+Z hemisphere; horizontal
    normals flipped outward from the centroid)."""
    pts = np.asarray(points, dtype=np.float64)
    N = len(pts)
    k = min(k, N)
    nn = np.empty((N, k), dtype=np.int64)
    for lo in range(0, N, 512):   # chunked to bound the distance matrix
        hi = min(lo + 512, N)
        d2 = ((pts[lo:hi, None, :] - pts[None, :, :]) ** 2).sum(-1)
        nn[lo:hi] = np.argsort(d2, axis=1)[:, :k]
    normals = np.empty((N, 3))
    centroid = pts.mean(axis=0)
    for i in range(N):
        nb = pts[nn[i]]
        nbc = nb - nb.mean(axis=0)
        _, _, vt = np.linalg.svd(nbc, full_matrices=False)
        n = vt[-1]
        if abs(n[2]) > 1e-6:
            if n[2] < 0:
                n = -n
        else:
            if np.dot(n, pts[i] - centroid) < 0:
                n = -n
        normals[i] = n
    return normals


# -- procedural scenes -----------------------------------------------------------

SCENE_KINDS = ("flat", "stairs", "box_room", "corridor", "dynamic_walker")


@dataclass(frozen=True)
class SceneSpec:
    kind: str
    seed: int = 0
    extent: float = 10.0            # side length of the ground patch (m)
    density: float = 100.0          # points per square meter
    step_rise: float = 0.15
    step_run: float = 0.3
    num_steps: int = 5
    stair_width: float = 2.0
    box_size: tuple = (0.6, 0.6, 0.4)
    box_center: tuple = (2.0, 0.0)
    corridor_width: float = 3.0
    wall_height: float = 2.0
    walker_speed: float = 1.0
    walker_offset: float = -1.0     # lateral offset of the interactor path
    num_frames: int = 40
    fps: float = 10.0

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}")
        if self.extent <= 0 or self.density <= 0:
            raise ValueError("extent and density must be positive")
        if self.kind == "stairs" and (self.step_rise <= 0 or self.step_run <= 0
                                      or self.num_steps < 1):
            raise ValueError("invalid stair parameters")


def _grid_patch(x0, x1, y0, y1, z, density, color):
    """Regular grid of points on a horizontal rectangle at height z."""
    spacing = 1.0 / np.sqrt(density)
    xs = np.arange(x0, x1 - 1e-9, spacing) + spacing / 2
    ys = np.arange(y0, y1 - 1e-9, spacing) + spacing / 2
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, float(z))], axis=1)
    cols = np.tile(color, (len(pts), 1))
    nrms = np.tile([0.0, 0.0, 1.0], (len(pts), 1))
    return pts, cols, nrms


def _vertical_patch(axis, fixed, a0, a1, z0, z1, density, color, normal):
    """Vertical rectangle: `axis` is the free horizontal axis (0=x, 1=y)."""
    spacing = 1.0 / np.sqrt(density)
    av = np.arange(a0, a1 - 1e-9, spacing) + spacing / 2
    zv = np.arange(z0, z1 - 1e-9, spacing) + spacing / 2
    ga, gz = np.meshgrid(av, zv, indexing="ij")
    pts = np.empty((ga.size, 3))
    pts[:, axis] = ga.ravel()
    pts[:, 1 - axis] = fixed
    pts[:, 2] = gz.ravel()
    cols = np.tile(color, (len(pts), 1))
    nrms = np.tile(np.asarray(normal, dtype=np.float64), (len(pts), 1))
    return pts, cols, nrms


GROUND_COLOR = (0.5, 0.5, 0.5)
STRUCT_COLOR = (0.7, 0.4, 0.2)
WALKER_COLOR = (0.2, 0.4, 0.8)


def synth_scene(spec):
    """Build an analytic scene cloud (plus dynamic frames for walkers)."""
    half = spec.extent / 2
    parts = []
    if spec.kind == "flat":
        parts.append(_grid_patch(-half, half, -half, half, 0.0,
                                 spec.density, GROUND_COLOR))
    elif spec.kind == "stairs":
        parts.append(_grid_patch(-half, 0.0, -half, half, 0.0,
                                 spec.density, GROUND_COLOR))
        w = spec.stair_width / 2
        for s in range(spec.num_steps):
            x0 = s * spec.step_run
            z = (s + 1) * spec.step_rise
            parts.append(_grid_patch(x0, x0 + spec.step_run, -w, w, z,
                                     spec.density, STRUCT_COLOR))
            parts.append(_vertical_patch(1, x0, -w, w, s * spec.step_rise, z,
                                         spec.density, STRUCT_COLOR,
                                         (-1.0, 0.0, 0.0)))
        # landing after the top step
        top = spec.num_steps * spec.step_rise
        parts.append(_grid_patch(spec.num_steps * spec.step_run, half,
                                 -w, w, top, spec.density, STRUCT_COLOR))
    elif spec.kind == "box_room":
        parts.append(_grid_patch(-half, half, -half, half, 0.0,
                                 spec.density, GROUND_COLOR))
        bx, by = spec.box_center
        sx, sy, sz = spec.box_size
        parts.append(_grid_patch(bx - sx / 2, bx + sx / 2, by - sy / 2,
                                 by + sy / 2, sz, spec.density, STRUCT_COLOR))
        for sgn in (-1, 1):
            parts.append(_vertical_patch(1, bx + sgn * sx / 2, by - sy / 2,
                                         by + sy / 2, 0, sz, spec.density,
                                         STRUCT_COLOR, (sgn, 0.0, 0.0)))
            parts.append(_vertical_patch(0, by + sgn * sy / 2, bx - sx / 2,
                                         bx + sx / 2, 0, sz, spec.density,
                                         STRUCT_COLOR, (0.0, sgn, 0.0)))
    elif spec.kind == "corridor":
        w = spec.corridor_width / 2
        parts.append(_grid_patch(-half, half, -w, w, 0.0,
                                 spec.density, GROUND_COLOR))
        for sgn in (-1, 1):
            parts.append(_vertical_patch(0, sgn * w, -half, half, 0,
                                         spec.wall_height, spec.density,
                                         STRUCT_COLOR, (0.0, -sgn, 0.0)))
    elif spec.kind == "dynamic_walker":
        parts.append(_grid_patch(-half, half, -half, half, 0.0,
                                 spec.density, GROUND_COLOR))

    pts = np.concatenate([p for p, _, _ in parts])
    cols = np.concatenate([c for _, c, _ in parts])
    nrms = np.concatenate([n for _, _, n in parts])

    dynamic = ()
    if spec.kind == "dynamic_walker":
        dynamic = tuple(_walker_frame(spec, i) for i in range(spec.num_frames))
    return ScenePointCloud(pts, cols, nrms, dynamic_frames=dynamic)


def _walker_frame(spec, frame):
    """Interactor point set for one frame: a coarse vertical capsule of
    points marching along +X at walker_speed."""
    rng = np.random.default_rng(spec.seed * 7919 + 17)
    n = 64
    local = rng.standard_normal((n, 3)) * [0.12, 0.12, 0.35] + [0, 0, 0.9]
    step = spec.walker_speed / spec.fps
    center = np.array([(-spec.extent / 2 + 1.0) + frame * step,
                       spec.walker_offset, 0.0])
    pts = local + center
    cols = np.tile(WALKER_COLOR, (n, 1))
    out = pts - center
    out[:, 2] = 0.0
    lens = np.linalg.norm(out, axis=1, keepdims=True)
    nrms = np.where(lens > 1e-9, out / np.where(lens > 1e-9, lens, 1.0),
                    [0.0, 0.0, 1.0])
    nrms /= np.linalg.norm(nrms, axis=1, keepdims=True)
    return pts, cols, nrms


# -- PLY I/O ----------------------------------------------------------------------


def write_ply(path, cloud_or_points, colors=None, normals=None):
    """ASCII PLY with x,y,z float, red,green,blue uchar, nx,ny,nz float."""
    if isinstance(cloud_or_points, ScenePointCloud):
        pts = cloud_or_points.points
        cols = cloud_or_points.colors
        nrms = cloud_or_points.normals
    else:
        pts = np.asarray(cloud_or_points, dtype=np.float64)
        cols = colors
        nrms = normals
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pts)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
    ]
    if nrms is not None:
        lines += ["property float nx", "property float ny", "property float nz"]
    lines.append("end_header")
    c8 = np.clip(np.rint(np.asarray(cols) * 255), 0, 255).astype(int)
    for i in range(len(pts)):
        row = [repr(float(v)) for v in pts[i]]
        row += [str(v) for v in c8[i]]
        if nrms is not None:
            row += [repr(float(v)) for v in nrms[i]]
        lines.append(" ".join(row))
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")


def read_ply(path):
    """Read the ASCII PLY subset written above; normals estimated if absent.

    Returns a ScenePointCloud.
    """
    with open(path, encoding="ascii") as f:
        header = []
        line = f.readline().strip()
        if line != "ply":
            raise ValueError(f"{path}: not a PLY file")
        props = []
        count = 0
        while True:
            line = f.readline()
            if not line:
                raise ValueError(f"{path}: truncated header")
            line = line.strip()
            header.append(line)
            if line.startswith("element vertex"):
                count = int(line.split()[-1])
            elif line.startswith("property"):
                props.append(line.split()[-1])
            elif line == "end_header":
                break
        expected = ["x", "y", "z", "red", "green", "blue"]
        if props[:6] != expected:
            raise ValueError(f"{path}: unsupported PLY vertex properties {props}")
        has_normals = props[6:9] == ["nx", "ny", "nz"]
        rows = np.loadtxt(f, max_rows=count, ndmin=2)
    if rows.shape[0] != count:
        raise ValueError(f"{path}: expected {count} vertices, got {rows.shape[0]}")
    pts = rows[:, :3]
    cols = rows[:, 3:6] / 255.0
    if has_normals:
        nrms = rows[:, 6:9]
    else:
        nrms = estimate_normals(pts)
    return ScenePointCloud(pts, cols, nrms)
