"""Synthetic road worlds, noisy demonstration drives and rendered camera frames.

Worlds are x-monotone staircase routes through four-way/three-way
junctions whose unused branches are short dead-end stubs. Drives follow the
route centreline with a pure-pursuit controller; images are an analytic
ground-plane rasterisation through the camera model.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .annotation import CameraModel, ClassPrediction, CompleteAffordance, FrameRef, project_points
from .labels import CLASSES, Action
from .trajectory import Pose, Trajectory, wrap_angle


class DisconnectedRouteError(ValueError):
    pass


_DIRS = {"E": (1.0, 0.0), "N": (0.0, 1.0), "W": (-1.0, 0.0), "S": (0.0, -1.0)}
_LEFT_OF = {"E": "N", "N": "W", "W": "S", "S": "E"}
_RIGHT_OF = {v: k for k, v in _LEFT_OF.items()}
_BACK = {"E": "W", "W": "E", "N": "S", "S": "N"}


@dataclass(frozen=True)
class WorldSpec:
    n_junctions: int = 4
    segment_length: tuple[float, float] = (50.0, 80.0)
    lead_length: float = 30.0
    stub_length: tuple[float, float] = (20.0, 30.0)
    road_width: float = 6.0
    clearance: float = 15.0


@dataclass(frozen=True)
class RoadGraph:
    nodes: np.ndarray
    edges: tuple[tuple[int, int], ...]
    widths: np.ndarray
    route: tuple[int, ...] = ()

    def degree(self) -> np.ndarray:
        deg = np.zeros(len(self.nodes), dtype=int)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg

    @property
    def junctions(self) -> np.ndarray:
        return np.flatnonzero(self.degree() >= 3)

    def neighbours(self, i: int) -> list[int]:
        return [b if a == i else a for a, b in self.edges if i in (a, b)]

    def has_edge(self, i: int, j: int) -> bool:
        return (i, j) in self.edges or (j, i) in self.edges

    @property
    def route_edges(self) -> list[tuple[int, int]]:
        return list(zip(self.route[:-1], self.route[1:]))

    def to_json(self) -> str:
        return json.dumps({"nodes": self.nodes.tolist(), "edges": [list(e) for e in self.edges],
                           "widths": self.widths.tolist(), "route": list(self.route)})

    @classmethod
    def from_json(cls, text: str) -> "RoadGraph":
        d = json.loads(text)
        return cls(np.array(d["nodes"], dtype=float), tuple(tuple(e) for e in d["edges"]),
                   np.array(d["widths"], dtype=float), tuple(d["route"]))


def _segment_distance(p1, p2, q1, q2) -> float:
    """Minimum distance between two 2-d segments (no intersection test needed for axis-aligned roads)."""
    def pt_seg(p, a, b):
        ab = b - a
        t = np.clip(np.dot(p - a, ab) / max(np.dot(ab, ab), 1e-12), 0.0, 1.0)
        return float(np.hypot(*(a + t * ab - p)))
    d = min(pt_seg(p1, q1, q2), pt_seg(p2, q1, q2), pt_seg(q1, p1, p2), pt_seg(q2, p1, p2))
    # proper crossing
    def orient(a, b, c):
        return np.sign((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
    if orient(p1, p2, q1) * orient(p1, p2, q2) < 0 and orient(q1, q2, p1) * orient(q1, q2, p2) < 0:
        return 0.0
    return d


def _well_separated(nodes, edges, clearance) -> bool:
    for a in range(len(edges)):
        for b in range(a + 1, len(edges)):
            if set(edges[a]) & set(edges[b]):
                continue
            i, j = edges[a]
            k, m = edges[b]
            if _segment_distance(nodes[i], nodes[j], nodes[k], nodes[m]) < clearance:
                return False
    return True


def generate_world(seed: int, spec: WorldSpec = WorldSpec(), max_tries: int = 200) -> RoadGraph:
    """Random staircase route with ``spec.n_junctions`` junctions.

    The route heads east and only ever turns between east, north and south,
    so it cannot cross itself. Every junction carries one or two dead-end
    stubs on the branches the route does not use.
    """
    rng = np.random.default_rng(seed)
    n = spec.n_junctions
    for _ in range(max_tries):
        turns = []
        heading = "E"
        for _j in range(n):
            allowed = {"E": "LSR", "N": "SR", "S": "SL"}[heading]
            t = allowed[rng.integers(len(allowed))]
            turns.append(t)
            heading = {"L": _LEFT_OF[heading], "R": _RIGHT_OF[heading], "S": heading}[t]
        if n >= 2 and not ("L" in turns and "R" in turns):
            continue
        nodes = [np.zeros(2)]
        edges = []
        route = [0]
        heading = "E"
        for j in range(n + 1):
            length = rng.uniform(*spec.segment_length)
            if j == 0 or j == n:
                length += spec.lead_length
            nodes.append(nodes[route[-1]] + length * np.array(_DIRS[heading]))
            edges.append((route[-1], len(nodes) - 1))
            route.append(len(nodes) - 1)
            if j == n:
                break
            t = turns[j]
            out = {"L": _LEFT_OF[heading], "R": _RIGHT_OF[heading], "S": heading}[t]
            free = [d for d in "ENWS" if d not in (_BACK[heading], out)]
            order = rng.permutation(len(free))
            n_stubs = 1 + int(rng.integers(len(free)))
            for d in (free[i] for i in order[:n_stubs]):
                stub = nodes[route[-1]] + rng.uniform(*spec.stub_length) * np.array(_DIRS[d])
                nodes.append(stub)
                edges.append((route[-1], len(nodes) - 1))
            heading = out
        nodes_arr = np.array(nodes)
        if _well_separated(nodes_arr, edges, spec.clearance):
            return RoadGraph(nodes_arr, tuple(edges), np.full(len(edges), spec.road_width), tuple(route))
    raise RuntimeError(f"could not lay out a world with {n} junctions in {max_tries} tries")


# -- drives ---------------------------------------------------------------

@dataclass(frozen=True)
class DriveNoise:
    lateral: float = 0.2
    heading: float = 0.005
    speed: float = 0.05
    lateral_correlation: float = 10.0


@dataclass(frozen=True)
class DriveConfig:
    speed: float = 5.0
    dt: float = 0.1
    lookahead: float = 4.0
    corner_radius: float = 8.0
    noise: DriveNoise = field(default_factory=DriveNoise)


def _route_nodes(world: RoadGraph, route) -> list[int]:
    route = list(route)
    if route and isinstance(route[0], (tuple, list)):
        path = [route[0][0]]
        for a, b in route:
            if a != path[-1]:
                raise DisconnectedRouteError(f"edge ({a}, {b}) does not continue from node {path[-1]}")
            path.append(b)
    else:
        path = [int(i) for i in route]
    if len(path) < 2:
        raise DisconnectedRouteError("route needs at least one edge")
    for a, b in zip(path[:-1], path[1:]):
        if not world.has_edge(a, b):
            raise DisconnectedRouteError(f"nodes {a} and {b} are not connected")
    return path


def _fillet(points: np.ndarray, radius: float, step: float = 0.25) -> np.ndarray:
    """Replace every interior corner of a polyline by a tangent circular arc."""
    out = [points[0]]
    for i in range(1, len(points) - 1):
        a = points[i] - points[i - 1]
        b = points[i + 1] - points[i]
        la, lb = math.hypot(*a), math.hypot(*b)
        a, b = a / la, b / lb
        turn = math.atan2(a[0] * b[1] - a[1] * b[0], float(a @ b))
        if abs(turn) < 1e-6:
            out.append(points[i])
            continue
        r = min(radius, 0.45 * min(la, lb) / math.tan(0.5 * abs(turn)))
        start = points[i] - r * math.tan(0.5 * abs(turn)) * a
        normal = np.array([-a[1], a[0]]) * math.copysign(1.0, turn)
        centre = start + r * normal
        phi0 = math.atan2(*(start - centre)[::-1])
        k = max(2, int(math.ceil(r * abs(turn) / step)))
        phis = phi0 + turn * np.arange(k + 1) / k
        out.extend(centre + r * np.column_stack([np.cos(phis), np.sin(phis)]))
    out.append(points[-1])
    return np.array(out)


def _densify(points: np.ndarray, step: float = 0.05):
    seg = np.diff(points, axis=0)
    lens = np.hypot(*seg.T)
    out = [points[:1]]
    for p, d, l in zip(points[:-1], seg, lens):
        k = max(1, int(math.ceil(l / step)))
        out.append(p + d * (np.arange(1, k + 1) / k)[:, None])
    dense = np.vstack(out)
    s = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(dense, axis=0).T))])
    tang = np.gradient(dense, axis=0)
    tang /= np.maximum(np.hypot(*tang.T), 1e-12)[:, None]
    normal = np.stack([-tang[:, 1], tang[:, 0]], axis=1)
    return dense, s, normal


def simulate_drive(world: RoadGraph, route=None, noise: DriveNoise | None = None, seed: int = 0,
                   cfg: DriveConfig = DriveConfig(), run_id: str = "run0") -> Trajectory:
    """Drive the route with pure pursuit plus per-run individual variation.

    Lateral noise is an Ornstein-Uhlenbeck offset of the tracked point from
    the centreline, speed noise a per-run factor, heading noise white
    measurement noise on the recorded heading.
    """
    noise = cfg.noise if noise is None else noise
    path = _route_nodes(world, world.route if route is None else route)
    dense, s, normal = _densify(_fillet(world.nodes[path], cfg.corner_radius))
    total = s[-1]
    rng = np.random.default_rng(seed)
    v = cfg.speed * max(0.2, 1.0 + noise.speed * rng.standard_normal())
    ds = v * cfg.dt
    phi = math.exp(-ds / noise.lateral_correlation)
    lat = noise.lateral * rng.standard_normal()

    x, y = dense[0] + lat * normal[0]
    d0 = dense[min(len(dense) - 1, np.searchsorted(s, cfg.lookahead))] - dense[0]
    theta = math.atan2(d0[1], d0[0])
    near = 0
    t = 0.0
    xs, ys, hs, ts = [], [], [], []
    while True:
        lo, hi = near, min(len(dense), near + int(4 * ds / 0.05) + 40)
        near = lo + int(np.argmin(np.hypot(dense[lo:hi, 0] - x, dense[lo:hi, 1] - y)))
        xs.append(x)
        ys.append(y)
        hs.append(theta + noise.heading * rng.standard_normal())
        ts.append(t)
        if s[near] >= total - 0.5 * ds:
            break
        k = min(len(dense) - 1, int(np.searchsorted(s, s[near] + cfg.lookahead)))
        tx, ty = dense[k] + lat * normal[k]
        alpha = math.atan2(ty - y, tx - x) - theta
        curvature = 2.0 * math.sin(alpha) / cfg.lookahead
        theta += v * curvature * cfg.dt
        x += v * math.cos(theta) * cfg.dt
        y += v * math.sin(theta) * cfg.dt
        t += cfg.dt
        lat = phi * lat + noise.lateral * math.sqrt(1.0 - phi * phi) * rng.standard_normal()
        if len(xs) > 10 * total / ds + 1000:
            raise RuntimeError("pure pursuit failed to reach the end of the route")
    return Trajectory.from_arrays(run_id, ts, xs, ys, wrap_angle(np.array(hs)))


# -- rendering ------------------------------------------------------------

JUNCTION_RADIUS = 10.0
MAX_RANGE = 80.0


@lru_cache(maxsize=8)
def _ground_lookup(cam: CameraModel):
    v, u = np.mgrid[0:cam.height, 0:cam.width]
    fwd, left = cam.pixel_to_vehicle(u + 0.5, v + 0.5)
    ok = np.isfinite(fwd) & (np.hypot(fwd, left) <= MAX_RANGE)
    return np.flatnonzero(ok.ravel()), fwd[ok], left[ok]


RASTER_RES = 0.1
_RASTERS: dict[str, "_WorldRaster"] = {}


class _WorldRaster:
    """Top-down rasterisation of the three image channels at ``RASTER_RES`` meters."""

    def __init__(self, world: RoadGraph, res: float = RASTER_RES):
        pad = float(world.widths.max()) + JUNCTION_RADIUS
        lo = world.nodes.min(axis=0) - pad
        hi = world.nodes.max(axis=0) + pad
        self.origin = lo
        self.res = res
        nx, ny = (np.ceil((hi - lo) / res).astype(int) + 1)
        dist = np.full((ny, nx), np.inf, dtype=np.float32)
        half = np.zeros((ny, nx), dtype=np.float32)
        for (i, j), w in zip(world.edges, world.widths):
            p, q = world.nodes[i], world.nodes[j]
            (x0, y0), (x1, y1) = self._cell(np.minimum(p, q) - w), self._cell(np.maximum(p, q) + w)
            gy, gx = np.mgrid[y0:y1 + 1, x0:x1 + 1]
            px, py = lo[0] + gx * res, lo[1] + gy * res
            d = q - p
            t = np.clip(((px - p[0]) * d[0] + (py - p[1]) * d[1]) / max(float(d @ d), 1e-12), 0.0, 1.0)
            e = np.hypot(px - (p[0] + t * d[0]), py - (p[1] + t * d[1])).astype(np.float32)
            sub = dist[y0:y1 + 1, x0:x1 + 1]
            closer = e < sub
            sub[closer] = e[closer]
            half[y0:y1 + 1, x0:x1 + 1][closer] = 0.5 * w
        road = dist <= half
        self.channels = np.zeros((3, ny, nx), dtype=np.float32)
        self.channels[0] = road
        self.channels[1] = np.where(road, 1.0 - dist / np.maximum(half, 1e-6), 0.0)
        junc = np.zeros((ny, nx), dtype=np.float32)
        for j in world.junctions:
            c = world.nodes[j]
            (x0, y0), (x1, y1) = self._cell(c - JUNCTION_RADIUS), self._cell(c + JUNCTION_RADIUS)
            gy, gx = np.mgrid[y0:y1 + 1, x0:x1 + 1]
            dj = np.hypot(lo[0] + gx * res - c[0], lo[1] + gy * res - c[1])
            np.maximum(junc[y0:y1 + 1, x0:x1 + 1], np.clip(1.0 - dj / JUNCTION_RADIUS, 0.0, 1.0),
                       out=junc[y0:y1 + 1, x0:x1 + 1])
        self.channels[2] = np.where(road, junc, 0.0)

    def _cell(self, p):
        c = np.rint((np.asarray(p) - self.origin) / self.res).astype(int)
        return int(c[0]), int(c[1])

    def sample(self, gx, gy):
        ix = np.rint((gx - self.origin[0]) / self.res).astype(np.int64)
        iy = np.rint((gy - self.origin[1]) / self.res).astype(np.int64)
        ny, nx = self.channels.shape[1:]
        inside = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
        out = np.zeros((3, gx.size), dtype=np.float32)
        out[:, inside] = self.channels[:, iy[inside], ix[inside]]
        return out


def _raster(world: RoadGraph) -> _WorldRaster:
    key = world.to_json()
    r = _RASTERS.get(key)
    if r is None:
        if len(_RASTERS) >= 4:
            _RASTERS.clear()
        r = _RASTERS[key] = _WorldRaster(world)
    return r


def render_frame(cam: CameraModel, world: RoadGraph, ego: Pose) -> np.ndarray:
    """Rasterise the road network seen from ``ego`` into a (3, H, W) float32 image.

    Channel 0 is the road mask, channel 1 a centreline shading that falls
    off towards the road edge, channel 2 the proximity to junction nodes
    (road pixels only, zero beyond ``JUNCTION_RADIUS``). Ground values come
    from a cached top-down raster of the world.
    """
    img = np.zeros((3, cam.height * cam.width), dtype=np.float32)
    flat_idx, fwd, left = _ground_lookup(cam)
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    gx = ego.x + c * fwd - s * left
    gy = ego.y + s * fwd + c * left
    img[:, flat_idx] = _raster(world).sample(gx, gy)
    return img.reshape(3, cam.height, cam.width)


# -- ground truth ---------------------------------------------------------

class RouteGeometry:
    """Route polyline of a world with arc positions of its vertices."""

    def __init__(self, world: RoadGraph, route=None, lookahead: float = 4.0):
        self.world = world
        self.path = _route_nodes(world, world.route if route is None else route)
        self.pts = world.nodes[self.path]
        seg = np.diff(self.pts, axis=0)
        self.seg_len = np.hypot(*seg.T)
        self.dirs = seg / self.seg_len[:, None]
        self.s_vertex = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.length = float(self.s_vertex[-1])
        self.lookahead = lookahead

    def locate(self, x: float, y: float) -> tuple[float, int]:
        """Arc position of the nearest route point and the index of its segment."""
        p = np.array([x, y])
        rel = p - self.pts[:-1]
        t = np.clip(np.einsum("ij,ij->i", rel, self.dirs), 0.0, self.seg_len)
        foot = self.pts[:-1] + t[:, None] * self.dirs
        i = int(np.argmin(np.hypot(*(foot - p).T)))
        return float(self.s_vertex[i] + t[i]), i

    def _branches(self, vertex_pos: int, incoming: np.ndarray) -> dict[Action, np.ndarray]:
        node = self.path[vertex_pos]
        came_from = self.path[vertex_pos - 1]
        out = {}
        for nb in self.world.neighbours(node):
            if nb == came_from:
                continue
            d = self.world.nodes[nb] - self.world.nodes[node]
            d = d / np.hypot(*d)
            ang = float(wrap_angle(math.atan2(d[1], d[0]) - math.atan2(incoming[1], incoming[0])))
            if abs(ang) < math.radians(30):
                out[Action.STRAIGHT] = d
            else:
                out[Action.LEFT if ang > 0 else Action.RIGHT] = d
        return out

    def truth(self, cam: CameraModel, ego: Pose, frame_id: str = "", max_dist: float = 15.0,
              exit_margin: float = 3.0) -> CompleteAffordance:
        """Complete visible affordances at ``ego`` derived from the graph."""
        s, seg = self.locate(ego.x, ego.y)
        Ld = self.lookahead
        found: dict[Action, tuple[tuple[float, float], float]] = {}

        def put(action, point, dist):
            u, v, vis = project_points(cam, ego, point[0], point[1])
            if bool(vis) and action not in found:
                found[action] = ((float(u), float(v)), float(np.clip(dist, 0.0, max_dist)))

        # still inside the turn taken at the previous vertex
        prev = seg
        if 0 < prev < len(self.path) - 1 and s - self.s_vertex[prev] <= exit_margin:
            din, dout = self.dirs[prev - 1], self.dirs[prev]
            turn = float(wrap_angle(math.atan2(dout[1], dout[0]) - math.atan2(din[1], din[0])))
            if abs(turn) >= math.radians(30):
                a = Action.LEFT if turn > 0 else Action.RIGHT
                node = self.pts[prev]
                for point in (node + 0.5 * Ld * (dout - din), node + Ld * dout, node + 2 * Ld * dout):
                    put(a, point, 0.0)

        nxt = int(np.searchsorted(self.s_vertex, s, side="right"))
        ahead = self.s_vertex[nxt] - s if nxt < len(self.path) else np.inf
        straight_continues = ahead > max_dist
        if nxt < len(self.path) - 1 and ahead <= max_dist + Ld:
            din = self.dirs[nxt - 1]
            node = self.pts[nxt]
            dnode = math.hypot(node[0] - ego.x, node[1] - ego.y)
            for a, d in self._branches(nxt, din).items():
                if a is Action.STRAIGHT:
                    straight_continues = True
                    continue
                for point in (node + 0.5 * Ld * (d - din), node + Ld * d):
                    put(a, point, dnode - Ld)
        if straight_continues:
            fwd = self.dirs[seg]
            foot = self.pts[seg] + (s - self.s_vertex[seg]) * fwd
            put(Action.STRAIGHT, foot + max_dist * fwd, max_dist)

        classes = []
        for a in CLASSES:
            if a in found:
                centre, dist = found[a]
                classes.append(ClassPrediction(True, 1.0, centre, dist))
            else:
                classes.append(ClassPrediction(False, 0.0))
        return CompleteAffordance(frame_id, tuple(classes))


def select_frames(traj: Trajectory, geom: RouteGeometry, stride: int = 1,
                  margin_start: float = 5.0, margin_end: float = 20.0) -> list[FrameRef]:
    """Frames every ``stride`` poses, away from both route ends."""
    out = []
    for i in range(0, len(traj) - 1, stride):
        p = traj.poses[i]
        s, _ = geom.locate(p.x, p.y)
        if margin_start <= s <= geom.length - margin_end:
            out.append(FrameRef(f"{traj.run_id}_{i:05d}", traj.run_id, i))
    return out


# -- image tensor files ---------------------------------------------------

IMAGE_MAGIC = b"RAFIMG01"
_DTYPES = {1: np.uint8, 2: np.float32}


class ImageWriter:
    """Stream (C, H, W) frames into an image tensor file.

    uint8 storage quantises [0, 1] to steps of 1/255; float32 is lossless.
    The frame count in the header is patched on close.
    """

    def __init__(self, path, dtype=np.uint8):
        self.path = path
        self.dtype = np.dtype(dtype)
        self.code = {np.dtype(v): k for k, v in _DTYPES.items()}[self.dtype]
        self.count = 0
        self.frame_shape = None
        self._fh = open(path, "wb")
        self._fh.write(IMAGE_MAGIC + struct.pack("<B", self.code) + struct.pack("<4I", 0, 0, 0, 0))

    def write(self, image: np.ndarray) -> None:
        image = np.asarray(image)
        if image.ndim != 3:
            raise ValueError("expected a (C, H, W) frame")
        if self.frame_shape is None:
            self.frame_shape = image.shape
        elif image.shape != self.frame_shape:
            raise ValueError(f"frame shape {image.shape} differs from {self.frame_shape}")
        if self.dtype == np.uint8:
            data = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
        else:
            data = image.astype(self.dtype)
        self._fh.write(np.ascontiguousarray(data).tobytes())
        self.count += 1

    def close(self) -> None:
        if self._fh.closed:
            return
        shape = self.frame_shape or (0, 0, 0)
        self._fh.seek(len(IMAGE_MAGIC) + 1)
        self._fh.write(struct.pack("<4I", self.count, *shape))
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_images(path, images, dtype=np.uint8) -> None:
    with ImageWriter(path, dtype) as w:
        for img in images:
            w.write(img)


_HEADER = len(IMAGE_MAGIC) + 1 + 16


class ImageStack:
    """Memory-mapped read access to an image tensor file."""

    def __init__(self, path):
        with open(path, "rb") as fh:
            head = fh.read(_HEADER)
        if head[:len(IMAGE_MAGIC)] != IMAGE_MAGIC:
            raise ValueError(f"{path}: not an image tensor file")
        code = head[len(IMAGE_MAGIC)]
        shape = struct.unpack("<4I", head[len(IMAGE_MAGIC) + 1:])
        self.dtype = _DTYPES[code]
        self.shape = shape
        self._data = (np.memmap(path, dtype=self.dtype, mode="r", offset=_HEADER, shape=shape)
                      if shape[0] else np.zeros(shape, self.dtype))

    def __len__(self):
        return self.shape[0]

    def __getitem__(self, i) -> np.ndarray:
        x = np.asarray(self._data[i])
        if self.dtype == np.uint8:
            return x.astype(np.float32) / 255.0
        return x.astype(np.float32)


def read_images(path) -> np.ndarray:
    st = ImageStack(path)
    return np.stack([st[i] for i in range(len(st))]) if len(st) else np.zeros(st.shape, np.float32)


def render_drive(path, cam: CameraModel, world: RoadGraph, traj: Trajectory,
                 frames: Sequence[FrameRef], dtype=np.uint8) -> None:
    """Render the frames of one drive straight into an image tensor file."""
    with ImageWriter(path, dtype) as w:
        for fr in frames:
            w.write(render_frame(cam, world, traj.poses[fr.pose_index]))
