# scene_model.py
from __future__ import annotations

import json
import logging
import math
import re
import struct
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import ConvexHull
from scipy.spatial import QhullError
from scipy.spatial.transform import Rotation

logger = logging.getLogger(__name__)

SCENE_FORMAT_VERSION = 1
DEFAULT_MASS_KG = 0.1
BRUTE_FORCE_LIMIT = 2000
D1_THRESHOLD = 0.1

IDENT_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
# Names that already mean something in the DSL feature namespace.
RESERVED_NAMES = {"eef", "gripper", "table"}

_SCENE_KEYS = {"format_version", "task_title", "caption", "table_height", "objects"}
_OBJECT_KEYS = {
    "name",
    "size",
    "mesh_diameter",
    "scale_ratio",
    "urdf_path",
    "pose_track",
    "mesh_path",
    "source_frame",
    "is_container",
}


# ---------------------------
# Errors
# ---------------------------
class InvalidDepthError(ValueError):
    pass


class PixelBoundsError(ValueError):
    pass


class EmptyMaskError(ValueError):
    pass


class DegenerateMeshError(ValueError):
    pass


class SceneParseError(ValueError):
    """
    Malformed scene / ingestion file.

    `location` is "line:col" for text/JSON syntax problems or a key path
    like "objects[1].size" for structural ones.
    """

    def __init__(self, source: str, location: str, message: str):
        self.source = source
        self.location = location
        super().__init__(f"{source}:{location}: {message}")


class SceneValidationError(ValueError):
    def __init__(self, failures: List[str]):
        self.failures = list(failures)
        super().__init__("scene validation failed: " + "; ".join(self.failures))


# ---------------------------
# Types
# ---------------------------
@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: Optional[int] = None
    height: Optional[int] = None

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "CameraIntrinsics":
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=d.get("width"),
            height=d.get("height"),
        )


@dataclass
class DepthMap:
    width: int
    height: int
    values: np.ndarray  # (height, width) float64, meters, 0 = invalid

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.size != self.width * self.height:
            raise ValueError(f"depth map has {arr.size} values, expected {self.width * self.height}")
        arr = arr.reshape(self.height, self.width)
        if not np.all(np.isfinite(arr)):
            raise InvalidDepthError("depth map contains non-finite values")
        if np.any(arr < 0):
            raise InvalidDepthError("depth map contains negative values")
        self.values = arr


@dataclass
class ObjectMask:
    width: int
    height: int
    pixels: np.ndarray  # (n, 2) int64 rows of (i, j), sorted and unique

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.int64).reshape(-1, 2)
        if px.size:
            bad = (px[:, 0] < 0) | (px[:, 0] >= self.height) | (px[:, 1] < 0) | (px[:, 1] >= self.width)
            if np.any(bad):
                i, j = px[np.argmax(bad)]
                raise PixelBoundsError(f"mask pixel ({i}, {j}) outside {self.height}x{self.width}")
            px = np.unique(px, axis=0)
        self.pixels = px

    @classmethod
    def from_pixels(cls, width: int, height: int, pixels: Iterable[Tuple[int, int]]) -> "ObjectMask":
        return cls(width, height, np.array(list(pixels), dtype=np.int64).reshape(-1, 2))

    def as_bool(self) -> np.ndarray:
        out = np.zeros((self.height, self.width), dtype=bool)
        if len(self.pixels):
            out[self.pixels[:, 0], self.pixels[:, 1]] = True
        return out

    def __len__(self) -> int:
        return int(len(self.pixels))


@dataclass(frozen=True)
class PoseSample:
    frame_index: int
    position: Tuple[float, float, float]
    orientation: Tuple[float, float, float, float]  # (w, x, y, z)


@dataclass
class PoseTrack:
    samples: List[PoseSample]


@dataclass
class ObjectSpec:
    name: str
    mesh_diameter: float
    size: Tuple[float, float, float]
    scale_ratio: float
    urdf_path: str
    pose_track: PoseTrack
    mesh_path: Optional[str] = None
    source_frame: Optional[str] = None  # "first" | "last", chosen by the operator
    is_container: bool = False
    extra: Dict[str, Any] = field(default_factory=dict)


@dataclass
class SceneSpec:
    task_title: str
    caption: str
    objects: List[ObjectSpec]
    table_height: float = 0.0
    format_version: int = SCENE_FORMAT_VERSION
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def object_names(self) -> Tuple[str, ...]:
        return tuple(o.name for o in self.objects)

    def get(self, name: str) -> ObjectSpec:
        for o in self.objects:
            if o.name == name:
                return o
        raise KeyError(name)


class PoseDelta(NamedTuple):
    delta_position: np.ndarray
    delta_yaw: float
    first: PoseSample
    last: PoseSample


# ---------------------------
# Geometry
# ---------------------------
def _check_depth(depth: float) -> float:
    d = float(depth)
    if not math.isfinite(d) or d <= 0:
        raise InvalidDepthError(f"depth must be positive and finite, got {depth!r}")
    return d


def unproject_pixel(K: CameraIntrinsics, pixel: Tuple[int, int], depth: float) -> np.ndarray:
    """
    Back-project one pixel into camera coordinates.

    Rules:
      - pixel is (i, j) = (row, column); the homogeneous vector is [x, y, 1]
        with x = j and y = i.
      - p = K^-1 [x, y, 1]^T * d, so p.z == depth.
    """
    d = _check_depth(depth)
    i, j = int(pixel[0]), int(pixel[1])
    if i < 0 or j < 0:
        raise PixelBoundsError(f"pixel ({i}, {j}) has negative coordinates")
    if K.height is not None and i >= K.height:
        raise PixelBoundsError(f"row {i} outside image height {K.height}")
    if K.width is not None and j >= K.width:
        raise PixelBoundsError(f"column {j} outside image width {K.width}")
    ax = (j - K.cx) / K.fx
    ay = (i - K.cy) / K.fy
    return np.array([ax * d, ay * d, d], dtype=np.float64)


def _unproject_many(K: CameraIntrinsics, rows: np.ndarray, cols: np.ndarray, depths: np.ndarray) -> np.ndarray:
    # Same operation order as unproject_pixel, so results match bit for bit.
    ax = (cols.astype(np.float64) - K.cx) / K.fx
    ay = (rows.astype(np.float64) - K.cy) / K.fy
    return np.stack([ax * depths, ay * depths, depths], axis=1)


def _max_pairwise_distance(points: np.ndarray, chunk: int = 512) -> float:
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n < 2:
        return 0.0
    xs, ys, zs = pts[:, 0], pts[:, 1], pts[:, 2]
    best = 0.0
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        dx = xs[start:stop, None] - xs[None, :]
        dy = ys[start:stop, None] - ys[None, :]
        dz = zs[start:stop, None] - zs[None, :]
        d2 = dx * dx + dy * dy + dz * dz
        best = max(best, float(d2.max()))
    return math.sqrt(best)


def masked_diameter(mask: ObjectMask, depth: DepthMap, K: CameraIntrinsics) -> float:
    """
    D_image: the largest distance between unprojected mask pixels.

    Pixels with zero depth are skipped.
    """
    if (mask.width, mask.height) != (depth.width, depth.height):
        raise ValueError(
            f"mask is {mask.width}x{mask.height} but depth is {depth.width}x{depth.height}"
        )
    if len(mask) == 0:
        raise EmptyMaskError("mask has no pixels")
    rows, cols = mask.pixels[:, 0], mask.pixels[:, 1]
    d = depth.values[rows, cols]
    valid = d > 0
    if not np.any(valid):
        raise EmptyMaskError("no masked pixel has positive depth")
    pts = _unproject_many(K, rows[valid], cols[valid], d[valid])
    return _max_pairwise_distance(pts)


def mesh_diameter(vertices: Sequence[Sequence[float]]) -> float:
    """
    D_mesh: largest vertex-to-vertex distance.

    Up to BRUTE_FORCE_LIMIT vertices the pairwise scan runs directly; above it
    only hull vertices are scanned (the farthest pair always lies on the hull).
    """
    V = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    if len(V) == 0:
        raise DegenerateMeshError("mesh has no vertices")
    if len(V) <= BRUTE_FORCE_LIMIT:
        return _max_pairwise_distance(V)
    try:
        hull = ConvexHull(V)
        return _max_pairwise_distance(V[hull.vertices])
    except QhullError:
        # flat or degenerate clouds
        logger.debug("convex hull failed on %d vertices; using full scan", len(V))
        return _max_pairwise_distance(V)


def scale_ratio(d_image: float, d_mesh: float) -> float:
    if not d_mesh > 0:
        raise DegenerateMeshError(f"mesh diameter must be positive, got {d_mesh!r}")
    if d_image < 0:
        raise ValueError(f"image diameter must be non-negative, got {d_image!r}")
    return float(d_image) / float(d_mesh)


def quat_yaw(q: Sequence[float]) -> float:
    w, x, y, z = (float(v) for v in q)
    return float(Rotation.from_quat([x, y, z, w]).as_euler("ZYX")[0])


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    out = math.remainder(a, 2.0 * math.pi)
    if out == -math.pi:
        out = math.pi
    return out


def pose_delta(track: PoseTrack) -> PoseDelta:
    if not track.samples:
        raise ValueError("pose track is empty")
    first, last = track.samples[0], track.samples[-1]
    dpos = np.asarray(last.position, dtype=np.float64) - np.asarray(first.position, dtype=np.float64)
    dyaw = wrap_angle(quat_yaw(last.orientation) - quat_yaw(first.orientation))
    return PoseDelta(dpos, dyaw, first, last)


def center_crop_region(width: int, height: int, fraction: float = 0.8) -> ObjectMask:
    """Region covering the central `fraction` of the image in each dimension."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    ch = max(1, int(round(height * fraction)))
    cw = max(1, int(round(width * fraction)))
    i0 = (height - ch) // 2
    j0 = (width - cw) // 2
    ii, jj = np.meshgrid(np.arange(i0, i0 + ch), np.arange(j0, j0 + cw), indexing="ij")
    return ObjectMask(width, height, np.stack([ii.ravel(), jj.ravel()], axis=1))


def d1_metric(predicted: DepthMap, ground_truth: DepthMap, region: Optional[ObjectMask] = None) -> float:
    """
    Fraction of valid pixels with |pred - gt| / gt <= 0.1.

    Valid = ground truth > 0 and inside `region` (whole image when None).
    """
    if (predicted.width, predicted.height) != (ground_truth.width, ground_truth.height):
        raise ValueError("predicted and ground-truth depth sizes differ")
    valid = ground_truth.values > 0
    if region is not None:
        if (region.width, region.height) != (ground_truth.width, ground_truth.height):
            raise ValueError("region size differs from depth size")
        valid &= region.as_bool()
    n = int(valid.sum())
    if n == 0:
        raise EmptyMaskError("no valid ground-truth pixels in region")
    gt = ground_truth.values[valid]
    rel = np.abs(predicted.values[valid] - gt) / gt
    return float(np.count_nonzero(rel <= D1_THRESHOLD)) / n


# ---------------------------
# URDF
# ---------------------------
def sanitize_name(name: str) -> str:
    out = re.sub(r"[^A-Za-z0-9_]", "_", name or "")
    if not out or out[0].isdigit():
        out = "_" + out
    return out


def _fmt(v: float) -> str:
    return format(float(v), ".12g")


def _fmt3(vals: Iterable[float]) -> str:
    return " ".join(_fmt(v) for v in vals)


def emit_urdf(obj: ObjectSpec, mass: float = DEFAULT_MASS_KG) -> str:
    """
    One-link URDF for a scaled mesh object.

    Rules:
      - visual and collision reference the mesh with uniform scale rho
      - a second collision box carries the metric bounding size
      - inertia is that of a uniform box of obj.size
      - identical input -> identical bytes
    """
    name = sanitize_name(obj.name)
    l, w, h = (float(v) for v in obj.size)
    mesh_file = obj.mesh_path or f"{name}.obj"
    scale = _fmt3([obj.scale_ratio] * 3)

    robot = ET.Element("robot", {"name": name})
    link = ET.SubElement(robot, "link", {"name": f"{name}_link"})

    inertial = ET.SubElement(link, "inertial")
    ET.SubElement(inertial, "origin", {"xyz": "0 0 0", "rpy": "0 0 0"})
    ET.SubElement(inertial, "mass", {"value": _fmt(mass)})
    ET.SubElement(
        inertial,
        "inertia",
        {
            "ixx": _fmt(mass * (w * w + h * h) / 12.0),
            "ixy": "0",
            "ixz": "0",
            "iyy": _fmt(mass * (l * l + h * h) / 12.0),
            "iyz": "0",
            "izz": _fmt(mass * (l * l + w * w) / 12.0),
        },
    )

    visual = ET.SubElement(link, "visual")
    ET.SubElement(visual, "origin", {"xyz": "0 0 0", "rpy": "0 0 0"})
    geom = ET.SubElement(visual, "geometry")
    ET.SubElement(geom, "mesh", {"filename": mesh_file, "scale": scale})

    collision = ET.SubElement(link, "collision", {"name": "mesh"})
    geom = ET.SubElement(collision, "geometry")
    ET.SubElement(geom, "mesh", {"filename": mesh_file, "scale": scale})

    bbox = ET.SubElement(link, "collision", {"name": "bounding_box"})
    geom = ET.SubElement(bbox, "geometry")
    ET.SubElement(geom, "box", {"size": _fmt3((l, w, h))})

    ET.indent(robot, space="  ")
    return '<?xml version="1.0"?>\n' + ET.tostring(robot, encoding="unicode") + "\n"


def write_urdf(obj: ObjectSpec, path: str | Path, mass: float = DEFAULT_MASS_KG) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(emit_urdf(obj, mass=mass), encoding="utf-8")
    return p


# ---------------------------
# Scene files
# ---------------------------
def _num(v: Any, source: str, where: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SceneParseError(source, where, f"expected a number, got {type(v).__name__}")
    return float(v)


def _vec(v: Any, n: int, source: str, where: str) -> Tuple[float, ...]:
    if not isinstance(v, list) or len(v) != n:
        raise SceneParseError(source, where, f"expected a list of {n} numbers")
    return tuple(_num(x, source, f"{where}[{k}]") for k, x in enumerate(v))


def _str(v: Any, source: str, where: str) -> str:
    if not isinstance(v, str):
        raise SceneParseError(source, where, "expected a string")
    return v


def scene_from_dict(d: Any, source: str = "<scene>") -> SceneSpec:
    if not isinstance(d, dict):
        raise SceneParseError(source, "$", "scene must be a JSON object")
    for key in ("task_title", "caption", "objects"):
        if key not in d:
            raise SceneParseError(source, key, "missing field")
    objs_raw = d["objects"]
    if not isinstance(objs_raw, list):
        raise SceneParseError(source, "objects", "expected a list")

    objects: List[ObjectSpec] = []
    for k, o in enumerate(objs_raw):
        where = f"objects[{k}]"
        if not isinstance(o, dict):
            raise SceneParseError(source, where, "expected an object")
        for key in ("name", "size", "mesh_diameter", "scale_ratio", "urdf_path", "pose_track"):
            if key not in o:
                raise SceneParseError(source, f"{where}.{key}", "missing field")
        track_raw = o["pose_track"]
        if not isinstance(track_raw, list):
            raise SceneParseError(source, f"{where}.pose_track", "expected a list")
        samples = []
        for s_idx, s in enumerate(track_raw):
            sw = f"{where}.pose_track[{s_idx}]"
            if not isinstance(s, dict):
                raise SceneParseError(source, sw, "expected an object")
            frame = s.get("frame")
            if isinstance(frame, bool) or not isinstance(frame, int):
                raise SceneParseError(source, f"{sw}.frame", "expected an integer")
            samples.append(
                PoseSample(
                    frame_index=frame,
                    position=_vec(s.get("pos"), 3, source, f"{sw}.pos"),
                    orientation=_vec(s.get("quat"), 4, source, f"{sw}.quat"),
                )
            )
        source_frame = o.get("source_frame")
        if source_frame is not None and source_frame not in ("first", "last"):
            raise SceneParseError(source, f"{where}.source_frame", "expected 'first' or 'last'")
        objects.append(
            ObjectSpec(
                name=_str(o["name"], source, f"{where}.name"),
                mesh_diameter=_num(o["mesh_diameter"], source, f"{where}.mesh_diameter"),
                size=_vec(o["size"], 3, source, f"{where}.size"),
                scale_ratio=_num(o["scale_ratio"], source, f"{where}.scale_ratio"),
                urdf_path=_str(o["urdf_path"], source, f"{where}.urdf_path"),
                pose_track=PoseTrack(samples),
                mesh_path=o.get("mesh_path"),
                source_frame=source_frame,
                is_container=bool(o.get("is_container", False)),
                extra={kk: vv for kk, vv in o.items() if kk not in _OBJECT_KEYS},
            )
        )

    version = d.get("format_version", SCENE_FORMAT_VERSION)
    if isinstance(version, bool) or not isinstance(version, int):
        raise SceneParseError(source, "format_version", "expected an integer")
    return SceneSpec(
        task_title=_str(d["task_title"], source, "task_title"),
        caption=_str(d["caption"], source, "caption"),
        objects=objects,
        table_height=_num(d.get("table_height", 0.0), source, "table_height"),
        format_version=version,
        extra={kk: vv for kk, vv in d.items() if kk not in _SCENE_KEYS},
    )


def scene_to_dict(scene: SceneSpec) -> Dict[str, Any]:
    objs = []
    for o in scene.objects:
        od: Dict[str, Any] = {
            "name": o.name,
            "size": [float(v) for v in o.size],
            "mesh_diameter": float(o.mesh_diameter),
            "scale_ratio": float(o.scale_ratio),
            "urdf_path": o.urdf_path,
            "pose_track": [
                {"frame": s.frame_index, "pos": [float(v) for v in s.position], "quat": [float(v) for v in s.orientation]}
                for s in o.pose_track.samples
            ],
        }
        if o.mesh_path is not None:
            od["mesh_path"] = o.mesh_path
        if o.source_frame is not None:
            od["source_frame"] = o.source_frame
        if o.is_container:
            od["is_container"] = True
        od.update(o.extra)
        objs.append(od)
    out: Dict[str, Any] = {
        "format_version": scene.format_version,
        "task_title": scene.task_title,
        "caption": scene.caption,
        "table_height": float(scene.table_height),
        "objects": objs,
    }
    out.update(scene.extra)
    return out


def validate_scene(scene: SceneSpec) -> List[str]:
    """Returns every invariant failure (empty list = valid)."""
    failures: List[str] = []
    if scene.format_version > SCENE_FORMAT_VERSION:
        failures.append(f"format_version {scene.format_version} is newer than supported {SCENE_FORMAT_VERSION}")
    if not scene.objects:
        failures.append("scene has no objects")
    if not math.isfinite(scene.table_height):
        failures.append("table_height must be finite")
    seen = set()
    for k, o in enumerate(scene.objects):
        where = f"objects[{k}]"
        if not IDENT_RE.match(o.name):
            failures.append(f"{where}.name {o.name!r} is not an identifier")
        elif o.name in RESERVED_NAMES:
            failures.append(f"{where}.name {o.name!r} is reserved")
        if o.name in seen:
            failures.append(f"{where}.name {o.name!r} is duplicated")
        seen.add(o.name)
        if any(not (v > 0 and math.isfinite(v)) for v in o.size):
            failures.append(f"{where}.size components must be positive")
        if not (o.scale_ratio > 0 and math.isfinite(o.scale_ratio)):
            failures.append(f"{where}.scale_ratio must be positive")
        if o.mesh_diameter < 0:
            failures.append(f"{where}.mesh_diameter must be non-negative")
        samples = o.pose_track.samples
        if not samples:
            failures.append(f"{where}.pose_track is empty")
        prev = -1
        for s_idx, s in enumerate(samples):
            if s.frame_index <= prev:
                failures.append(f"{where}.pose_track[{s_idx}].frame is not increasing")
            prev = s.frame_index
            if abs(math.sqrt(sum(q * q for q in s.orientation)) - 1.0) > 1e-6:
                failures.append(f"{where}.pose_track[{s_idx}].quat is not unit length")
    return failures


def load_scene(path: str | Path) -> SceneSpec:
    p = Path(path)
    source = str(p)
    text = p.read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise SceneParseError(source, f"{e.lineno}:{e.colno}", e.msg) from e
    scene = scene_from_dict(raw, source)
    failures = validate_scene(scene)
    if failures:
        raise SceneValidationError(failures)
    return scene


def dumps_scene(scene: SceneSpec) -> str:
    return json.dumps(scene_to_dict(scene), indent=2, ensure_ascii=False) + "\n"


def save_scene(scene: SceneSpec, path: str | Path) -> Path:
    failures = validate_scene(scene)
    if failures:
        raise SceneValidationError(failures)
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(dumps_scene(scene), encoding="utf-8")
    return p


# ---------------------------
# Ingestion readers
# ---------------------------
def write_depth_bin(depth: DepthMap, path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    header = struct.pack("<II", depth.width, depth.height)
    p.write_bytes(header + depth.values.astype("<f4").tobytes())
    return p


def read_depth_bin(path: str | Path) -> DepthMap:
    """8-byte header (<II width, height) then width*height little-endian float32."""
    p = Path(path)
    data = p.read_bytes()
    if len(data) < 8:
        raise SceneParseError(str(p), "0", "depth file shorter than its header")
    width, height = struct.unpack_from("<II", data, 0)
    expected = width * height * 4
    if len(data) - 8 != expected:
        raise SceneParseError(str(p), "8", f"expected {expected} bytes of depth, found {len(data) - 8}")
    values = np.frombuffer(data, dtype="<f4", offset=8).astype(np.float64)
    try:
        return DepthMap(width, height, values)
    except ValueError as e:
        raise SceneParseError(str(p), "8", str(e)) from e


def read_mask_rle(path: str | Path, width: int, height: int) -> ObjectMask:
    """Lines of "i j_start j_end" (inclusive). Blank lines and # comments are skipped."""
    p = Path(path)
    pixels: List[Tuple[int, int]] = []
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        parts = s.split()
        if len(parts) != 3:
            raise SceneParseError(str(p), f"{lineno}:1", "expected 'i j_start j_end'")
        try:
            i, j0, j1 = (int(x) for x in parts)
        except ValueError as e:
            raise SceneParseError(str(p), f"{lineno}:1", "run values must be integers") from e
        if j1 < j0:
            raise SceneParseError(str(p), f"{lineno}:1", "run end before run start")
        pixels.extend((i, j) for j in range(j0, j1 + 1))
    try:
        return ObjectMask.from_pixels(width, height, pixels)
    except PixelBoundsError as e:
        raise SceneParseError(str(p), "-", str(e)) from e


def read_vertices(path: str | Path) -> np.ndarray:
    """Plain "x y z" lines or OBJ "v x y z" lines; everything else is ignored."""
    p = Path(path)
    verts: List[Tuple[float, float, float]] = []
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        parts = s.split()
        if parts[0] == "v":
            parts = parts[1:4]
        elif not _looks_numeric(parts[0]):
            continue
        if len(parts) < 3:
            raise SceneParseError(str(p), f"{lineno}:1", "vertex needs three coordinates")
        try:
            verts.append((float(parts[0]), float(parts[1]), float(parts[2])))
        except ValueError as e:
            raise SceneParseError(str(p), f"{lineno}:1", "vertex coordinates must be numbers") from e
    return np.array(verts, dtype=np.float64).reshape(-1, 3)


def _looks_numeric(tok: str) -> bool:
    try:
        float(tok)
        return True
    except ValueError:
        return False


def read_pose_track(path: str | Path) -> PoseTrack:
    """JSON list of {frame, pos, quat} (or {"samples": [...]})."""
    p = Path(path)
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SceneParseError(str(p), f"{e.lineno}:{e.colno}", e.msg) from e
    if isinstance(raw, dict):
        raw = raw.get("samples")
    if not isinstance(raw, list):
        raise SceneParseError(str(p), "$", "expected a list of pose samples")
    samples = []
    for k, s in enumerate(raw):
        where = f"[{k}]"
        if not isinstance(s, dict) or not isinstance(s.get("frame"), int):
            raise SceneParseError(str(p), where, "sample needs an integer frame")
        samples.append(
            PoseSample(
                frame_index=int(s["frame"]),
                position=_vec(s.get("pos"), 3, str(p), f"{where}.pos"),
                orientation=_vec(s.get("quat"), 4, str(p), f"{where}.quat"),
            )
        )
    return PoseTrack(samples)


def ingest_object(
    name: str,
    mask: ObjectMask,
    depth: DepthMap,
    K: CameraIntrinsics,
    vertices: np.ndarray,
    pose_track: PoseTrack,
    *,
    urdf_path: str,
    mesh_path: Optional[str] = None,
    source_frame: Optional[str] = None,
    is_container: bool = False,
) -> ObjectSpec:
    """
    Full per-object pipeline: D_image, D_mesh, rho, then metric size.

    Size is the mesh bounding-box extent times rho, floored at 1e-4 m so that
    flat meshes still give a valid box.
    """
    d_image = masked_diameter(mask, depth, K)
    V = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    d_mesh = mesh_diameter(V)
    rho = scale_ratio(d_image, d_mesh)
    extent = (V.max(axis=0) - V.min(axis=0)) * rho
    size = tuple(max(float(v), 1e-4) for v in extent)
    logger.info("ingested %s: D_image=%.4f D_mesh=%.4f rho=%.4f", name, d_image, d_mesh, rho)
    return ObjectSpec(
        name=name,
        mesh_diameter=d_mesh,
        size=size,  # type: ignore[arg-type]
        scale_ratio=rho,
        urdf_path=urdf_path,
        pose_track=pose_track,
        mesh_path=mesh_path,
        source_frame=source_frame,
        is_container=is_container,
    )
