"""Dataset file formats: ascii PLY point clouds, camera JSON, PNG/PPM
images, and PFM float depth maps."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .scene import Camera

PLY_FLOAT_TYPES = {"float", "float32", "double", "float64"}
PLY_TYPE_WIDTH = {
    "char": 1, "int8": 1, "uchar": 1, "uint8": 1,
    "short": 2, "int16": 2, "ushort": 2, "uint16": 2,
    "int": 4, "int32": 4, "uint": 4, "uint32": 4,
    "float": 4, "float32": 4, "double": 8, "float64": 8,
}


def load_pointcloud(path):
    """Parse an ascii PLY: returns (positions (M, 3), colors (M, 3) in [0,1]
    or None). Unknown properties are skipped; malformed input raises with
    the offending line number."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}:1: not a PLY file (missing 'ply' magic)")
    n_vertex = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    body_start = None
    for no, raw in enumerate(lines[1:], 2):
        line = raw.strip()
        if line.startswith("comment") or not line:
            continue
        if line.startswith("format"):
            if "ascii" not in line:
                raise ValueError(f"{path}:{no}: only ascii PLY is supported")
        elif line.startswith("element"):
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{no}: malformed element line")
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n_vertex = int(parts[2])
        elif line.startswith("property"):
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{no}: malformed property line")
            if in_vertex:
                props.append((parts[1], parts[2]))
        elif line == "end_header":
            body_start = no
            break
        else:
            raise ValueError(f"{path}:{no}: unexpected header line {raw!r}")
    if body_start is None:
        raise ValueError(f"{path}: header never terminated with end_header")
    if n_vertex is None:
        raise ValueError(f"{path}: no vertex element declared")
    if n_vertex == 0:
        raise ValueError(f"{path}: zero vertices")
    names = [p[1] for p in props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise ValueError(f"{path}: vertex element lacks property {axis!r}")
        if props[names.index(axis)][0] not in PLY_FLOAT_TYPES:
            raise ValueError(f"{path}: property {axis!r} must be float typed")

    rows = []
    body = lines[body_start:]
    if len(body) < n_vertex:
        raise ValueError(
            f"{path}:{body_start + len(body)}: expected {n_vertex} vertices, file ends early")
    for k in range(n_vertex):
        no = body_start + 1 + k
        parts = body[k].split()
        if len(parts) != len(props):
            raise ValueError(
                f"{path}:{no}: expected {len(props)} values, got {len(parts)}")
        rows.append([float(v) for v in parts])
    data = np.asarray(rows)
    pos = data[:, [names.index(a) for a in ("x", "y", "z")]]
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        rgb = data[:, [names.index(c) for c in ("red", "green", "blue")]]
        colors = rgb / 255.0
    return pos, colors


def save_pointcloud(path, positions: np.ndarray, colors: np.ndarray | None = None) -> None:
    positions = np.asarray(positions)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(positions)}",
             "property float x", "property float y", "property float z"]
    if colors is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    for i, p in enumerate(positions):
        row = f"{p[0]:.8g} {p[1]:.8g} {p[2]:.8g}"
        if colors is not None:
            c = np.clip(np.round(np.asarray(colors[i]) * 255), 0, 255).astype(int)
            row += f" {c[0]} {c[1]} {c[2]}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


# -- cameras -----------------------------------------------------------------------


def _polar_correct(R: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(R)
    return u @ vt


def load_cameras(path) -> list[Camera]:
    """Read a JSON array of camera records; near-orthonormal rotations are
    polar-corrected, anything worse (or a reflection) is rejected."""
    records = json.loads(Path(path).read_text())
    cams = []
    for rec in records:
        w2c = np.asarray(rec["world_to_cam"], dtype=np.float64).reshape(4, 4)
        R = w2c[:3, :3]
        if np.linalg.det(R) < 0:
            raise ValueError(f"camera {rec['id']}: reflection (det < 0) is not a rigid pose")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-4):
            raise ValueError(f"camera {rec['id']}: rotation exceeds orthonormality tolerance")
        w2c[:3, :3] = _polar_correct(R)
        cams.append(Camera(world_to_cam=w2c, fx=rec["fx"], fy=rec["fy"],
                           cx=rec["cx"], cy=rec["cy"], width=rec["width"],
                           height=rec["height"], cam_id=rec["id"]))
    return cams


def save_cameras(path, cameras) -> None:
    records = []
    for cam in cameras:
        records.append({
            "id": cam.cam_id, "width": cam.width, "height": cam.height,
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "world_to_cam": [float(v) for v in cam.world_to_cam.reshape(-1)],
        })
    Path(path).write_text(json.dumps(records, indent=1))


# -- images ------------------------------------------------------------------------


def write_image(path, image: np.ndarray) -> None:
    """8-bit PNG or PPM from a float image in [0, 1]."""
    path = Path(path)
    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    if path.suffix.lower() == ".ppm":
        with open(path, "wb") as fh:
            fh.write(f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
            fh.write(arr.tobytes())
    else:
        Image.fromarray(arr, mode="RGB").save(path)


def read_image(path) -> np.ndarray:
    """Float (H, W, 3) in [0, 1] from an 8-bit PNG or binary PPM."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return _read_ppm(path)
    img = Image.open(path)
    if img.mode in ("I", "I;16", "I;16B", "I;16L"):
        raise ValueError(f"{path}: unsupported bit depth (expected 8-bit)")
    return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def _read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 10:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise ValueError(f"{path}: only binary P6 PPM is supported")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported bit depth (maxval {maxval})")
    pos += 1
    arr = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return arr.reshape(h, w, 3).astype(np.float64) / 255.0


# -- PFM float maps -----------------------------------------------------------------


def write_pfm(path, data: np.ndarray) -> None:
    """Single-channel 32-bit float Portable FloatMap, little-endian."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim != 2:
        raise ValueError("write_pfm expects a single-channel map")
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{data.shape[1]} {data.shape[0]}\n-1.0\n".encode())
        fh.write(data[::-1].tobytes())  # PFM stores rows bottom-up


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"Pf":
            raise ValueError(f"{path}: not a single-channel PFM")
        w, h = (int(v) for v in fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        arr = np.frombuffer(fh.read(w * h * 4), dtype=dtype).reshape(h, w)
    return arr[::-1].astype(np.float64)


# -- dataset directories ---------------------------------------------------------------


class SceneDataset:
    """Posed images with depth priors, an initialization cloud, and a
    train/test split, as written by ``gen`` (or assembled externally in the
    same layout)."""

    def __init__(self, images, depths, cameras, train_ids, test_ids,
                 init_points, init_colors, extent, meta=None):
        self.images = images
        self.depths = depths
        self.cameras = cameras
        self.train_ids = list(train_ids)
        self.test_ids = list(test_ids)
        self.init_points = init_points
        self.init_colors = init_colors
        self.extent = float(extent)
        self.meta = meta or {}
        if set(self.train_ids) & set(self.test_ids):
            raise ValueError("train and test views must be disjoint")

    @property
    def n_views(self) -> int:
        return len(self.images)


def save_dataset(root, dataset: SceneDataset) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "depths").mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(dataset.images):
        write_image(root / "images" / f"{i:03d}.png", img)
    for i, dep in enumerate(dataset.depths):
        write_pfm(root / "depths" / f"{i:03d}.pfm", dep)
    save_cameras(root / "cameras.json", dataset.cameras)
    save_pointcloud(root / "init.ply", dataset.init_points, dataset.init_colors)
    meta = dict(dataset.meta)
    meta.update({
        "train_ids": dataset.train_ids, "test_ids": dataset.test_ids,
        "extent": dataset.extent, "n_views": dataset.n_views,
        "format_version": 1,
    })
    (root / "meta.json").write_text(json.dumps(meta, indent=1))


def load_dataset(root) -> SceneDataset:
    root = Path(root)
    meta = json.loads((root / "meta.json").read_text())
    cameras = load_cameras(root / "cameras.json")
    n = meta["n_views"]
    images = [read_image(root / "images" / f"{i:03d}.png") for i in range(n)]
    depths = []
    for i in range(n):
        p = root / "depths" / f"{i:03d}.pfm"
        depths.append(read_pfm(p) if p.exists() else None)
    pos, colors = load_pointcloud(root / "init.ply")
    return SceneDataset(images=images, depths=depths, cameras=cameras,
                        train_ids=meta["train_ids"], test_ids=meta["test_ids"],
                        init_points=pos, init_colors=colors,
                        extent=meta["extent"], meta=meta)
