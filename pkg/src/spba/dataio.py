"""File formats and sequence loading.

JSON for poses and configuration, PFM for inverse-depth maps, PNG for
images and masks, ASCII PLY for point clouds. All writes are atomic
(temp file + rename in the target directory).
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PILImage

from .geometry import Intrinsics, Twist
from .renderer import SampledImage


def atomic_write_bytes(path, payload: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# PFM (single-channel, little-endian, scale -1.0; scanlines bottom-up)
# ---------------------------------------------------------------------------


def write_pfm(path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise ValueError("PFM writer expects a 2-D map")
    header = f"Pf\n{data.shape[1]} {data.shape[0]}\n-1.0\n".encode("ascii")
    payload = header + np.flipud(data).astype("<f4").tobytes()
    atomic_write_bytes(path, payload)


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind != b"Pf":
            raise ValueError(f"unsupported PFM kind {kind!r} (only grayscale Pf)")
        dims = f.readline().split()
        width, height = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        raw = f.read(width * height * 4)
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(raw, dtype=dtype).reshape(height, width)
    return np.flipud(data).astype(np.float32)


# ---------------------------------------------------------------------------
# PNG images and masks
# ---------------------------------------------------------------------------


def write_image_png(path, image) -> None:
    data = image.data if isinstance(image, SampledImage) else np.asarray(image)
    arr = np.clip(np.round(data), 0, 255).astype(np.uint8)
    import io

    buf = io.BytesIO()
    PILImage.fromarray(arr, mode="RGB").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def read_image_png(path) -> SampledImage:
    arr = np.asarray(PILImage.open(path).convert("RGB"), dtype=float)
    return SampledImage(data=arr)


def write_mask_png(path, mask: np.ndarray) -> None:
    arr = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    import io

    buf = io.BytesIO()
    PILImage.fromarray(arr, mode="L").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def read_mask_png(path) -> np.ndarray:
    arr = np.asarray(PILImage.open(path).convert("L"))
    return arr >= 128


# ---------------------------------------------------------------------------
# ASCII PLY point clouds
# ---------------------------------------------------------------------------


def write_ply(path, cloud) -> None:
    from .shapespace import PointCloud

    if not isinstance(cloud, PointCloud):
        cloud = PointCloud(points=np.asarray(cloud, dtype=float))
    lines = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
    lines += [f"property double {axis}" for axis in ("x", "y", "z")]
    has_color = cloud.colors is not None
    if has_color:
        lines += [f"property uchar {c}" for c in ("red", "green", "blue")]
    lines.append("end_header")
    if has_color:
        col = np.clip(np.round(cloud.colors), 0, 255).astype(int)
        for p, c in zip(cloud.points, col):
            lines.append(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g} {c[0]} {c[1]} {c[2]}")
    else:
        for p in cloud.points:
            lines.append(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_ply(path):
    from .shapespace import PointCloud

    with open(path, "r", encoding="ascii") as f:
        if f.readline().strip() != "ply":
            raise ValueError("not a PLY file")
        count = None
        props = []
        for line in f:
            token = line.split()
            if not token:
                continue
            if token[0] == "element":
                if token[1] != "vertex":
                    raise ValueError("only vertex elements are supported")
                count = int(token[2])
            elif token[0] == "property":
                props.append(token[2])
            elif token[0] == "end_header":
                break
        if count is None:
            raise ValueError("PLY header missing vertex element")
        has_color = "red" in props
        pts = np.empty((count, 3))
        col = np.empty((count, 3)) if has_color else None
        for i in range(count):
            vals = f.readline().split()
            pts[i] = [float(v) for v in vals[:3]]
            if has_color:
                col[i] = [float(v) for v in vals[3:6]]
    return PointCloud(points=pts, colors=col)


# ---------------------------------------------------------------------------
# Poses, intrinsics, styles
# ---------------------------------------------------------------------------


def write_poses(path, poses) -> None:
    write_json(
        path,
        {"frames": [{"omega": p.omega.tolist(), "t": p.t.tolist()} for p in poses]},
    )


def read_poses(path):
    doc = read_json(path)
    return [Twist(np.array(f["omega"]), np.array(f["t"])) for f in doc["frames"]]


def write_intrinsics(path, K: Intrinsics) -> None:
    write_json(
        path,
        {"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy, "width": K.width, "height": K.height},
    )


def read_intrinsics(path) -> Intrinsics:
    doc = read_json(path)
    return Intrinsics(
        fx=doc["fx"], fy=doc["fy"], cx=doc["cx"], cy=doc["cy"],
        width=int(doc["width"]), height=int(doc["height"]),
    )


def write_external(path, ext, depth_relpaths=None) -> None:
    """External PBA output: per frame R (9 row-major), t (3), optional PFM path."""
    frames = []
    for i, (R, t) in enumerate(ext.poses):
        entry = {"R": np.asarray(R).reshape(-1).tolist(), "t": np.asarray(t).reshape(-1).tolist()}
        if depth_relpaths is not None:
            entry["invdepth"] = depth_relpaths[i]
        frames.append(entry)
    write_json(path, {"frames": frames})


def read_external(path):
    from .alignment import ExternalPBAResult

    path = os.fspath(path)
    doc = read_json(path)
    base = os.path.dirname(path)
    poses = []
    maps = []
    any_maps = False
    for f in doc["frames"]:
        R = np.array(f["R"], dtype=float).reshape(3, 3)
        t = np.array(f["t"], dtype=float).reshape(3)
        poses.append((R, t))
        if "invdepth" in f:
            maps.append(read_pfm(os.path.join(base, f["invdepth"])))
            any_maps = True
        else:
            maps.append(None)
    return ExternalPBAResult(poses=poses, invdepth_maps=maps if any_maps else None)


# ---------------------------------------------------------------------------
# Sequences
# ---------------------------------------------------------------------------


@dataclass
class Frame:
    image: SampledImage
    mask: np.ndarray = None


@dataclass
class Sequence:
    """Target frame (index 0) plus L-1 source frames with shared intrinsics."""

    frames: list
    intrinsics: Intrinsics
    external: object = None

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ValueError("a sequence needs at least two frames")
        h, w = self.frames[0].image.data.shape[:2]
        for fr in self.frames:
            if fr.image.data.shape[:2] != (h, w):
                raise ValueError("all frames must share one resolution")

    def __len__(self) -> int:
        return len(self.frames)


def load_sequence(seq_dir) -> Sequence:
    seq_dir = os.fspath(seq_dir)
    K = read_intrinsics(os.path.join(seq_dir, "intrinsics.json"))
    frames = []
    i = 0
    while True:
        img_path = os.path.join(seq_dir, "frames", f"{i:04d}.png")
        if not os.path.exists(img_path):
            break
        mask_path = os.path.join(seq_dir, "masks", f"{i:04d}.png")
        mask = read_mask_png(mask_path) if os.path.exists(mask_path) else None
        frames.append(Frame(image=read_image_png(img_path), mask=mask))
        i += 1
    if not frames:
        raise FileNotFoundError(f"no frames/%04d.png found under {seq_dir}")
    ext_path = os.path.join(seq_dir, "external", "poses.json")
    external = read_external(ext_path) if os.path.exists(ext_path) else None
    return Sequence(frames=frames, intrinsics=K, external=external)
