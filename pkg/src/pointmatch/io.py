"""On-disk formats: raw f32 tensor files, scene directories, trajectory text,
and temporal-module checkpoints.

Everything written here is deterministic for fixed inputs: JSON is dumped with
sorted keys and a trailing newline, tensors are little-endian float32
row-major, and text floats use repr (shortest round-trip). No timestamps, so
rerunning a writer reproduces its output byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .attention import MotionParams
from .geometry import Pose, invert_pose, quat_to_rotation, rotation_to_quat
from .scenes import SceneConfig, SceneSequence, generate_scene

TENSOR_DTYPE = "f32"
TENSOR_ORDER = "row-major"
SCENE_FORMAT = "pointmatch-scene-v1"
CHECKPOINT_FORMAT = "motion-checkpoint-v1"


def dump_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def load_json(path):
    return json.loads(Path(path).read_text())


def write_tensor(dir_path, name: str, array: np.ndarray) -> dict:
    """Write `<name>.bin` under dir_path, return its manifest entry."""
    arr = np.asarray(array, dtype=np.float64)
    data = np.ascontiguousarray(arr, dtype="<f4")
    (Path(dir_path) / (name + ".bin")).write_bytes(data.tobytes())
    return {
        "name": name,
        "dims": list(arr.shape),
        "dtype": TENSOR_DTYPE,
        "order": TENSOR_ORDER,
    }


def read_tensor(dir_path, entry: dict) -> np.ndarray:
    """Read the tensor a manifest entry describes; rejects any mismatch."""
    name = entry.get("name")
    if not isinstance(name, str) or not name:
        raise ValueError("tensor entry has no name")
    if entry.get("dtype") != TENSOR_DTYPE:
        raise ValueError(f"tensor {name}: dtype must be {TENSOR_DTYPE!r}")
    if entry.get("order") != TENSOR_ORDER:
        raise ValueError(f"tensor {name}: order must be {TENSOR_ORDER!r}")
    dims = [int(d) for d in entry.get("dims", [])]
    if any(d < 0 for d in dims):
        raise ValueError(f"tensor {name}: negative dimension")
    count = int(np.prod(dims)) if dims else 1
    raw = (Path(dir_path) / (name + ".bin")).read_bytes()
    if len(raw) != 4 * count:
        raise ValueError(
            f"tensor {name}: file holds {len(raw)} bytes, expected {4 * count}"
        )
    return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(dims)


def write_trajectory(path, poses: Sequence[Pose]) -> None:
    """Camera-to-world lines "frame tx ty tz qw qx qy qz", repr precision."""
    lines = []
    for idx, pose in enumerate(poses):
        c2w = invert_pose(pose)
        q = rotation_to_quat(c2w.rotation)
        vals = " ".join(repr(float(v)) for v in (*c2w.translation, *q))
        lines.append(f"{idx} {vals}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path) -> list[Pose]:
    """Parse a trajectory file back into world-to-camera poses."""
    poses: list[Pose] = []
    for ln, line in enumerate(Path(path).read_text().splitlines()):
        parts = line.split()
        if len(parts) != 8:
            raise ValueError(f"trajectory line {ln}: expected 8 fields, got {len(parts)}")
        try:
            idx = int(parts[0])
            vals = np.array([float(p) for p in parts[1:]])
        except ValueError:
            raise ValueError(f"trajectory line {ln}: non-numeric field") from None
        if idx != len(poses):
            raise ValueError(f"trajectory line {ln}: frame indices must run 0,1,2,...")
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"trajectory line {ln}: non-finite value")
        t, q = vals[:3], vals[3:]
        norm = float(np.linalg.norm(q))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"trajectory line {ln}: quaternion is not unit length")
        r_c2w = quat_to_rotation(q / norm)
        poses.append(Pose(r_c2w.T, -r_c2w.T @ t))
    if not poses:
        raise ValueError("empty trajectory file")
    return poses


def save_scene(dir_path, seq: SceneSequence) -> Path:
    """Write a scene directory: meta.json + per-frame tensors + poses + tracks."""
    out = Path(dir_path)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for f in range(seq.frame_count):
        entries.append(write_tensor(out, f"depth_{f:04d}", seq.depths[f].depth))
        entries.append(
            write_tensor(out, f"dynamic_{f:04d}", seq.dynamic_labels[f].astype(np.float64))
        )
    write_trajectory(out / "poses.txt", seq.poses)
    tr = seq.tracks
    dump_json(
        out / "tracks.json",
        {
            "query_frames": tr.query_frames.tolist(),
            "query_pixels": tr.query_pixels.tolist(),
            "world": tr.world.tolist(),
            "camera": tr.camera.tolist(),
            "pixels": tr.pixels.tolist(),
            "visible": tr.visible.tolist(),
        },
    )
    dump_json(
        out / "meta.json",
        {
            "format": SCENE_FORMAT,
            "config": asdict(seq.config),
            "intrinsics": [
                {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy} for k in seq.intrinsics
            ],
            "tensors": entries,
        },
    )
    return out


def load_scene(dir_path) -> SceneSequence:
    """Rebuild a scene from its directory.

    The generator is deterministic, so the config alone regenerates the exact
    sequence; the stored tensors and poses are cross-checked against that
    regeneration (f32 truncation tolerance) to catch tampered or mislabeled
    directories. Returns the full-precision regenerated sequence.
    """
    root = Path(dir_path)
    meta = load_json(root / "meta.json")
    if meta.get("format") != SCENE_FORMAT:
        raise ValueError(f"{root} is not a scene directory")
    cfg_dict = meta.get("config")
    if not isinstance(cfg_dict, dict):
        raise ValueError("meta.json has no config object")
    try:
        cfg = SceneConfig(**cfg_dict)
    except TypeError as exc:
        raise ValueError(f"bad scene config: {exc}") from None
    seq = generate_scene(cfg)

    entries = {e.get("name"): e for e in meta.get("tensors", [])}
    for f in range(seq.frame_count):
        for name, want in (
            (f"depth_{f:04d}", seq.depths[f].depth),
            (f"dynamic_{f:04d}", seq.dynamic_labels[f].astype(np.float64)),
        ):
            if name not in entries:
                raise ValueError(f"scene directory is missing tensor {name}")
            stored = read_tensor(root, entries[name])
            if stored.shape != want.shape or not np.allclose(
                stored, want, rtol=1e-6, atol=1e-6
            ):
                raise ValueError(f"tensor {name} does not match the scene config")
    poses = read_trajectory(root / "poses.txt")
    if len(poses) != seq.frame_count:
        raise ValueError("poses.txt frame count does not match the scene config")
    for f, (got, want_p) in enumerate(zip(poses, seq.poses)):
        if not (
            np.allclose(got.rotation, want_p.rotation, atol=1e-9)
            and np.allclose(got.translation, want_p.translation, atol=1e-9)
        ):
            raise ValueError(f"pose {f} does not match the scene config")
    ks = meta.get("intrinsics", [])
    if len(ks) != seq.frame_count or any(
        e.get("fx") != k.fx or e.get("fy") != k.fy or e.get("cx") != k.cx or e.get("cy") != k.cy
        for e, k in zip(ks, seq.intrinsics)
    ):
        raise ValueError("intrinsics do not match the scene config")
    return seq


def save_checkpoint(path, params: MotionParams) -> None:
    """Manifest JSON at `path`, raw little-endian f32 buffer at `<path>.bin`."""
    path = Path(path)
    if path.suffix != ".json":
        raise ValueError("checkpoint path must end in .json")
    chunks = []
    entries = []
    offset = 0
    for name in params.names:
        arr = np.ascontiguousarray(params.tensors[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(arr.tobytes())
    path.with_suffix(".bin").write_bytes(b"".join(chunks))
    dump_json(
        path,
        {
            "format": CHECKPOINT_FORMAT,
            "channels": params.channels,
            "heads": params.heads,
            "t_max": params.t_max,
            "size": offset,
            "tensors": entries,
        },
    )


def load_checkpoint(path) -> MotionParams:
    path = Path(path)
    manifest = load_json(path)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a checkpoint manifest")
    size = int(manifest["size"])
    raw = path.with_suffix(".bin").read_bytes()
    if len(raw) != 4 * size:
        raise ValueError(f"checkpoint buffer holds {len(raw)} bytes, expected {4 * size}")
    flat = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    tensors: dict[str, np.ndarray] = {}
    names: list[str] = []
    for e in manifest["tensors"]:
        name = str(e["name"])
        shape = tuple(int(s) for s in e["shape"])
        count = int(np.prod(shape)) if shape else 1
        off = int(e["offset"])
        if off < 0 or off + count > size:
            raise ValueError(f"tensor {name} falls outside the checkpoint buffer")
        if name in tensors:
            raise ValueError(f"duplicate tensor {name}")
        tensors[name] = flat[off : off + count].reshape(shape).copy()
        names.append(name)
    return MotionParams(
        channels=int(manifest["channels"]),
        heads=int(manifest["heads"]),
        t_max=int(manifest["t_max"]),
        tensors=tensors,
        names=names,
    )
