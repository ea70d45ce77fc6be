"""File formats: trajectories, PFM/PNG depth, PNG images, intrinsics, flat configs,
checkpoints, and the dataset directory layout."""

from __future__ import annotations

import dataclasses
import io
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import Intrinsics
from .geometry import Pose, Trajectory, matrix_to_quaternion, quaternion_to_matrix
from .motion import normalized_times


class ParseError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class MissingFile(FileNotFoundError):
    pass


class CorruptImage(ValueError):
    pass


class InconsistentSizes(ValueError):
    pass


# ------------------------------------------------------------------ plumbing


def atomic_write(path, data: bytes) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write(path, text.encode("utf-8"))


def _fmt(x: float) -> str:
    """Shortest decimal that round-trips, without a trailing ``.0``."""
    s = repr(float(x) + 0.0)  # + 0.0 turns -0.0 into 0.0
    return s[:-2] if s.endswith(".0") else s


# -------------------------------------------------------------- trajectories


def format_trajectory(traj: Trajectory) -> str:
    lines = []
    for t, p in zip(traj.timestamps, traj.poses):
        q = matrix_to_quaternion(p.rotation)
        vals = [t, *p.translation, *q]
        lines.append(" ".join(_fmt(v) for v in vals))
    return "\n".join(lines) + "\n"


def write_trajectory(traj: Trajectory, path) -> None:
    """TUM-style ``t tx ty tz qx qy qz qw`` lines (camera-to-world)."""
    atomic_write_text(path, format_trajectory(traj))


def parse_trajectory(text: str, source: str = "<string>") -> Trajectory:
    stamps, poses = [], []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ParseError(f"{source}:{n}: expected 8 values, got {len(parts)}")
        try:
            vals = [float(v) for v in parts]
        except ValueError as e:
            raise ParseError(f"{source}:{n}: {e}") from None
        q = np.array(vals[4:])
        if not np.all(np.isfinite(vals)) or np.linalg.norm(q) < 1e-12:
            raise ParseError(f"{source}:{n}: invalid pose")
        stamps.append(vals[0])
        poses.append(Pose(quaternion_to_matrix(q), vals[1:4]))
    try:
        return Trajectory(np.array(stamps), tuple(poses))
    except ValueError as e:
        raise ParseError(f"{source}: {e}") from None


def read_trajectory(path) -> Trajectory:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    return parse_trajectory(path.read_text(), str(path))


# --------------------------------------------------------------------- images


def write_png(path, image: np.ndarray) -> None:
    """Save a float ``(H, W, 3)`` image in [0, 1] as 8-bit PNG."""
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    _save_pil(path, Image.fromarray(arr))


def _save_pil(path, img: Image.Image) -> None:
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    atomic_write(path, buf.getvalue())


def read_png(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    except OSError as e:
        raise CorruptImage(f"{path}: {e}") from None
    return arr / 255.0


def write_png16_depth(path, depth: np.ndarray, scale: float = 1000.0) -> None:
    """Depth as 16-bit PNG: stored value = round(depth * scale); 0 means invalid."""
    d = np.nan_to_num(np.asarray(depth, dtype=np.float64), nan=0.0, posinf=0.0, neginf=0.0)
    arr = np.clip(np.round(d * scale), 0, 65535).astype(np.uint16)
    _save_pil(path, Image.fromarray(arr))


def read_png16_depth(path, scale: float = 1000.0) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.float64) / scale


def write_pfm(path, data: np.ndarray) -> None:
    """Single-channel little-endian PFM (negative scale), rows stored bottom-up."""
    d = np.asarray(data, dtype="<f4")
    if d.ndim != 2:
        raise ValueError("PFM writer expects a 2-D array")
    H, W = d.shape
    header = f"Pf\n{W} {H}\n-1.0\n".encode("ascii")
    atomic_write(path, header + np.ascontiguousarray(d[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    raw = path.read_bytes()
    try:
        tag, dims, scale, body = raw.split(b"\n", 3)
        W, H = (int(v) for v in dims.split())
        scale = float(scale)
    except ValueError:
        raise CorruptImage(f"{path}: bad PFM header") from None
    if tag not in (b"Pf", b"PF"):
        raise CorruptImage(f"{path}: not a PFM file")
    C = 3 if tag == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    if len(body) != H * W * C * 4:
        raise CorruptImage(f"{path}: truncated PFM data")
    arr = np.frombuffer(body, dtype=dtype).reshape(H, W, C)[::-1]
    arr = arr[..., 0] if C == 1 else arr
    return arr.astype(np.float64)


# ----------------------------------------------------------------- intrinsics


def write_intrinsics(path, K: Intrinsics) -> None:
    vals = [K.fx, K.fy, K.cx, K.cy, K.width, K.height]
    atomic_write_text(path, " ".join(_fmt(v) for v in vals) + "\n")


def read_intrinsics(path) -> Intrinsics:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    parts = path.read_text().split()
    if len(parts) != 6:
        raise ParseError(f"{path}: expected 6 numbers (fx fy cx cy width height), got {len(parts)}")
    try:
        fx, fy, cx, cy, w, h = (float(p) for p in parts)
        return Intrinsics(fx, fy, cx, cy, int(w), int(h))
    except ValueError as e:
        raise ParseError(f"{path}: {e}") from None


# -------------------------------------------------------------------- configs


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{n}: empty key")
        out[key] = value
    return out


def _convert(value: str, default, key: str):
    try:
        if isinstance(default, bool):
            v = value.lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            items = [s for s in value.replace(",", " ").split()]
            kind = type(default[0]) if default else float
            return tuple(kind(s) for s in items)
        if default is None:
            return None if value.lower() == "none" else int(value)
        return value
    except ValueError as e:
        raise ConfigError(f"{key}: {e}") from None


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(format_value(x) for x in v)
    if v is None:
        return "none"
    return str(v)


def apply_config(base, values: dict[str, str]):
    """Return a copy of dataclass ``base`` with string ``values`` applied.

    Unknown keys raise :class:`ConfigError`.
    """
    fields = {f.name: f for f in dataclasses.fields(base)}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    updates = {k: _convert(v, getattr(base, k), k) for k, v in values.items()}
    try:
        return dataclasses.replace(base, **updates)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def format_config(cfg) -> str:
    return "".join(f"{f.name} = {format_value(getattr(cfg, f.name))}\n" for f in dataclasses.fields(cfg))


def load_config(base, path=None, overrides: dict[str, str] | None = None):
    values = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise MissingFile(str(path))
        values.update(parse_config_text(path.read_text(), str(path)))
    values.update(overrides or {})
    return apply_config(base, values)


# ----------------------------------------------------------------- checkpoint

CHECKPOINT_VERSION = 1


def save_arrays(stem, sections: dict[str, dict[str, np.ndarray]], header: dict[str, str]) -> None:
    """Write ``stem.txt`` (manifest) and ``stem.bin`` (little-endian f64 blob)."""
    stem = Path(stem)
    lines = [f"format = velosdf-checkpoint {CHECKPOINT_VERSION}"]
    lines += [f"{k} = {v}" for k, v in header.items()]
    chunks, offset = [], 0
    for section, arrays in sections.items():
        for name, arr in arrays.items():
            a = np.asarray(arr, dtype="<f8", order="C")  # keeps 0-d shapes
            shape = ",".join(str(s) for s in a.shape) or "-"
            lines.append(f"array {section} {name} {shape} {offset} {a.size}")
            chunks.append(a.tobytes())
            offset += a.size * 8
    atomic_write(stem.with_suffix(".bin"), b"".join(chunks))
    atomic_write_text(stem.with_suffix(".txt"), "\n".join(lines) + "\n")


def load_arrays(stem) -> tuple[dict[str, dict[str, np.ndarray]], dict[str, str]]:
    stem = Path(stem)
    man, blob = stem.with_suffix(".txt"), stem.with_suffix(".bin")
    for p in (man, blob):
        if not p.exists():
            raise MissingFile(str(p))
    data = blob.read_bytes()
    sections: dict[str, dict[str, np.ndarray]] = {}
    header: dict[str, str] = {}
    for n, line in enumerate(man.read_text().splitlines(), 1):
        if line.startswith("array "):
            _, section, name, shape, offset, count = line.split()
            shape = () if shape == "-" else tuple(int(s) for s in shape.split(","))
            offset, count = int(offset), int(count)
            if offset + 8 * count > len(data):
                raise ParseError(f"{man}:{n}: array {name} runs past the end of the blob")
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
            sections.setdefault(section, {})[name] = arr.astype(np.float64)
        elif " = " in line:
            k, v = line.split(" = ", 1)
            header[k] = v
        elif line.strip():
            raise ParseError(f"{man}:{n}: unrecognized line")
    if header.get("format") != f"velosdf-checkpoint {CHECKPOINT_VERSION}":
        raise ParseError(f"{man}: unsupported checkpoint format {header.get('format')!r}")
    return sections, header


# -------------------------------------------------------------------- dataset


@dataclass
class SceneDataset:
    images: np.ndarray  # (T, H, W, 3)
    K: Intrinsics
    times: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    near: float
    far: float
    gt_traj: Trajectory | None = None
    gt_depths: np.ndarray | None = None
    meta: dict = dataclasses.field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return len(self.images)

    def training_view(self) -> "TrainingData":
        """Images, intrinsics and timing only; ground truth stays behind."""
        return TrainingData(self.images, self.K, self.times, self.train_idx, self.near, self.far)


@dataclass(frozen=True)
class TrainingData:
    images: np.ndarray
    K: Intrinsics
    times: np.ndarray
    train_idx: np.ndarray
    near: float
    far: float


def split_indices(T: int, test_every: int = 8) -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(T)
    test = idx % test_every == 0 if test_every > 0 else np.zeros(T, bool)
    return idx[~test], idx[test]


def load_dataset(directory, test_every: int = 8) -> SceneDataset:
    d = Path(directory)
    if not d.is_dir():
        raise MissingFile(str(d))
    img_dir = d / "images"
    names = sorted(p.name for p in img_dir.glob("*.png")) if img_dir.is_dir() else []
    if not names:
        raise MissingFile(f"{img_dir}: no images")
    K = read_intrinsics(d / "intrinsics.txt")
    meta_path = d / "meta.json"
    if not meta_path.exists():
        raise MissingFile(str(meta_path))
    meta = json.loads(meta_path.read_text())
    images = []
    for name in names:
        img = read_png(img_dir / name)
        if img.shape != (K.height, K.width, 3):
            raise InconsistentSizes(f"{img_dir / name}: {img.shape[:2]} vs intrinsics {(K.height, K.width)}")
        images.append(img)
    T = len(images)
    gt_traj = read_trajectory(d / "gt_traj.txt") if (d / "gt_traj.txt").exists() else None
    depths = None
    dnames = sorted((d / "depth").glob("*.pfm")) if (d / "depth").is_dir() else []
    if dnames:
        if len(dnames) != T:
            raise InconsistentSizes(f"{len(dnames)} depth maps for {T} images")
        depths = np.stack([read_pfm(p) for p in dnames])
    train_idx, test_idx = split_indices(T, test_every)
    return SceneDataset(
        images=np.stack(images),
        K=K,
        times=normalized_times(T),
        train_idx=train_idx,
        test_idx=test_idx,
        near=float(meta["near"]),
        far=float(meta["far"]),
        gt_traj=gt_traj,
        gt_depths=depths,
        meta=meta,
    )
