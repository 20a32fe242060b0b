"""File formats: binary array container, OBJ, PFM, label PNG, params JSON.

The container format ("DSRT") is a magic tag, a little-endian u32 version,
a little-endian u64 header length, a JSON header describing the payload
arrays, then the raw arrays back to back (C order, little endian). All JSON
written by this module is key-sorted and compact so byte output is stable.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from dsr.body import BodyTemplate, BodyParams, DTYPE

MAGIC = b"DSRT"
VERSION = 1

_ALLOWED_DTYPES = {"<f8", "<f4", "<i8", "<i4", "|u1"}


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


@dataclass
class Container:
    kind: str
    arrays: dict[str, np.ndarray]
    meta: dict


def write_container(path, kind: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        if a.dtype.str not in _ALLOWED_DTYPES:
            # normalize to little-endian equivalents
            a = a.astype(a.dtype.newbyteorder("<"))
            if a.dtype.str not in _ALLOWED_DTYPES:
                raise ValueError(f"unsupported dtype {arr.dtype} for array {name!r}")
        entries.append({"dtype": a.dtype.str, "name": name, "shape": list(a.shape)})
        blobs.append(a.tobytes())
    header = _json_bytes({"arrays": entries, "kind": kind, "meta": meta or {}})
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_container(path) -> Container:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a DSRT container (bad magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays = {}
        for ent in header["arrays"]:
            dt = np.dtype(ent["dtype"])
            shape = tuple(ent["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * dt.itemsize)
            if len(buf) != count * dt.itemsize:
                raise ValueError(f"{path}: truncated array {ent['name']!r}")
            arrays[ent["name"]] = np.frombuffer(buf, dtype=dt).reshape(shape).copy()
    return Container(kind=header["kind"], arrays=arrays, meta=header.get("meta", {}))


# -- body template ------------------------------------------------------------

def save_template(path, template: BodyTemplate) -> None:
    write_container(path, "template", {
        "faces": template.faces.numpy(),
        "joint_regressor": template.joint_regressor.numpy(),
        "parents": template.parents.numpy(),
        "part_labels": template.part_labels.numpy(),
        "shape_dirs": template.shape_dirs.numpy(),
        "skin_weights": template.skin_weights.numpy(),
        "vertices": template.vertices.numpy(),
    })


def load_template(path) -> BodyTemplate:
    c = read_container(path)
    if c.kind != "template":
        raise ValueError(f"{path}: expected a template container, got kind={c.kind!r}")
    a = c.arrays
    return BodyTemplate(
        vertices=a["vertices"], faces=a["faces"], joint_regressor=a["joint_regressor"],
        skin_weights=a["skin_weights"], shape_dirs=a["shape_dirs"],
        part_labels=a["part_labels"], parents=a["parents"],
    )


# -- per-vertex label prior ----------------------------------------------------

def save_prior(path, matrix: np.ndarray, labels: list[str], eps_bg: float,
               counts: np.ndarray | None = None) -> None:
    arrays = {"matrix": np.asarray(matrix, dtype=np.float64)}
    if counts is not None:
        arrays["counts"] = np.asarray(counts, dtype=np.int64)
    write_container(path, "prior", arrays, meta={"eps_bg": eps_bg, "labels": labels})


def load_prior(path) -> tuple[np.ndarray, list[str], float]:
    c = read_container(path)
    if c.kind != "prior":
        raise ValueError(f"{path}: expected a prior container, got kind={c.kind!r}")
    return c.arrays["matrix"], list(c.meta["labels"]), float(c.meta["eps_bg"])


def export_prior_csv(path, matrix: np.ndarray, labels: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("vertex," + ",".join(labels) + "\n")
        for i, row in enumerate(np.asarray(matrix)):
            fh.write(str(i) + "," + ",".join(repr(float(x)) for x in row) + "\n")


# -- labeled scan observations ---------------------------------------------------
# One observation = three sibling files: <stem>.obj (posed mesh registered to the
# template topology), <stem>.camera.json ({s, tx, ty}), <stem>.labels.png
# (palette PNG, palette index = class id).

def save_camera(path, camera) -> None:
    cam = np.asarray(camera, dtype=np.float64)
    obj = {"s": float(cam[0]), "tx": float(cam[1]), "ty": float(cam[2])}
    Path(path).write_bytes(_json_bytes(obj) + b"\n")


def load_camera(path) -> np.ndarray:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return np.array([obj["s"], obj["tx"], obj["ty"]], dtype=np.float64)


def find_scans(directory) -> list[dict[str, Path]]:
    """Discover observation triples under a directory, sorted by stem."""
    root = Path(directory)
    out = []
    for obj_path in sorted(root.glob("*.obj")):
        stem = obj_path.stem
        cam = root / f"{stem}.camera.json"
        lab = root / f"{stem}.labels.png"
        if not cam.exists() or not lab.exists():
            raise FileNotFoundError(
                f"scan {stem!r}: expected {cam.name} and {lab.name} next to {obj_path.name}")
        out.append({"stem": stem, "mesh": obj_path, "camera": cam, "labels": lab})
    return out


# -- OBJ -----------------------------------------------------------------------

def write_obj(path, vertices, faces) -> None:
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    with open(path, "w", encoding="utf-8") as fh:
        for row in v:
            # plain floats: repr of a numpy scalar is not a number literal
            fh.write(f"v {float(row[0])!r} {float(row[1])!r} {float(row[2])!r}\n")
        for row in f:
            fh.write(f"f {row[0] + 1} {row[1] + 1} {row[2] + 1}\n")


def read_obj(path) -> tuple[np.ndarray, np.ndarray]:
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                # accept v, v/vt, v/vt/vn references; indices are 1-based
                idx = [int(p.split("/")[0]) for p in parts[1:4]]
                faces.append([i - 1 for i in idx])
    return np.asarray(verts, dtype=np.float64), np.asarray(faces, dtype=np.int64)


# -- PFM (1- or 3-channel float32, rows stored bottom-up, little endian) --------

def write_pfm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim == 2:
        header = b"Pf\n"
    elif img.ndim == 3 and img.shape[2] == 3:
        header = b"PF\n"
    else:
        raise ValueError(f"PFM image must be (H, W) or (H, W, 3), got {img.shape}")
    data = np.flipud(img.astype("<f4"))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(f"{img.shape[1]} {img.shape[0]}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(data).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = (int(x) for x in fh.readline().split())
        scale = float(fh.readline())
        dt = "<f4" if scale < 0 else ">f4"
        channels = 3 if kind == b"PF" else 1
        data = np.frombuffer(fh.read(w * h * channels * 4), dtype=dt)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float32).copy()


# -- label PNG (palette image of small integer class ids) ------------------------

def _palette() -> list[int]:
    # deterministic PASCAL-style colormap: bit-reversal of the label id
    pal: list[int] = []
    for i in range(256):
        r = g = b = 0
        cid = i
        for shift in range(8):
            r |= ((cid >> 0) & 1) << (7 - shift)
            g |= ((cid >> 1) & 1) << (7 - shift)
            b |= ((cid >> 2) & 1) << (7 - shift)
            cid >>= 3
        pal.extend([r, g, b])
    return pal


def write_label_png(path, labels: np.ndarray) -> None:
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise ValueError(f"label image must be 2-D, got shape {arr.shape}")
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError("label ids must fit in uint8")
    img = Image.fromarray(arr.astype(np.uint8), mode="P")
    img.putpalette(_palette())
    img.save(path, format="PNG")


def read_label_png(path) -> np.ndarray:
    img = Image.open(path)
    if img.mode not in ("P", "L"):
        img = img.convert("P")
    return np.asarray(img, dtype=np.uint8).copy()


# -- parameter / keypoint JSON ---------------------------------------------------

def save_params(path, params: BodyParams) -> None:
    obj = {
        "beta": [float(x) for x in params.beta],
        "camera": {"s": float(params.camera[0]), "tx": float(params.camera[1]),
                   "ty": float(params.camera[2])},
        "theta": [float(x) for x in params.theta],
    }
    Path(path).write_bytes(_json_bytes(obj) + b"\n")


def load_params(path) -> BodyParams:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if "params" in obj and "theta" not in obj:
        # fit results nest the parameters; accept them directly so a fit
        # output can feed render or another fit
        obj = obj["params"]
    cam = obj["camera"]
    return BodyParams(
        theta=torch.tensor(obj["theta"], dtype=DTYPE),
        beta=torch.tensor(obj["beta"], dtype=DTYPE),
        camera=torch.tensor([cam["s"], cam["tx"], cam["ty"]], dtype=DTYPE),
    )


def save_keypoints(path, joints2d: np.ndarray | None = None,
                   joints3d: np.ndarray | None = None) -> None:
    obj: dict = {}
    if joints2d is not None:
        obj["joints2d"] = [[float(v) for v in row] for row in np.asarray(joints2d)]
    if joints3d is not None:
        obj["joints3d"] = [[float(v) for v in row] for row in np.asarray(joints3d)]
    Path(path).write_bytes(_json_bytes(obj) + b"\n")


def load_keypoints(path) -> dict[str, np.ndarray]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    out: dict[str, np.ndarray] = {}
    if "joints2d" in obj:
        j2 = np.asarray(obj["joints2d"], dtype=np.float64)
        if j2.ndim != 2 or j2.shape[1] != 3:
            raise ValueError("joints2d must be (J, 3) rows of [x, y, confidence]")
        out["joints2d"] = j2
    if "joints3d" in obj:
        j3 = np.asarray(obj["joints3d"], dtype=np.float64)
        if j3.ndim != 2 or j3.shape[1] != 3:
            raise ValueError("joints3d must be (J, 3)")
        out["joints3d"] = j3
    return out
