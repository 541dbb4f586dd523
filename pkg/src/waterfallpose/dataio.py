"""Serialization: annotation files, tensor dumps, PPM images, checkpoints,
and result files.

Wire formats:
  tensor dump   magic "BAT1", four little-endian uint32 extents (N, C, H, W),
                then N*C*H*W little-endian float32, row-major, width fastest.
  checkpoint    magic "BAC1", uint32 format version, uint32 epoch, a
                length-prefixed config fingerprint string, then a uint32
                entry count followed by (length-prefixed name, tensor dump)
                pairs sorted by name.
  annotations   JSON object with "images" (id, file_name, height, width,
                optional crowd_index), "annotations" (id, image_id, area,
                bbox, keypoints triplets), and "categories" (keypoint names).
  results       JSON list of {image_id, keypoints [x, y, score] * K, score}.
  images        binary PPM (P6), 8-bit, maxval 255.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .targets import Keypoint, PersonAnnotation
from .decode import PoseInstance

TENSOR_MAGIC = b"BAT1"
CHECKPOINT_MAGIC = b"BAC1"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """Malformed or mismatched serialized data."""


# ---------------------------------------------------------------------------
# annotations

@dataclass
class ImageRecord:
    id: int
    file_name: str
    height: int
    width: int
    crowd_index: float | None = None


@dataclass
class Dataset:
    images: list
    annotations: dict            # image id -> [PersonAnnotation]
    keypoint_names: list
    source: str = "coco"
    ann_ids: dict = field(default_factory=dict)   # image id -> [annotation id]

    @property
    def num_keypoints(self) -> int:
        return len(self.keypoint_names)


def _require(obj, key, where):
    if key not in obj:
        raise FormatError(f"{where}: missing required field {key!r}")
    return obj[key]


def parse_annotations(text: str) -> Dataset:
    """Parse the JSON annotation schema into a Dataset."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"annotation file is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise FormatError("annotation file must be a JSON object")

    cats = _require(doc, "categories", "annotation file")
    if not cats or "keypoints" not in cats[0]:
        raise FormatError("categories[0] must list the keypoint names")
    names = list(cats[0]["keypoints"])
    k = len(names)
    source = doc.get("source", "coco")
    if source not in ("coco", "crowdpose"):
        raise FormatError(f"unknown source tag {source!r}")

    images = []
    crowd = {}
    for rec in _require(doc, "images", "annotation file"):
        where = f"images[id={rec.get('id')!r}]"
        img = ImageRecord(
            id=int(_require(rec, "id", where)),
            file_name=str(_require(rec, "file_name", where)),
            height=int(_require(rec, "height", where)),
            width=int(_require(rec, "width", where)),
            crowd_index=(float(rec["crowd_index"]) if "crowd_index" in rec else None),
        )
        if img.crowd_index is not None and not 0.0 <= img.crowd_index <= 1.0:
            raise FormatError(f"{where}: crowd_index must lie in [0, 1]")
        images.append(img)
        crowd[img.id] = img.crowd_index
    ids = {img.id for img in images}
    if len(ids) != len(images):
        raise FormatError("duplicate image ids")

    annotations = {img.id: [] for img in images}
    ann_ids = {img.id: [] for img in images}
    for rec in _require(doc, "annotations", "annotation file"):
        aid = rec.get("id")
        where = f"annotations[id={aid!r}]"
        image_id = int(_require(rec, "image_id", where))
        if image_id not in ids:
            raise FormatError(f"{where}: references unknown image id {image_id}")
        kps = _require(rec, "keypoints", where)
        if len(kps) != 3 * k:
            raise FormatError(
                f"{where}: keypoints array has {len(kps)} numbers, expected {3 * k}")
        triples = []
        for j in range(k):
            x, y, v = kps[3 * j: 3 * j + 3]
            v = int(v)
            if v not in (0, 1, 2):
                raise FormatError(f"{where}: visibility flag {v} out of range")
            triples.append(Keypoint(float(x), float(y), v))
        bbox = rec.get("bbox", [0.0, 0.0, 0.0, 0.0])
        if len(bbox) != 4:
            raise FormatError(f"{where}: bbox must have 4 numbers")
        try:
            ann = PersonAnnotation(triples, float(_require(rec, "area", where)),
                                   tuple(float(v) for v in bbox),
                                   crowd_index=crowd[image_id])
        except ValueError as e:
            raise FormatError(f"{where}: {e}") from e
        annotations[image_id].append(ann)
        ann_ids[image_id].append(int(aid) if aid is not None else len(ann_ids[image_id]))
    return Dataset(images, annotations, names, source, ann_ids)


def serialize_annotations(ds: Dataset) -> str:
    doc = {
        "source": ds.source,
        "images": [],
        "annotations": [],
        "categories": [{"id": 1, "name": "person", "keypoints": list(ds.keypoint_names)}],
    }
    for img in ds.images:
        rec = {"id": int(img.id), "file_name": img.file_name,
               "height": int(img.height), "width": int(img.width)}
        if img.crowd_index is not None:
            rec["crowd_index"] = float(img.crowd_index)
        doc["images"].append(rec)
    for img in ds.images:
        for ann, aid in zip(ds.annotations[img.id], ds.ann_ids.get(img.id, [])):
            flat = []
            for kp in ann.keypoints:
                flat.extend([float(kp.x), float(kp.y), int(kp.v)])
            doc["annotations"].append({
                "id": int(aid), "image_id": img.id, "area": float(ann.area),
                "bbox": [float(v) for v in ann.bbox], "keypoints": flat,
            })
    return json.dumps(doc, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# tensor dumps

def write_tensor(t: np.ndarray) -> bytes:
    if t.ndim != 4:
        raise FormatError(f"tensor dumps hold rank-4 tensors, got shape {t.shape}")
    header = TENSOR_MAGIC + struct.pack("<4I", *t.shape)
    payload = np.ascontiguousarray(t, dtype="<f4").tobytes()
    return header + payload


def read_tensor(data: bytes, offset: int = 0):
    """Returns (tensor, bytes consumed from offset)."""
    if data[offset: offset + 4] != TENSOR_MAGIC:
        raise FormatError("bad tensor magic; not a tensor dump")
    if len(data) < offset + 20:
        raise FormatError("tensor dump truncated in header")
    shape = struct.unpack_from("<4I", data, offset + 4)
    count = int(np.prod([int(s) for s in shape], dtype=np.int64))
    end = offset + 20 + 4 * count
    if len(data) < end:
        raise FormatError(
            f"tensor dump truncated: expected {4 * count} payload bytes")
    arr = np.frombuffer(data[offset + 20: end], dtype="<f4").reshape(shape)
    return np.ascontiguousarray(arr), end - offset


# ---------------------------------------------------------------------------
# images

def read_image_ppm(data: bytes) -> np.ndarray:
    """Binary P6 to a (1, 3, H, W) float tensor scaled to [0, 1]."""
    if not data.startswith(b"P6"):
        raise FormatError("only binary PPM (P6) images are supported")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos: pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos: pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos: pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("PPM header ended unexpectedly")
        fields.append(data[start:pos])
    width, height, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise FormatError(f"only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    need = width * height * 3
    raw = data[pos: pos + need]
    if len(raw) != need:
        raise FormatError(f"PPM payload has {len(raw)} bytes, expected {need}")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3)
    planar = pixels.transpose(2, 0, 1)[None].astype(np.float32) / 255.0
    return planar


def write_image_ppm(t: np.ndarray) -> bytes:
    """(1, 3, H, W) values in [0, 1] to binary P6."""
    if t.ndim != 4 or t.shape[0] != 1 or t.shape[1] != 3:
        raise FormatError(f"expected a (1, 3, H, W) image tensor, got {t.shape}")
    h, w = t.shape[2], t.shape[3]
    bytes_img = np.clip(np.rint(t[0] * 255.0), 0, 255).astype(np.uint8)
    header = f"P6\n{w} {h}\n255\n".encode()
    return header + bytes_img.transpose(1, 2, 0).tobytes()


# ---------------------------------------------------------------------------
# checkpoints

def _pack_str(s: str) -> bytes:
    raw = s.encode()
    return struct.pack("<I", len(raw)) + raw


def _unpack_str(data: bytes, offset: int):
    (n,) = struct.unpack_from("<I", data, offset)
    start = offset + 4
    return data[start: start + n].decode(), start + n


def save_checkpoint(weights: dict, optim_state, epoch: int, fingerprint: str) -> bytes:
    """Weights (and optionally optimizer state) as one self-describing blob.

    optim_state is None or a dict with "step" (int) plus "m"/"v" moment dicts
    mirroring the weight names.
    """
    entries = {f"weights/{k}": np.asarray(v, dtype=np.float32).reshape(
        v.shape if v.ndim == 4 else (1, 1, 1, -1)) for k, v in weights.items()}
    shapes = {f"weights/{k}": list(v.shape) for k, v in weights.items()}
    if optim_state is not None:
        entries["optim/step"] = np.array(
            [[[[float(optim_state["step"])]]]], dtype=np.float32)
        for group in ("m", "v"):
            for k, val in optim_state[group].items():
                key = f"optim/{group}/{k}"
                entries[key] = np.asarray(val, dtype=np.float32).reshape(
                    val.shape if val.ndim == 4 else (1, 1, 1, -1))
                shapes[key] = list(val.shape)
    meta = json.dumps(shapes, sort_keys=True)
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, epoch),
           _pack_str(fingerprint), _pack_str(meta),
           struct.pack("<I", len(entries))]
    for name in sorted(entries):
        out.append(_pack_str(name))
        out.append(write_tensor(entries[name]))
    return b"".join(out)


def load_checkpoint(data: bytes, expected_fingerprint: str | None = None):
    """Returns (weights, optim_state or None, epoch, fingerprint)."""
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    version, epoch = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    fingerprint, pos = _unpack_str(data, 12)
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise FormatError(
            "checkpoint was written under a different configuration "
            f"(fingerprint {fingerprint[:12]}... != {expected_fingerprint[:12]}...)")
    meta, pos = _unpack_str(data, pos)
    shapes = json.loads(meta)
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    entries = {}
    for _ in range(count):
        name, pos = _unpack_str(data, pos)
        t, used = read_tensor(data, pos)
        pos += used
        if name in shapes:
            t = t.reshape(shapes[name])
        entries[name] = t
    weights = {k[len("weights/"):]: v for k, v in entries.items()
               if k.startswith("weights/")}
    optim = None
    if "optim/step" in entries:
        optim = {"step": int(entries["optim/step"].reshape(-1)[0]), "m": {}, "v": {}}
        for k, v in entries.items():
            if k.startswith("optim/m/"):
                optim["m"][k[len("optim/m/"):]] = v
            elif k.startswith("optim/v/"):
                optim["v"][k[len("optim/v/"):]] = v
    return weights, optim, epoch, fingerprint


# ---------------------------------------------------------------------------
# results

def write_results(instances_by_image: dict) -> str:
    """Decoded poses as JSON, mirroring the annotation keypoint layout with a
    score in place of the visibility flag."""
    out = []
    for image_id in sorted(instances_by_image):
        for inst in instances_by_image[image_id]:
            flat = []
            for x, y, s in inst.keypoints:
                flat.extend([float(x), float(y), float(s)])
            out.append({"image_id": image_id, "keypoints": flat,
                        "score": float(inst.score)})
    return json.dumps(out, indent=1)


def parse_results(text: str, k: int) -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"results file is not valid JSON: {e}") from e
    if not isinstance(doc, list):
        raise FormatError("results file must be a JSON list")
    out = {}
    for i, rec in enumerate(doc):
        where = f"results[{i}]"
        image_id = int(_require(rec, "image_id", where))
        kps = _require(rec, "keypoints", where)
        if len(kps) != 3 * k:
            raise FormatError(
                f"{where}: keypoints array has {len(kps)} numbers, expected {3 * k}")
        score = _require(rec, "score", where)
        if not isinstance(score, (int, float)) or not np.isfinite(score):
            raise FormatError(f"{where}: malformed score {score!r}")
        triples = []
        for j in range(k):
            x, y, s = (float(v) for v in kps[3 * j: 3 * j + 3])
            if not (np.isfinite(x) and np.isfinite(y) and np.isfinite(s)):
                raise FormatError(f"{where}: non-finite keypoint entry")
            triples.append((x, y, s))
        out.setdefault(image_id, []).append(PoseInstance(triples, float(score)))
    return out
