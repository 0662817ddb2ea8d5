"""File formats: a self-describing tensor container, COCO-style uncompressed
RLE masks, and the annotation document.

Tensor container layout: an 8-byte little-endian unsigned header length,
followed by a UTF-8 JSON header mapping tensor names to
{"dtype": "f32"|"f64"|"u8", "shape": [...], "offset": bytes}, followed by the
raw little-endian row-major payload. Offsets are relative to the start of the
payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "u8": np.dtype("u1")}
_DTYPE_TAGS = {v: k for k, v in _DTYPES.items()}


def _tag_for(arr: np.ndarray) -> str:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if dt == np.float32:
        return "f32"
    if dt == np.float64:
        return "f64"
    if dt == np.uint8:
        return "u8"
    raise ValueError(f"unsupported dtype {arr.dtype}; use f32, f64, or u8")


def save_tensors(path, tensors: dict) -> None:
    """Write named numpy arrays to a tensor container file."""
    header = {}
    payloads = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        tag = _tag_for(arr)
        raw = arr.astype(_DTYPES[tag], copy=False).tobytes()
        header[name] = {"dtype": tag, "shape": list(arr.shape), "offset": offset}
        payloads.append(raw)
        offset += len(raw)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for raw in payloads:
            f.write(raw)


def load_tensors(path) -> dict:
    """Read a tensor container file into {name: ndarray}."""
    with open(path, "rb") as f:
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    expected = sum(int(np.prod(m["shape"])) * _DTYPES[m["dtype"]].itemsize
                   for m in header.values())
    if len(payload) != expected:
        raise ValueError("tensor container payload length mismatch")
    out = {}
    for name, meta in header.items():
        dt = _DTYPES[meta["dtype"]]
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        start = meta["offset"]
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=start)
        out[name] = arr.reshape(meta["shape"]).copy()
    return out


def rle_encode(mask) -> list[int]:
    """Uncompressed RLE, column-major, starting with the run of zeros."""
    flat = (np.asarray(mask) > 0.5).astype(np.uint8).flatten(order="F")
    runs = []
    val = 0
    count = 0
    for v in flat:
        if v == val:
            count += 1
        else:
            runs.append(count)
            val = v
            count = 1
    runs.append(count)
    return [int(r) for r in runs]


def rle_decode(runs, height: int, width: int) -> np.ndarray:
    """Decode column-major RLE back to an (h, w) binary mask."""
    total = sum(runs)
    if total != height * width:
        raise ValueError(f"RLE decodes to {total} pixels, expected {height * width}")
    flat = np.zeros(total, dtype=np.float64)
    pos = 0
    val = 0
    for r in runs:
        if val:
            flat[pos:pos + r] = 1.0
        pos += r
        val ^= 1
    return flat.reshape((height, width), order="F")


@dataclass
class ImageInfo:
    id: int
    width: int
    height: int
    file: str | None = None


@dataclass
class Instance:
    image_id: int
    category: int
    bbox: list      # normalized corner box [x0, y0, x1, y1]
    rle: list       # uncompressed column-major RLE over the image raster


@dataclass
class AnnotationDoc:
    num_categories: int
    images: list = field(default_factory=list)
    instances: list = field(default_factory=list)

    def __post_init__(self):
        ids = {im.id for im in self.images}
        for inst in self.instances:
            if inst.image_id not in ids:
                raise ValueError(f"instance references unknown image id {inst.image_id}")
            if not 0 <= inst.category < self.num_categories:
                raise ValueError(f"category {inst.category} out of range")

    def instances_for(self, image_id: int) -> list:
        return [i for i in self.instances if i.image_id == image_id]

    def decode_mask(self, inst: Instance) -> np.ndarray:
        im = next(i for i in self.images if i.id == inst.image_id)
        return rle_decode(inst.rle, im.height, im.width)

    def to_json(self) -> str:
        doc = {
            "num_categories": self.num_categories,
            "images": [vars(im) for im in self.images],
            "instances": [vars(i) for i in self.instances],
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AnnotationDoc":
        doc = json.loads(text)
        return cls(
            num_categories=doc["num_categories"],
            images=[ImageInfo(**im) for im in doc["images"]],
            instances=[Instance(**i) for i in doc["instances"]],
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "AnnotationDoc":
        return cls.from_json(Path(path).read_text())


def save_codec(path, codec) -> None:
    """Serialize a mask codec into the tensor container."""
    tensors = {"basis": codec.basis, "spectrum": codec.spectrum}
    if codec.mean is not None:
        tensors["mean"] = codec.mean
    save_tensors(path, tensors)


def load_codec(path):
    from .codec import MaskCodec

    t = load_tensors(path)
    basis = t["basis"]
    side = int(round(basis.shape[0] ** 0.5))
    return MaskCodec(basis=basis, mean=t.get("mean"), spectrum=t["spectrum"],
                     side=side, dim=basis.shape[1])
