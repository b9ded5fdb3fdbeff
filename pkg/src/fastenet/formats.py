"""File formats: binary PGM/PPM, line-oriented annotations, model files.

Model file layout (all integers little-endian)::

    magic        8 bytes   b"FSTNMDL\\0"
    version      u16       1
    name_len     u16       followed by the architecture name, UTF-8
    digest       32 bytes  sha256 of the architecture's canonical text
    n_records    u32
    record * n_records:
        layer    u16
        role_len u8        followed by the role tag, ASCII
        ndim     u8        followed by ndim * u32 dims
        crc32    u32       of the payload
        payload  prod(dims) * 4 bytes, float32 little-endian
"""

import os
import re
import struct
import tempfile
import zlib

import numpy as np

from . import netgraph
from .postprocess import PIXEL, BBox


class FormatError(ValueError):
    """A file does not follow the expected format."""


def _atomic_write(path, data, mode="wb"):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text_atomic(path, text):
    _atomic_write(path, text, "w")


# ---------------------------------------------------------------------------
# PGM / PPM
# ---------------------------------------------------------------------------


def _pnm_header(data, expect_magic):
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise FormatError("truncated PNM header")
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        tokens.append(data[start:pos])
        if len(tokens) == 1 and tokens[0] != expect_magic:
            raise FormatError(
                f"unsupported format: found magic {tokens[0].decode('latin-1')!r}, "
                f"only binary {expect_magic.decode()} with maxval 255 is supported"
            )
    # Exactly one whitespace byte separates the header from the raster.
    pos += 1
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"malformed PNM header {tokens!r}") from None
    if maxval != 255:
        raise FormatError(f"unsupported format: maxval {maxval}, only 255 is supported")
    return width, height, pos


def read_pgm(path):
    """Read a binary (P5, maxval 255) PGM into a ``(height, width)`` uint8 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    width, height, pos = _pnm_header(data, b"P5")
    need = width * height
    payload = data[pos:pos + need]
    if len(payload) != need:
        raise FormatError(f"{path}: expected {need} pixel bytes at offset {pos}, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()


def write_pgm(path, image):
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"PGM needs a 2-d image, got shape {image.shape}")
    if image.dtype != np.uint8:
        if image.min() < 0 or image.max() > 255:
            raise ValueError("PGM pixel values must lie in [0, 255]")
        image = image.astype(np.uint8)
    h, w = image.shape
    _atomic_write(path, f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(image).tobytes())


def write_ppm(path, rgb):
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"PPM needs an (H, W, 3) image, got {rgb.shape}")
    h, w, _ = rgb.shape
    _atomic_write(path, f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb).tobytes())


def saliency_to_pgm(saliency):
    """8-bit export of a saliency map (``round(255 * s)``)."""
    return np.rint(np.clip(saliency, 0.0, 1.0) * 255.0).astype(np.uint8)


def overlay(image, detections=(), gts=(), thickness=2):
    """RGB copy of ``image`` with green prediction boxes and red ground-truth boxes."""
    rgb = np.repeat(np.asarray(image, dtype=np.uint8)[:, :, None], 3, axis=2)
    h, w = rgb.shape[:2]

    def draw(box, color):
        x0, y0, x1, y1 = box.as_tuple()
        x1, y1 = min(x1, w - 1), min(y1, h - 1)
        t = thickness
        rgb[y0:y0 + t, x0:x1 + 1] = color
        rgb[max(y1 - t + 1, 0):y1 + 1, x0:x1 + 1] = color
        rgb[y0:y1 + 1, x0:x0 + t] = color
        rgb[y0:y1 + 1, max(x1 - t + 1, 0):x1 + 1] = color

    for g in gts:
        draw(g, (255, 0, 0))
    for d in detections:
        draw(getattr(d, "bbox", d), (0, 255, 0))
    return rgb


# ---------------------------------------------------------------------------
# Annotations
# ---------------------------------------------------------------------------
#
#   # fastenet annotation v1
#   image <id> <width> <height>
#   box <x_min> <y_min> <x_max> <y_max> [occluded]
#   missing <x_min> <y_min> <x_max> <y_max>
#   det <x_min> <y_min> <x_max> <y_max> <score> <area>

ANN_HEADER = "# fastenet annotation v1"


def format_annotation(image_id, shape, fasteners=(), detections=()):
    h, w = shape
    if re.search(r"\s", image_id):
        raise ValueError(f"image id {image_id!r} must not contain whitespace")
    lines = [ANN_HEADER, f"image {image_id} {w} {h}"]
    for f in fasteners:
        box = f.bbox
        if box.x_max >= w or box.y_max >= h:
            raise ValueError(f"box {box.as_tuple()} outside {w}x{h} image")
        coords = " ".join(str(v) for v in box.as_tuple())
        if f.missing:
            lines.append(f"missing {coords}")
        else:
            lines.append(f"box {coords}" + (" occluded" if f.occluded else ""))
    for d in detections:
        coords = " ".join(str(v) for v in d.bbox.as_tuple())
        lines.append(f"det {coords} {d.score:.6f} {d.area}")
    return "\n".join(lines) + "\n"


def write_annotation(path, image_id, shape, fasteners=(), detections=()):
    write_text_atomic(path, format_annotation(image_id, shape, fasteners, detections))


def _coords(parts):
    if len(parts) < 5:
        raise ValueError(f"{parts[0]!r} needs four coordinates")
    return BBox(*(int(v) for v in parts[1:5]), PIXEL)


def parse_annotation(text, source="<annotation>"):
    from .postprocess import Detection
    from .synthdata import Fastener

    out = {"id": None, "width": None, "height": None, "fasteners": [], "detections": []}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if parts[0] == "image":
                out["id"], out["width"], out["height"] = parts[1], int(parts[2]), int(parts[3])
            elif parts[0] in ("box", "missing"):
                box = _coords(parts)
                flags = parts[5:]
                if any(f != "occluded" for f in flags):
                    raise ValueError(f"unknown flags {flags}")
                out["fasteners"].append(
                    Fastener(box, occluded="occluded" in flags, missing=parts[0] == "missing")
                )
            elif parts[0] == "det":
                box = _coords(parts)
                out["detections"].append(Detection(box, float(parts[5]), int(parts[6])))
            else:
                raise ValueError(f"unknown record {parts[0]!r}")
        except (IndexError, ValueError) as e:
            raise FormatError(f"{source}:{lineno}: {e}") from None
    if out["id"] is None:
        raise FormatError(f"{source}: missing 'image' record")
    for f in out["fasteners"]:
        if f.bbox.x_max >= out["width"] or f.bbox.y_max >= out["height"]:
            raise FormatError(f"{source}: box {f.bbox.as_tuple()} outside the image")
    return out


def read_annotation(path):
    with open(path) as fh:
        return parse_annotation(fh.read(), path)


def gt_boxes(annotation):
    return [f.bbox for f in annotation["fasteners"] if not f.missing]


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------

MAGIC = b"FSTNMDL\0"
VERSION = 1


def encode_model(spec, weights):
    netgraph.check_weights(spec, weights)
    out = [MAGIC, struct.pack("<H", VERSION)]
    name = spec.name.encode()
    out.append(struct.pack("<H", len(name)) + name)
    out.append(bytes.fromhex(spec.digest()))
    keys = weights.keys()
    out.append(struct.pack("<I", len(keys)))
    for layer, role in keys:
        arr = np.ascontiguousarray(weights[(layer, role)], dtype="<f4")
        payload = arr.tobytes()
        r = role.encode("ascii")
        out.append(struct.pack("<HB", layer, len(r)) + r)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(struct.pack("<I", zlib.crc32(payload)) + payload)
    return b"".join(out)


class _Reader:
    def __init__(self, data, source):
        self.data, self.pos, self.source = data, 0, source

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(
                f"{self.source}: truncated while reading {what} at byte offset {self.pos} "
                f"(need {n} bytes, {len(self.data) - self.pos} left)"
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_model(data, expect=None, source="<model>"):
    """Parse model bytes into ``(spec, WeightStore)``.

    ``expect`` optionally names the architecture the caller wants; a file
    for any other architecture is rejected.
    """
    rd = _Reader(data, source)
    if rd.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError(f"{source}: not a fastenet model file (bad magic)")
    (version,) = rd.unpack("<H", "version")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported model format version {version}")
    (nlen,) = rd.unpack("<H", "name length")
    name = rd.take(nlen, "architecture name").decode()
    digest = rd.take(32, "digest").hex()
    if name not in netgraph.BUILDERS:
        raise FormatError(f"{source}: unknown architecture {name!r}")
    spec = netgraph.build(expect or name)
    if digest != spec.digest():
        raise FormatError(f"{source}: weights do not match architecture {spec.name!r} (file holds {name!r})")
    (n,) = rd.unpack("<I", "record count")
    ws = netgraph.WeightStore()
    for _ in range(n):
        layer, rlen = rd.unpack("<HB", "record header")
        role = rd.take(rlen, "role tag").decode("ascii")
        (ndim,) = rd.unpack("<B", "ndim")
        shape = rd.unpack(f"<{ndim}I", "shape")
        (crc,) = rd.unpack("<I", "checksum")
        start = rd.pos
        payload = rd.take(4 * int(np.prod(shape, dtype=np.int64)), f"payload of ({layer}, {role})")
        if zlib.crc32(payload) != crc:
            raise FormatError(f"{source}: checksum mismatch in ({layer}, {role}) payload at byte offset {start}")
        ws[(layer, role)] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    if rd.pos != len(data):
        raise FormatError(f"{source}: {len(data) - rd.pos} trailing bytes at offset {rd.pos}")
    try:
        netgraph.check_weights(spec, ws)
    except ValueError as e:
        raise FormatError(f"{source}: {e}") from None
    return spec, ws


def save_model(path, spec, weights):
    _atomic_write(path, encode_model(spec, weights))


def load_model(path, expect=None):
    with open(path, "rb") as fh:
        return decode_model(fh.read(), expect, path)
