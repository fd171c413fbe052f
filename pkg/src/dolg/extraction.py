"""Multi-scale descriptor extraction and the on-disk descriptor store."""

import logging
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import load_image, resize
from .errors import DataError, FormatError, InvalidInputError, ShapeError

log = logging.getLogger(__name__)

DEFAULT_SCALES = (0.3535, 0.5, 0.7071, 1.0, 1.4142)
UNIT_TOL = 1e-5


def l2_normalize(v):
    return v / v.norm()


def _renormalize(v):
    # a mean of identical unit vectors is already unit; leave it bit-for-bit alone
    n = v.norm()
    if abs(n.item() - 1.0) <= 8 * torch.finfo(v.dtype).eps:
        return v
    return v / n


def extract_multiscale(image, model, scales=DEFAULT_SCALES, strict=True):
    """Descriptor of one (3, H, W) image: per-scale L2-normalized, averaged, re-normalized.

    A scale whose resized image falls below the backbone's stage-4 stride
    raises in strict mode and is skipped with a warning otherwise.
    """
    if not scales:
        raise InvalidInputError("scale set is empty")
    if any(not s > 0 for s in scales):
        raise InvalidInputError(f"scales must be positive, got {list(scales)}")
    min_size = model.cfg.backbone.stage4_stride
    _, h, w = image.shape
    model.eval()
    per_scale = []
    with torch.no_grad():
        for s in sorted(scales):
            sh, sw = int(round(h * s)), int(round(w * s))
            if min(sh, sw) < min_size:
                msg = f"scale {s} resizes a {h}x{w} image to {sh}x{sw}, below the minimum {min_size}"
                if strict:
                    raise InvalidInputError(msg)
                log.warning("skipping %s", msg)
                continue
            desc = model(resize(image, sh, sw)[None])[0]
            per_scale.append(l2_normalize(desc))
    if not per_scale:
        raise InvalidInputError(f"every scale was below the minimum size for a {h}x{w} image")
    return _renormalize(torch.stack(per_scale).mean(dim=0))


def extract_images(records, model, scales=DEFAULT_SCALES, strict=True, crops=None):
    """Build a store from ``(id, path)`` records; ``crops`` maps id -> (x, y, w, h)."""
    crops = crops or {}
    dtype = next(model.parameters()).dtype
    ids, vectors = [], []
    for image_id, path in records:
        image = load_image(path, crops.get(image_id)).to(dtype)
        ids.append(image_id)
        vectors.append(extract_multiscale(image, model, scales, strict).double().numpy())
    dim = model.fusion.fc.out_features if model.fusion is not None else model.head.out_features
    arr = np.stack(vectors).astype(np.float32) if vectors else np.zeros((0, dim), np.float32)
    return DescriptorStore(ids, arr)


# --------------------------------------------------------------------------
# Store file layout (little-endian):
#   magic b"DOLGDESC" | version u32 | dim u32 | count u64
#   payload: count*dim float32, row-major
#   ids: count x (u32 byte length + utf-8 bytes)

STORE_MAGIC = b"DOLGDESC"
STORE_VERSION = 1
_HEADER = struct.Struct("<8sIIQ")


@dataclass
class DescriptorStore:
    ids: list = field(default_factory=list)
    vectors: np.ndarray = field(default_factory=lambda: np.zeros((0, 512), np.float32))

    def __post_init__(self):
        self.ids = list(self.ids)
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise ShapeError(f"{len(self.ids)} ids but vectors of shape {self.vectors.shape}")
        self._index = None

    @property
    def dim(self):
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.ids)

    def validate(self):
        if len(set(self.ids)) != len(self.ids):
            seen = set()
            dup = next(i for i in self.ids if i in seen or seen.add(i))
            raise DataError(f"duplicate id {dup!r} in descriptor store")
        norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_TOL)
        if bad.size:
            i = bad[0]
            raise InvalidInputError(f"vector {self.ids[i]!r} has norm {norms[i]:.8f}, expected unit length")

    def vector(self, image_id):
        if self._index is None:
            self._index = {k: i for i, k in enumerate(self.ids)}
        if image_id not in self._index:
            raise DataError(f"id {image_id!r} not found in descriptor store")
        return self.vectors[self._index[image_id]]


def store_write(store: DescriptorStore, path):
    store.validate()
    parts = [_HEADER.pack(STORE_MAGIC, STORE_VERSION, store.dim, len(store)),
             np.ascontiguousarray(store.vectors, dtype="<f4").tobytes()]
    for image_id in store.ids:
        raw = image_id.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def store_read(path) -> DescriptorStore:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _HEADER.size:
        raise FormatError(f"file is {len(buf)} bytes, shorter than the {_HEADER.size}-byte header", len(buf))
    magic, version, dim, count = _HEADER.unpack_from(buf, 0)
    if magic != STORE_MAGIC:
        raise FormatError("bad magic bytes, not a descriptor store", 0)
    if version != STORE_VERSION:
        raise FormatError(f"unsupported store version {version}", 8)
    pos = _HEADER.size
    nbytes = 4 * dim * count
    if pos + nbytes > len(buf):
        raise FormatError(f"header declares {count} x {dim} vectors ({nbytes} bytes) but only "
                          f"{len(buf) - pos} payload bytes remain", pos)
    vectors = np.frombuffer(buf, dtype="<f4", count=dim * count, offset=pos).reshape(count, dim).copy()
    pos += nbytes
    ids = []
    for k in range(count):
        if pos + 4 > len(buf):
            raise FormatError(f"truncated length prefix of id #{k}", pos)
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if pos + n > len(buf):
            raise FormatError(f"id #{k} declares {n} bytes, only {len(buf) - pos} remain", pos)
        try:
            ids.append(buf[pos:pos + n].decode("utf-8"))
        except UnicodeDecodeError:
            raise FormatError(f"id #{k} is not valid utf-8", pos) from None
        pos += n
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after the id table", pos)
    store = DescriptorStore(ids, vectors)
    store.validate()
    return store
