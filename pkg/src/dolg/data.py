"""Manifests, image loading, augmentation and the synthetic toy dataset."""

import json
import math
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw

from .errors import DataError, InvalidInputError

MEAN = torch.tensor([0.485, 0.456, 0.406]).view(3, 1, 1)
STD = torch.tensor([0.229, 0.224, 0.225]).view(3, 1, 1)


@dataclass
class LabeledDataset:
    items: list  # (path, label, split) with split in {"train", "val"}
    class_count: int

    def split(self, tag):
        return [(p, y) for p, y, s in self.items if s == tag]


def read_manifest(path):
    """Parse ``path<TAB>label`` lines; paths are resolved against the manifest's directory."""
    root = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t") if "\t" in line else line.split()
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 'path<TAB>label', got {line!r}")
            try:
                label = int(parts[1])
            except ValueError:
                raise DataError(f"{path}:{lineno}: label {parts[1]!r} is not an integer") from None
            records.append((os.path.join(root, parts[0]), label))
    return records


def write_manifest(path, records):
    root = os.path.dirname(os.path.abspath(path))
    with open(path, "w", encoding="utf-8") as fh:
        for p, label in records:
            fh.write(f"{os.path.relpath(p, root)}\t{label}\n")


def stratified_split(labels, fraction, seed):
    """Per-class seeded shuffle; the first ``round(fraction * n)`` of each class train, rest val.

    Every class with at least two items keeps one item on each side.
    """
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    tags = np.empty(len(labels), dtype=object)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        n_train = int(round(fraction * len(idx)))
        if len(idx) >= 2:
            n_train = min(max(n_train, 1), len(idx) - 1)
        tags[idx[:n_train]] = "train"
        tags[idx[n_train:]] = "val"
    return list(tags)


def make_dataset(records, fraction, seed):
    labels = [y for _, y in records]
    if not records:
        raise DataError("dataset is empty")
    class_count = max(labels) + 1
    if min(labels) < 0:
        raise DataError("labels must be non-negative")
    tags = stratified_split(labels, fraction, seed)
    return LabeledDataset([(p, y, t) for (p, y), t in zip(records, tags)], class_count)


def load_image(path, bbx=None):
    """Load an RGB image as a normalized (3, H, W) float32 tensor, optionally cropped to (x, y, w, h)."""
    if not os.path.exists(path):
        raise DataError(f"image not found: {path}")
    with Image.open(path) as im:
        im = im.convert("RGB")
        if bbx is not None:
            x, y, w, h = (int(round(v)) for v in bbx)
            im = im.crop((x, y, x + w, y + h))
        arr = np.asarray(im, dtype=np.float32) / 255.0
    t = torch.from_numpy(arr).permute(2, 0, 1).contiguous()
    return (t - MEAN) / STD


def resize(image, height, width):
    """Bilinear resize of a (3, H, W) tensor; a no-op when the size is unchanged."""
    if image.shape[-2:] == (height, width):
        return image
    if height < 1 or width < 1:
        raise InvalidInputError(f"cannot resize to {height}x{width}")
    return F.interpolate(image[None], size=(height, width), mode="bilinear", align_corners=False)[0]


def random_resized_crop(image, rng, size, scale=(0.6, 1.0), ratio=(3 / 4, 4 / 3)):
    """Crop a random region (area fraction in `scale`, aspect in `ratio`) and resize to `size`."""
    _, h, w = image.shape
    area = h * w * rng.uniform(*scale)
    aspect = math.exp(rng.uniform(math.log(ratio[0]), math.log(ratio[1])))
    cw = min(w, max(1, int(round(math.sqrt(area * aspect)))))
    ch = min(h, max(1, int(round(math.sqrt(area / aspect)))))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return resize(image[:, top:top + ch, left:left + cw], size, size)


# --------------------------------------------------------------------------
# Synthetic toy data: each class is a fixed arrangement of coloured shapes on
# a tinted background; instances jitter position, scale, colour and noise.

_SHAPES = ("ellipse", "rectangle", "triangle")


def _class_prototype(rng):
    bg = rng.uniform(0.2, 0.8, size=3)
    shapes = []
    for _ in range(3):
        shapes.append({
            "kind": _SHAPES[rng.integers(len(_SHAPES))],
            "color": rng.uniform(0, 1, size=3),
            "center": rng.uniform(0.25, 0.75, size=2),
            "size": rng.uniform(0.12, 0.25),
        })
    return {"bg": bg, "shapes": shapes}


def _rgb(values):
    return tuple(int(255 * v) for v in np.clip(values, 0, 1))


def render(proto, rng, size=64, jitter=0.06, noise=0.04, occlude=0.0):
    """Render one instance of a class prototype as a uint8 HxWx3 array."""
    s = size * 2
    shift = rng.uniform(-jitter, jitter, size=2)
    zoom = rng.uniform(1 - 2 * jitter, 1 + 2 * jitter)
    tint = rng.uniform(-0.08, 0.08, size=3)
    img = Image.new("RGB", (s, s), _rgb(proto["bg"] + tint))
    draw = ImageDraw.Draw(img)
    for sh in proto["shapes"]:
        cx, cy = (0.5 + (sh["center"] - 0.5) * zoom + shift) * s
        r = sh["size"] * zoom * s
        color = _rgb(sh["color"] + tint)
        if sh["kind"] == "ellipse":
            draw.ellipse((cx - r, cy - r * 0.7, cx + r, cy + r * 0.7), fill=color)
        elif sh["kind"] == "rectangle":
            draw.rectangle((cx - r, cy - r * 0.6, cx + r, cy + r * 0.6), fill=color)
        else:
            draw.polygon([(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)], fill=color)
    if occlude > 0:
        ow = int(s * occlude)
        ox, oy = rng.integers(0, s - ow + 1, size=2)
        draw.rectangle((ox, oy, ox + ow, oy + ow), fill=tuple(int(v) for v in rng.integers(0, 256, size=3)))
    img = img.resize((size, size), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float64) / 255.0
    arr = arr + rng.normal(0, noise, size=arr.shape)
    return (np.clip(arr, 0, 1) * 255).round().astype(np.uint8)


def make_toy_dataset(root, num_classes=16, per_class=32, size=64, seed=0, db_per_class=(3, 2, 1)):
    """Write the synthetic training set and a small retrieval benchmark under `root`.

    Layout::

        train/*.png, train.tsv                 classification training data
        retrieval/query/*.png, query.tsv       one query per class
        retrieval/db/*.png, db.tsv             easy / hard / junk items per class
        retrieval/gt.json                      ground truth

    Returns a dict of the created manifest paths.
    """
    rng = np.random.default_rng(seed)
    protos = [_class_prototype(rng) for _ in range(num_classes)]
    os.makedirs(os.path.join(root, "train"), exist_ok=True)
    os.makedirs(os.path.join(root, "retrieval", "query"), exist_ok=True)
    os.makedirs(os.path.join(root, "retrieval", "db"), exist_ok=True)

    train = []
    for c, proto in enumerate(protos):
        for i in range(per_class):
            path = os.path.join(root, "train", f"c{c:02d}_{i:03d}.png")
            Image.fromarray(render(proto, rng, size)).save(path)
            train.append((path, c))
    write_manifest(os.path.join(root, "train.tsv"), train)

    n_easy, n_hard, n_junk = db_per_class
    queries, db, gt_queries = [], [], []
    margin = size // 8
    for c, proto in enumerate(protos):
        qid = f"q{c:02d}"
        qpath = os.path.join(root, "retrieval", "query", qid + ".png")
        Image.fromarray(render(proto, rng, size, jitter=0.02, noise=0.02)).save(qpath)
        queries.append((qpath, c))
        ids = {"easy": [], "hard": [], "junk": []}
        levels = [("easy", dict(jitter=0.04, noise=0.03))] * n_easy
        levels += [("hard", dict(jitter=0.12, noise=0.08, occlude=0.3))] * n_hard
        levels += [("junk", dict(jitter=0.2, noise=0.15, occlude=0.6))] * n_junk
        for k, (level, kw) in enumerate(levels):
            did = f"db{c:02d}_{k}"
            dpath = os.path.join(root, "retrieval", "db", did + ".png")
            Image.fromarray(render(proto, rng, size, **kw)).save(dpath)
            db.append((dpath, c))
            ids[level].append(did)
        gt_queries.append({"query": qid, "bbx": [margin, margin, size - 2 * margin, size - 2 * margin],
                           **ids})
    write_manifest(os.path.join(root, "retrieval", "query.tsv"), queries)
    write_manifest(os.path.join(root, "retrieval", "db.tsv"), db)
    gt = {"database": [os.path.splitext(os.path.basename(p))[0] for p, _ in db], "queries": gt_queries}
    with open(os.path.join(root, "retrieval", "gt.json"), "w", encoding="utf-8") as fh:
        json.dump(gt, fh, indent=1)
    return {
        "train": os.path.join(root, "train.tsv"),
        "query": os.path.join(root, "retrieval", "query.tsv"),
        "db": os.path.join(root, "retrieval", "db.tsv"),
        "gt": os.path.join(root, "retrieval", "gt.json"),
    }
