"""On-disk dataset layout.

    root/images/<id>.<png|tif|tiff>
    root/annotations/<id>.json      # [{"x": float, "y": float}, ...]
    root/manifest.json              # optional; written by ``write_dataset``
"""

import hashlib
import json
import logging
import os
import tempfile
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from cellcount.data.splits import assign_splits
from cellcount.data.types import DotAnnotation, ImageSample
from cellcount.errors import IngestionError, ParseError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DatasetLayout:
    images_dir: str = "images"
    annotations_dir: str = "annotations"
    extensions: tuple = (".png", ".tif", ".tiff")


def _record_lines(text):
    """Line number of every top-level element of a JSON array."""
    dec = json.JSONDecoder()
    pos = text.index("[") + 1
    lines = []
    while True:
        while pos < len(text) and text[pos] in " \t\r\n,":
            pos += 1
        if pos >= len(text) or text[pos] == "]":
            return lines
        lines.append(text.count("\n", 0, pos) + 1)
        _, pos = dec.raw_decode(text, pos)


def parse_annotation(path):
    path = Path(path)
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(path, e.lineno, e.msg) from None
    if not isinstance(data, list):
        raise ParseError(path, 1, "expected a JSON list of {x, y} records")
    pts = []
    for i, rec in enumerate(data):
        try:
            pts.append((float(rec["x"]), float(rec["y"])))
        except (TypeError, KeyError, ValueError):
            line = _record_lines(text)[i]
            raise ParseError(path, line, f"record {i} is not an {{x, y}} object: {rec!r}") from None
    return DotAnnotation(pts)


def read_image(path):
    """Load an image as float32 H x W x C in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode in ("P", "PA", "CMYK", "YCbCr", "LA"):
                im = im.convert("RGB")
            arr = np.asarray(im)
    except (OSError, Image.DecompressionBombError) as exc:
        # multi-page or float TIFFs that Pillow cannot decode
        try:
            import tifffile
        except ImportError:
            raise IngestionError(f"cannot read {path}: {exc} (install the 'tiff' extra "
                                 "for TIFF variants Pillow does not support)") from exc
        arr = tifffile.imread(path)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    elif arr.dtype in (np.uint16, np.int32):
        arr = arr.astype(np.float32) / 65535.0
    else:
        arr = np.clip(arr.astype(np.float32), 0.0, 1.0)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def write_image(path, image):
    arr = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)


def atomic_write_text(path, text):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sample_hash(sample):
    h = hashlib.sha256()
    h.update(sample.source_id.encode())
    h.update(np.ascontiguousarray(sample.image, dtype=np.float32).tobytes())
    h.update(np.ascontiguousarray(sample.dots.points, dtype=np.float64).tobytes())
    return h.hexdigest()


def dataset_hash(samples):
    """Order-independent content hash over images, dots and ids."""
    h = hashlib.sha256()
    for digest in sorted(sample_hash(s) for s in samples):
        h.update(digest.encode())
    return h.hexdigest()


def load_dataset(root, layout=DatasetLayout(), seed=0):
    """Read every image with its annotation and assign seeded 10:9:1 splits.

    Tiles written by ``write_dataset`` keep their parent id, and splits are
    drawn per parent so tiles of one image never straddle splits.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} does not exist")
    img_dir = root / layout.images_dir
    ann_dir = root / layout.annotations_dir
    images = sorted(p for p in img_dir.glob("*") if p.suffix.lower() in layout.extensions) \
        if img_dir.is_dir() else []
    if not images:
        warnings.warn(f"no images found under {img_dir}", stacklevel=2)
        return []
    missing = [str(ann_dir / f"{p.stem}.json") for p in images
               if not (ann_dir / f"{p.stem}.json").is_file()]
    if missing:
        raise IngestionError(f"{len(missing)} missing annotation file(s): " + ", ".join(missing))
    parents = {}
    manifest = root / "manifest.json"
    if manifest.is_file():
        parents = json.loads(manifest.read_text()).get("parents", {})
    samples = []
    for p in images:
        img = read_image(p)
        dots = parse_annotation(ann_dir / f"{p.stem}.json")
        try:
            dots.check_bounds(img.shape)
        except ValueError as e:
            raise IngestionError(f"{p.stem}: {e}") from None
        samples.append(ImageSample(img, dots, p.stem, "train", parents.get(p.stem)))
    splits = assign_splits([s.group_id for s in samples], seed)
    for s in samples:
        s.split = splits[s.group_id]
    log.info("loaded %d samples from %s", len(samples), root)
    return samples


def write_dataset(samples, root, extra=None, layout=DatasetLayout()):
    """Write samples in the standard layout plus a manifest of content hashes.

    Images are stored as 8-bit PNG; samples already quantized to 1/255 steps
    (as the synthetic generator produces) round-trip exactly.
    """
    root = Path(root)
    (root / layout.images_dir).mkdir(parents=True, exist_ok=True)
    (root / layout.annotations_dir).mkdir(parents=True, exist_ok=True)
    hashes, parents = {}, {}
    for s in samples:
        write_image(root / layout.images_dir / f"{s.source_id}.png", s.image)
        recs = [{"x": float(x), "y": float(y)} for x, y in s.dots.points]
        (root / layout.annotations_dir / f"{s.source_id}.json").write_text(json.dumps(recs))
        hashes[s.source_id] = sample_hash(s)
        if s.parent_id is not None:
            parents[s.source_id] = s.parent_id
    manifest = {
        "num_samples": len(samples),
        "dataset_hash": dataset_hash(samples),
        "splits": {s.source_id: s.split for s in samples},
        "parents": parents,
        "content_hashes": hashes,
    }
    if extra:
        manifest.update(extra)
    atomic_write_text(root / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
