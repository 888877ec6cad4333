"""Synthetic SAR scenes: L-look Gamma speckle over a mean map with ships and coastal clutter.

On-disk layout written by :func:`gen_dataset`::

    out_dir/meta.json
    out_dir/{train,val}/annotations.jsonl   # {"image": "images/00000.stn", "boxes": [[x, y, w, h], ...]}
    out_dir/{train,val}/images/00000.stn    # or .pgm

Boxes are in pixels (top-left x, y, width, height).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .detection.boxes import pairwise_iou
from .detection.train import Dataset

TENSOR_MAGIC = b"STN1"


class DatasetError(ValueError):
    pass


@dataclass
class SceneSpec:
    size: int = 64
    mu_bg: float = 1.0
    looks: float = 1.0
    ships: tuple[int, int] = (1, 4)
    ship_size: tuple[int, int] = (4, 14)
    contrast: tuple[float, float] = (6.0, 12.0)
    coastal: bool = False
    coast_width: tuple[float, float] = (0.15, 0.35)
    coast_multiplier: float = 4.0
    max_overlap: float = 0.3
    seed: int = 0

    def __post_init__(self):
        self.ships = tuple(int(v) for v in self.ships)
        self.ship_size = tuple(int(v) for v in self.ship_size)
        self.contrast = tuple(float(v) for v in self.contrast)
        self.coast_width = tuple(float(v) for v in self.coast_width)
        if self.looks < 1:
            raise ValueError("looks must be >= 1")
        if self.mu_bg <= 0:
            raise ValueError("background mean must be positive")
        if self.ship_size[0] < 2 or self.ship_size[1] > self.size or self.ship_size[0] > self.ship_size[1]:
            raise ValueError(f"invalid ship size range {self.ship_size}")
        if self.contrast[0] < 1 or self.contrast[0] > self.contrast[1]:
            raise ValueError(f"invalid contrast range {self.contrast}")


def gen_speckle(shape, mu: float, looks: float, seed=None) -> np.ndarray:
    """``mu * S`` with ``S ~ Gamma(looks, 1/looks)`` i.i.d. (mean 1, variance 1/looks)."""
    if looks < 1:
        raise ValueError("looks must be >= 1")
    if mu <= 0:
        raise ValueError("mu must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return (mu * rng.gamma(shape=looks, scale=1.0 / looks, size=shape)).astype(np.float32)


def _coast_region(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Boolean land/clutter band along one random image edge with a ragged shoreline."""
    n = spec.size
    width = rng.uniform(*spec.coast_width) * n
    edge = int(rng.integers(4))
    # ragged shoreline: smooth random walk around the nominal width
    steps = rng.normal(0.0, 0.6, size=n).cumsum()
    shore = np.clip(width + steps - steps.mean(), 2, n / 2).astype(int)
    idx = np.arange(n)
    band = idx[None, :] < shore[:, None]  # band[row, col]: col < shore[row] (left edge)
    return np.rot90(band, k=edge).copy()


def render_scene(spec: SceneSpec, rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Returns an ``(H, W)`` float32 intensity image and ``(G, 4)`` normalized cxcywh boxes."""
    rng = rng or np.random.default_rng(spec.seed)
    n = spec.size
    mean = np.full((n, n), spec.mu_bg, dtype=np.float64)
    land = _coast_region(spec, rng) if spec.coastal else np.zeros((n, n), dtype=bool)
    count = int(rng.integers(spec.ships[0], spec.ships[1] + 1))
    boxes: list[tuple[int, int, int, int]] = []
    attempts = 0
    while len(boxes) < count and attempts < 200:
        attempts += 1
        w = int(rng.integers(spec.ship_size[0], spec.ship_size[1] + 1))
        h = int(rng.integers(spec.ship_size[0], spec.ship_size[1] + 1))
        if w * h < 4:
            continue
        x = int(rng.integers(0, n - w + 1))
        y = int(rng.integers(0, n - h + 1))
        if land[y : y + h, x : x + w].any():
            continue
        cand = _px_to_norm(np.array([[x, y, w, h]], dtype=np.float64), n)
        if boxes and pairwise_iou(cand, _px_to_norm(np.array(boxes, dtype=np.float64), n)).max() >= spec.max_overlap:
            continue
        boxes.append((x, y, w, h))
        mean[y : y + h, x : x + w] = rng.uniform(*spec.contrast) * spec.mu_bg
    mean[land] *= spec.coast_multiplier
    image = (mean * gen_speckle((n, n), 1.0, spec.looks, rng)).astype(np.float32)
    px = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    return image, _px_to_norm(px, n)


def _px_to_norm(px: np.ndarray, size: int) -> np.ndarray:
    px = np.asarray(px, dtype=np.float64).reshape(-1, 4)
    return np.stack([(px[:, 0] + px[:, 2] / 2) / size, (px[:, 1] + px[:, 3] / 2) / size,
                     px[:, 2] / size, px[:, 3] / size], axis=1)


def norm_to_px(boxes: np.ndarray, size: int) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4) * size
    return np.stack([b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2, b[:, 2], b[:, 3]], axis=1)


def px_to_norm(px, size: int) -> np.ndarray:
    return _px_to_norm(px, size)


# ---------------------------------------------------------------------------
# file formats


def write_tensor(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = TENSOR_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != TENSOR_MAGIC:
        raise DatasetError(f"{path}: bad magic {buf[:4]!r}")
    (rank,) = struct.unpack_from("<I", buf, 4)
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    off = 8 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    if len(buf) != off + 4 * count:
        raise DatasetError(f"{path}: expected {count} floats, file has {(len(buf) - off) // 4}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float32)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Clip at mean + 5 sigma, then min-max scale to 0..255."""
    a = np.asarray(image, dtype=np.float64)
    a = np.minimum(a, a.mean() + 5.0 * a.std())
    lo, hi = a.min(), a.max()
    if hi <= lo:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.round((a - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path, image8: np.ndarray) -> None:
    img = np.asarray(image8, dtype=np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    if tokens[0] != b"P5":
        raise DatasetError(f"{path}: not a binary PGM (P5)")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise DatasetError(f"{path}: only 8-bit PGM supported")
    pos += 1
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w)


def load_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".pgm":
        return read_pgm(path).astype(np.float32)
    return read_tensor(path)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class DatasetSpec:
    scene: SceneSpec
    n_train: int = 500
    n_val: int = 100
    coastal_prob: float = 0.5
    seed: int = 0
    image_format: str = "stn"


def render_split(spec: DatasetSpec, split: str, count: int) -> tuple[list[np.ndarray], list[np.ndarray], list[bool]]:
    split_id = {"train": 0, "val": 1}[split]
    images, boxes, coastal = [], [], []
    for i in range(count):
        rng = np.random.default_rng([spec.seed, split_id, i])
        is_coastal = bool(rng.random() < spec.coastal_prob)
        scene = SceneSpec(**{**asdict(spec.scene), "coastal": is_coastal})
        img, b = render_scene(scene, rng)
        images.append(img)
        boxes.append(b)
        coastal.append(is_coastal)
    return images, boxes, coastal


def gen_dataset(spec: DatasetSpec, out_dir) -> Path:
    out = Path(out_dir)
    if spec.image_format not in ("stn", "pgm"):
        raise ValueError(f"unknown image format {spec.image_format!r}")
    size = spec.scene.size
    for split, count in (("train", spec.n_train), ("val", spec.n_val)):
        images, boxes, coastal = render_split(spec, split, count)
        img_dir = out / split / "images"
        img_dir.mkdir(parents=True, exist_ok=True)
        lines = []
        for i, (img, b, c) in enumerate(zip(images, boxes, coastal)):
            rel = f"images/{i:05d}.{spec.image_format}"
            if spec.image_format == "stn":
                write_tensor(out / split / rel, img)
            else:
                write_pgm(out / split / rel, to_uint8(img))
            px = [[float(v) for v in row] for row in norm_to_px(b, size)]
            lines.append(json.dumps({"image": rel, "boxes": px, "coastal": c}))
        (out / split / "annotations.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))
    meta = {"image_size": size, "n_train": spec.n_train, "n_val": spec.n_val, "seed": spec.seed,
            "coastal_prob": spec.coastal_prob, "format": spec.image_format, "scene": asdict(spec.scene)}
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return out


def _validate_boxes(px: np.ndarray, h: int, w: int, where: str) -> None:
    for row in px:
        x, y, bw, bh = row
        if bw <= 0 or bh <= 0:
            raise DatasetError(f"{where}: box {row.tolist()} has non-positive size")
        if x < 0 or y < 0 or x + bw > w + 1e-6 or y + bh > h + 1e-6:
            raise DatasetError(f"{where}: box {row.tolist()} leaves the {w}x{h} image")


def load_dataset(root, split: str = "train") -> Dataset:
    """Read ``root/split/annotations.jsonl`` (or a COCO-subset ``annotations.json``)."""
    base = Path(root) / split
    ann = base / "annotations.jsonl"
    if not ann.exists():
        coco = base / "annotations.json"
        if coco.exists():
            return load_coco(coco, base)
        raise DatasetError(f"no annotations found under {base}")
    images, boxes, names, flags = [], [], [], []
    for n, line in enumerate(ann.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        rec = json.loads(line)
        path = base / rec["image"]
        if not path.exists():
            raise DatasetError(f"{ann}:{n}: image {rec['image']} does not exist")
        img = load_image(path)
        px = np.asarray(rec["boxes"], dtype=np.float64).reshape(-1, 4)
        _validate_boxes(px, img.shape[0], img.shape[1], f"{ann}:{n}")
        if img.shape[0] != img.shape[1]:
            raise DatasetError(f"{ann}:{n}: image must be square, got {img.shape}")
        images.append(img)
        boxes.append(_px_to_norm(px, img.shape[1]))
        names.append(rec["image"])
        flags.append(bool(rec.get("coastal", False)))
    if images and len({im.shape for im in images}) != 1:
        raise DatasetError(f"{ann}: images have differing sizes")
    arr = np.stack(images)[:, None] if images else np.zeros((0, 1, 0, 0), np.float32)
    ds = Dataset(arr, boxes, names)
    ds.coastal = flags  # type: ignore[attr-defined]
    return ds


def load_coco(path, image_root=None) -> Dataset:
    """COCO-subset reader: ``images`` (id, file_name, width, height) and ``annotations`` (image_id, bbox)."""
    path = Path(path)
    doc = json.loads(path.read_text())
    root = Path(image_root) if image_root is not None else path.parent
    by_id = {}
    for im in doc.get("images", []):
        by_id[im["id"]] = {"info": im, "boxes": []}
    for a in doc.get("annotations", []):
        if a["image_id"] not in by_id:
            raise DatasetError(f"{path}: annotation references unknown image id {a['image_id']}")
        by_id[a["image_id"]]["boxes"].append(a["bbox"])
    images, boxes, names = [], [], []
    for image_id in sorted(by_id):
        info = by_id[image_id]["info"]
        w, h = int(info["width"]), int(info["height"])
        px = np.asarray(by_id[image_id]["boxes"], dtype=np.float64).reshape(-1, 4)
        _validate_boxes(px, h, w, f"{path}: image {image_id}")
        img_path = root / info["file_name"]
        images.append(load_image(img_path) if img_path.exists() else None)
        boxes.append(_px_to_norm(px, w))
        names.append(info["file_name"])
    arr = np.stack(images)[:, None] if images and all(i is not None for i in images) else None
    return Dataset(arr, boxes, names)


def dataset_from_arrays(images: list[np.ndarray], boxes: list[np.ndarray]) -> Dataset:
    return Dataset(np.stack(images)[:, None].astype(np.float32), [np.asarray(b).reshape(-1, 4) for b in boxes])
