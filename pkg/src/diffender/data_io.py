"""Dataset ingestion, infrared proxy transform, checkpoints and reports."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

CHECKPOINT_MAGIC = b"DFCKPT01"
CHECKPOINT_VERSION = "1"
CHECKPOINT_KINDS = ("diffusion", "classifier", "prompts", "idc_token")

REPORT_COLUMNS = (
    "experiment",
    "defense",
    "attack",
    "clean_acc",
    "robust_acc",
    "asr",
    "mean_iou",
    "runtime_s",
)

IMAGE_SUFFIXES = (".png", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg")


class InputError(ValueError):
    """Malformed dataset directory or manifest."""


class FormatError(ValueError):
    """Unreadable or incompatible checkpoint file."""


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, H, W, C) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str = "train"
    filenames: tuple[str, ...] = ()

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, H, W, C), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.split not in ("train", "test"):
            raise ValueError(f"unknown split {self.split!r}")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def channels(self) -> int:
        return int(self.images.shape[-1])

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore[return-value]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        names = tuple(self.filenames[i] for i in idx) if self.filenames else ()
        return Dataset(self.images[idx].copy(), self.labels[idx].copy(), self.split, names)


def _read_manifest(path: Path) -> list[tuple[str, int]]:
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        name, sep, label = line.rpartition(",")
        if not sep or not name:
            raise InputError(f"{path}:{lineno}: expected 'relative_path,label'")
        try:
            rows.append((name, int(label)))
        except ValueError:
            raise InputError(f"{path}:{lineno}: label {label!r} is not an integer") from None
    return rows


def load_dataset(path, split: str = "train", manifest: str = "labels.csv") -> Dataset:
    """Load every image listed in ``path/manifest``, sorted by filename.

    Pixel values are scaled to [0, 1]. Grayscale files give a single
    channel, everything else is converted to RGB.
    """
    root = Path(path)
    mpath = root / manifest
    if not mpath.is_file():
        raise InputError(f"missing label manifest {mpath}")
    rows = sorted(_read_manifest(mpath))
    images, labels = [], []
    for name, label in rows:
        fpath = root / name
        if not fpath.is_file():
            raise InputError(f"manifest references missing file {fpath}")
        with Image.open(fpath) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("L" if im.mode in ("1", "I", "I;16", "F", "LA") else "RGB")
            arr = np.asarray(im, dtype=np.float32) / 255.0
        if arr.ndim == 2:
            arr = arr[..., None]
        if images and arr.shape != images[0].shape:
            raise InputError(f"{name}: image shape {arr.shape} differs from {images[0].shape}")
        images.append(arr)
        labels.append(label)
    if images:
        stack = np.stack(images)
    else:
        stack = np.zeros((0, 0, 0, 0), dtype=np.float32)
    return Dataset(stack, np.asarray(labels, dtype=np.int64), split, tuple(n for n, _ in rows))


def save_dataset(ds: Dataset, path, manifest: str = "labels.csv") -> None:
    """Write ``ds`` as PNG files plus a manifest readable by :func:`load_dataset`."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    width = max(5, len(str(len(ds))))
    for i, (img, label) in enumerate(zip(ds.images, ds.labels)):
        name = ds.filenames[i] if ds.filenames else f"{i:0{width}d}.png"
        save_png(img, root / name)
        lines.append(f"{name},{int(label)}")
    (root / manifest).write_text("".join(l + "\n" for l in lines), encoding="utf-8")


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_png(img: np.ndarray, path) -> None:
    arr = to_uint8(img)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def to_infrared_proxy(image: np.ndarray, contrast: float = 0.7) -> np.ndarray:
    """Map an RGB image (H, W, 3) to a single-channel infrared stand-in.

    Luminance, then a 3x3 box blur (edge replication), then contrast
    compression toward mid-gray: ``0.5 + contrast * (v - 0.5)``.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
    lum = image[..., 0] * 0.299 + image[..., 1] * 0.587 + image[..., 2] * 0.114
    blurred = ndimage.uniform_filter(lum.astype(np.float64), size=3, mode="nearest")
    out = 0.5 + contrast * (blurred - 0.5)
    dtype = image.dtype if image.dtype.kind == "f" else np.float32
    return np.clip(out, 0.0, 1.0).astype(dtype)[..., None]


def infrared_dataset(ds: Dataset) -> Dataset:
    imgs = np.stack([to_infrared_proxy(im) for im in ds.images]) if len(ds) else ds.images
    return Dataset(imgs.astype(np.float32), ds.labels.copy(), ds.split, ds.filenames)


# --------------------------------------------------------------------------
# Checkpoints
#
# Layout: magic (8 bytes) | header length (u64 LE) | header JSON | array blobs.
# The header holds kind, metadata and one index entry per array
# (name, dtype, shape, offset, nbytes, crc32). Keys are sorted so equal
# checkpoints serialize to equal bytes.


@dataclass
class Checkpoint:
    kind: str
    parameters: dict[str, np.ndarray]
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in CHECKPOINT_KINDS:
            raise ValueError(f"unknown checkpoint kind {self.kind!r}")
        self.metadata = {str(k): str(v) for k, v in self.metadata.items()}
        self.metadata.setdefault("format_version", CHECKPOINT_VERSION)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    index = []
    blobs = []
    offset = 0
    for name in sorted(ckpt.parameters):
        arr = np.asarray(ckpt.parameters[name], order="C")
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        index.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
                "crc32": zlib.crc32(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"kind": ckpt.kind, "metadata": ckpt.metadata, "arrays": index},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC or len(data) < 16:
        raise FormatError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupted header") from exc
    meta = header.get("metadata", {})
    version = meta.get("format_version")
    if version is None:
        raise FormatError(f"{path}: metadata lacks format_version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: format version {version!r}, expected {CHECKPOINT_VERSION!r}")
    body = memoryview(data)[16 + hlen :]
    params = {}
    for entry in header["arrays"]:
        start, n = entry["offset"], entry["nbytes"]
        raw = bytes(body[start : start + n])
        if len(raw) != n or zlib.crc32(raw) != entry["crc32"]:
            raise FormatError(f"{path}: array {entry['name']!r} is corrupted")
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        params[entry["name"]] = arr.copy()
    return Checkpoint(header["kind"], params, dict(meta))


# --------------------------------------------------------------------------
# Reports


@dataclass
class DefenseReport:
    experiment: str
    defense: str
    attack: str
    clean_acc: float = math.nan
    robust_acc: float = math.nan
    asr: float = math.nan
    mean_iou: float = math.nan
    runtime_s: float = 0.0
    stage_runtime_s: dict[str, float] = field(default_factory=dict)
    rows: list[dict] = field(default_factory=list)
    config_hash: str = ""

    def metrics(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in REPORT_COLUMNS[3:]}


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_report(report: DefenseReport | Sequence[DefenseReport], path, format: str = "csv") -> None:
    """Write one report or a list of reports as CSV or JSON.

    CSV columns are ``REPORT_COLUMNS`` with floats at 6 decimals. JSON is a
    list of objects with those keys plus ``stage_runtime_s``, ``rows`` and
    ``config_hash``.
    """
    reports = [report] if isinstance(report, DefenseReport) else list(report)
    path = Path(path)
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in reports:
            writer.writerow([_fmt(getattr(r, c)) for c in REPORT_COLUMNS])
        text = buf.getvalue()
    elif format == "json":
        payload = []
        for r in reports:
            entry = {c: getattr(r, c) for c in REPORT_COLUMNS}
            for c in REPORT_COLUMNS[3:]:
                entry[c] = _json_float(entry[c])
            entry["stage_runtime_s"] = {k: round(v, 6) for k, v in sorted(r.stage_runtime_s.items())}
            entry["rows"] = r.rows
            entry["config_hash"] = r.config_hash
            payload.append(entry)
        text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    else:
        raise ValueError(f"unknown report format {format!r}")
    path.write_text(text, encoding="utf-8")


def _json_float(v: float):
    v = float(v)
    return None if math.isnan(v) else round(v, 6)


def read_report(path, format: str | None = None) -> list[DefenseReport]:
    path = Path(path)
    format = format or path.suffix.lstrip(".")
    if format == "csv":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            return [
                DefenseReport(
                    row["experiment"],
                    row["defense"],
                    row["attack"],
                    **{c: float(row[c]) for c in REPORT_COLUMNS[3:]},
                )
                for row in reader
            ]
    if format == "json":
        out = []
        for entry in json.loads(path.read_text(encoding="utf-8")):
            vals = {c: math.nan if entry[c] is None else float(entry[c]) for c in REPORT_COLUMNS[3:]}
            out.append(
                DefenseReport(
                    entry["experiment"],
                    entry["defense"],
                    entry["attack"],
                    stage_runtime_s=entry.get("stage_runtime_s", {}),
                    rows=entry.get("rows", []),
                    config_hash=entry.get("config_hash", ""),
                    **vals,
                )
            )
        return out
    raise ValueError(f"unknown report format {format!r}")

