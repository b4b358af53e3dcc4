"""Loading and saving of acquisitions, masks, labels and reports.

Images are binary PGM (``P5``, maxval 255 or 65535, 16-bit big-endian);
PNG is accepted on read. Manifests, labels and reports are JSON.
"""
from __future__ import annotations

import json
import os
import re
import tempfile
from pathlib import Path

import numpy as np

from .core import (
    Acquisition,
    BrainMask,
    Frame,
    PhaseLabel,
    ScoreReport,
    Stage,
    View,
    is_valid_sequence,
)
from .errors import (
    EmptyMask,
    InvalidLabels,
    IoError,
    MissingFile,
    ParseError,
    UnsupportedPixelFormat,
)

_PGM_HEADER = re.compile(rb"P5\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s")


def atomic_write_bytes(path, data):
    """Write via a temporary file in the target directory, then rename."""
    path = Path(path)
    if not path.parent.is_dir():
        raise IoError(f"directory does not exist: {path.parent}")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise IoError(f"cannot write {path}: {exc}") from exc


def dumps_json(obj):
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"


def write_json(path, obj):
    atomic_write_bytes(path, dumps_json(obj).encode("utf-8"))


def read_json(path):
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such file: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc


# --- raw images -------------------------------------------------------------

def read_pgm(path):
    """Return the raw integer array and its maxval."""
    data = Path(path).read_bytes()
    m = _PGM_HEADER.match(data)
    if m is None:
        raise UnsupportedPixelFormat(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval == 255:
        dtype = np.dtype("u1")
    elif maxval == 65535:
        dtype = np.dtype(">u2")
    else:
        raise UnsupportedPixelFormat(f"{path}: unsupported PGM maxval {maxval}")
    body = data[m.end():]
    n = w * h * dtype.itemsize
    if len(body) < n:
        raise ParseError(f"{path}: truncated PGM data")
    raw = np.frombuffer(body[:n], dtype=dtype).reshape(h, w)
    return raw.astype(np.uint16 if maxval == 65535 else np.uint8), maxval


def encode_pgm(raw):
    raw = np.asarray(raw)
    h, w = raw.shape
    if raw.dtype == np.uint8:
        maxval, body = 255, raw.tobytes()
    elif raw.dtype == np.uint16:
        maxval, body = 65535, raw.astype(">u2").tobytes()
    else:
        raise UnsupportedPixelFormat(f"cannot encode dtype {raw.dtype} as PGM")
    return f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + body


def _read_png(path):
    from PIL import Image

    with Image.open(path) as img:
        mode = img.mode
        if mode == "L":
            return np.asarray(img, dtype=np.uint8), 255
        if mode in ("I;16", "I;16B", "I;16L"):
            return np.asarray(img).astype(np.uint16), 65535
        if mode == "I":
            arr = np.asarray(img)
            if arr.min() >= 0 and arr.max() <= 65535:
                return arr.astype(np.uint16), 65535
    raise UnsupportedPixelFormat(f"{path}: PNG mode {mode} is not 8/16-bit grayscale")


def read_raw_image(path):
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such file: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(8)
    if magic[:2] == b"P5":
        return read_pgm(path)
    if magic == b"\x89PNG\r\n\x1a\n":
        return _read_png(path)
    raise UnsupportedPixelFormat(f"{path}: unrecognized image format")


def load_image(path):
    """Grayscale image scaled to [0, 1] by its type maximum."""
    raw, maxval = read_raw_image(path)
    return raw.astype(np.float64) / maxval


def load_frame(path):
    return Frame(load_image(path))


def quantize(field, bits=8):
    maxval = 255 if bits == 8 else 65535
    field = np.clip(np.asarray(field, dtype=np.float64), 0.0, 1.0)
    q = np.round(field * maxval)
    return q.astype(np.uint8 if bits == 8 else np.uint16)


def save_image(field, path, bits=8):
    """Write a [0, 1] scalar field as PGM, quantized by ``round(v * maxval)``."""
    if bits not in (8, 16):
        raise UnsupportedPixelFormat("bits must be 8 or 16")
    atomic_write_bytes(path, encode_pgm(quantize(field, bits)))


def save_rgb(rgb, path):
    """Write an ``(h, w, 3)`` uint8 image; PNG unless the suffix is ``.ppm``."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        h, w, _ = rgb.shape
        atomic_write_bytes(path, f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())
        return
    import io as _io

    from PIL import Image

    buf = _io.BytesIO()
    Image.fromarray(rgb, mode="RGB").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def load_rgb(path):
    from PIL import Image

    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such file: {path}")
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


# --- masks ------------------------------------------------------------------

def load_mask(path):
    raw, _ = read_raw_image(path)
    inside = raw > 0
    if not inside.any():
        raise EmptyMask(f"{path}: mask has no inside pixels")
    return BrainMask(inside)


def save_mask(mask, path):
    inside = mask.inside if isinstance(mask, BrainMask) else np.asarray(mask, dtype=bool)
    atomic_write_bytes(path, encode_pgm(np.where(inside, 255, 0).astype(np.uint8)))


# --- labels -----------------------------------------------------------------

def load_labels(path):
    data = read_json(path)
    if not isinstance(data, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in data):
        raise ParseError(f"{path}: label file must be a JSON integer array")
    if any(v not in tuple(PhaseLabel) for v in data):
        raise InvalidLabels(f"{path}: phase codes must be 0..3")
    return np.asarray(data, dtype=np.int64)


def save_labels(labels, path):
    write_json(path, [int(v) for v in labels])


# --- acquisitions -----------------------------------------------------------

_MANIFEST_KEYS = {"patient_id", "view", "stage", "frames", "reference_labels"}


def parse_manifest(data, source="manifest"):
    if not isinstance(data, dict):
        raise ParseError(f"{source}: manifest must be a JSON object")
    unknown = set(data) - _MANIFEST_KEYS
    if unknown:
        raise ParseError(f"{source}: unknown manifest keys {sorted(unknown)}")
    for key in ("patient_id", "view", "stage", "frames"):
        if key not in data:
            raise ParseError(f"{source}: missing key {key!r}")
    try:
        view = View(data["view"])
        stage = Stage(data["stage"])
    except ValueError as exc:
        raise ParseError(f"{source}: {exc}") from exc
    frames = data["frames"]
    if not isinstance(frames, list) or not frames:
        raise ParseError(f"{source}: 'frames' must be a non-empty list")
    for entry in frames:
        if not isinstance(entry, dict) or "file" not in entry:
            raise ParseError(f"{source}: every frame entry needs a 'file'")
    labels = data.get("reference_labels")
    if labels is not None:
        if not isinstance(labels, list) or len(labels) != len(frames):
            raise ParseError(f"{source}: reference_labels must match the frame count")
    return view, stage, frames, labels


def load_acquisition(manifest_path, with_labels=False):
    """Load the acquisition described by a JSON manifest.

    With ``with_labels=True`` returns ``(acquisition, reference_labels)``;
    the labels are ``None`` when the manifest has none.
    """
    manifest_path = Path(manifest_path)
    data = read_json(manifest_path)
    view, stage, entries, labels = parse_manifest(data, str(manifest_path))
    base = manifest_path.parent
    frames = []
    for entry in entries:
        fpath = base / entry["file"]
        if not fpath.is_file():
            raise MissingFile(f"{manifest_path}: missing frame file {entry['file']}")
        t = entry.get("t")
        frames.append(Frame(load_image(fpath), None if t is None else float(t)))
    acq = Acquisition(tuple(frames), view, stage, str(data["patient_id"]))
    if with_labels:
        return acq, None if labels is None else np.asarray(labels, dtype=np.int64)
    return acq


def save_acquisition(acq, out_dir, labels=None, bits=16, prefix="frame"):
    """Write frames as PGM plus ``manifest.json``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, frame in enumerate(acq.frames):
        name = f"{prefix}_{i:03d}.pgm"
        save_image(frame.pixels, out_dir / name, bits=bits)
        entries.append({"file": name, "t": frame.time_s})
    manifest = {
        "patient_id": acq.patient_id,
        "view": acq.view.value,
        "stage": acq.stage.value,
        "frames": entries,
    }
    if labels is not None:
        labels = [int(v) for v in labels]
        if len(labels) != len(acq.frames):
            raise InvalidLabels("labels must match the frame count")
        if not is_valid_sequence(labels):
            raise InvalidLabels("reference labels violate the phase transition rules")
        manifest["reference_labels"] = labels
    path = out_dir / "manifest.json"
    write_json(path, manifest)
    return path


# --- reports ----------------------------------------------------------------

def _clean_float(x):
    return float(round(float(x), 12))


def report_to_dict(report: ScoreReport):
    per_view = []
    for v in report.per_view:
        pre, post = v.boundaries_pre.to_dict(), v.boundaries_post.to_dict()
        per_view.append({
            "view": v.view.value,
            "auto_tici": _clean_float(v.auto_tici),
            "tdt_pre_pixels": int(v.tdt_pre_pixels),
            "reperfused_pixels": int(v.reperfused_pixels),
            "phase_boundaries": {k: {"pre": pre[k], "post": post[k]} for k in pre},
            "registration_mi": {k: _clean_float(x) for k, x in v.registration_mi.items()},
        })
    return {
        "patient_id": report.patient_id,
        "per_view": per_view,
        "combined_auto_tici": _clean_float(report.combined_auto_tici),
        "seed": int(report.seed),
    }


def save_report(report, path):
    write_json(path, report_to_dict(report))
