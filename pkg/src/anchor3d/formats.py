"""On-disk formats.

* volume files (``.vol``): one ASCII JSON header line, then the raw
  little-endian float32 intensities in C (row-major, ``[x, y, z]``) order.
  Header keys: ``format``, ``shape``, ``spacing``, ``seed``, ``dtype``.
* ground truths (JSON lines): one record per volume,
  ``{"volume_id", "voxel_spacing", "lesions": [{"box", "category"}]}``.
* detections (JSON lines): one record per detection,
  ``{"volume_id", "box", "score", "class_probs"}`` plus optional
  ``max_iou``; unknown keys are carried through unchanged.

Boxes are ``[cx, cy, cz, w, h, d]`` in voxels.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .assignment import Category, GroundTruth
from .geometry import Box3
from .inference import Detection

VOLUME_FORMAT = "anchor3d-volume/1"
_DET_KEYS = ("volume_id", "box", "score", "class_probs", "max_iou")


class FormatError(ValueError):
    """A file that does not parse or validate."""


def dumps_line(obj) -> str:
    """Compact single-line JSON used by every JSON-lines writer."""
    return json.dumps(obj, separators=(", ", ": "), allow_nan=False)


def write_volume(path, volume: np.ndarray, spacing, seed: Optional[int] = None) -> None:
    vol = np.ascontiguousarray(volume, dtype="<f4")
    header = {"format": VOLUME_FORMAT, "shape": list(vol.shape), "spacing": [float(s) for s in spacing],
              "seed": seed, "dtype": "<f4"}
    with open(path, "wb") as fh:
        fh.write((dumps_line(header) + "\n").encode("ascii"))
        fh.write(vol.tobytes(order="C"))


def read_volume(path) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("ascii"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: bad volume header: {exc}") from None
        if header.get("format") != VOLUME_FORMAT:
            raise FormatError(f"{path}: not a {VOLUME_FORMAT} file")
        shape = tuple(int(s) for s in header["shape"])
        body = fh.read()
    expected = int(np.prod(shape)) * 4
    if len(body) != expected:
        raise FormatError(f"{path}: expected {expected} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(shape).copy(), header


def _parse_box(value, where: str) -> Box3:
    if not isinstance(value, list) or len(value) != 6 or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise FormatError(f"{where}: box must be a list of 6 numbers")
    return Box3.from_list(value)


def _read_jsonl(path) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise FormatError(f"{path}:{lineno}: record must be a JSON object")
            yield lineno, rec


def gt_record(volume_id: str, gts, spacing) -> dict:
    return {
        "volume_id": volume_id,
        "voxel_spacing": [float(s) for s in spacing],
        "lesions": [{"box": g.box.to_list(), "category": g.category.name.lower()} for g in gts],
    }


def write_gts(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(dumps_line(rec) + "\n")


def read_gts(path) -> dict[str, tuple[list[GroundTruth], tuple]]:
    """``volume_id -> (ground truths, voxel spacing)`` in file order."""
    out = {}
    for lineno, rec in _read_jsonl(path):
        where = f"{path}:{lineno}"
        vid = rec.get("volume_id")
        if not isinstance(vid, str):
            raise FormatError(f"{where}: volume_id must be a string")
        if vid in out:
            raise FormatError(f"{where}: duplicate volume_id {vid!r}")
        gts = []
        for lesion in rec.get("lesions", []):
            try:
                gts.append(GroundTruth(_parse_box(lesion.get("box"), where),
                                       Category.parse(lesion.get("category"))))
            except (ValueError, TypeError) as exc:
                raise FormatError(f"{where}: {exc}") from None
        spacing = tuple(float(s) for s in rec.get("voxel_spacing", (1.0, 1.0, 1.0)))
        out[vid] = (gts, spacing)
    return out


def detection_record(volume_id: str, det: Detection) -> dict:
    rec = {"volume_id": volume_id, "box": det.box.to_list(), "score": det.score,
           "class_probs": list(det.class_probs) if det.class_probs is not None else None}
    if det.max_iou is not None:
        rec["max_iou"] = det.max_iou
    for k, v in det.extra.items():
        if k not in rec:
            rec[k] = v
    return rec


def parse_detection(rec: dict, where: str = "<record>") -> tuple[str, Detection]:
    vid = rec.get("volume_id")
    if not isinstance(vid, str):
        raise FormatError(f"{where}: volume_id must be a string")
    score = rec.get("score")
    if not isinstance(score, (int, float)) or isinstance(score, bool):
        raise FormatError(f"{where}: score must be a number")
    probs = rec.get("class_probs")
    if probs is not None and (not isinstance(probs, list) or len(probs) != 2):
        raise FormatError(f"{where}: class_probs must be a list of 2 numbers")
    extra = {k: v for k, v in rec.items() if k not in _DET_KEYS}
    try:
        det = Detection(_parse_box(rec.get("box"), where), score,
                        tuple(probs) if probs is not None else None,
                        max_iou=rec.get("max_iou"), extra=extra)
    except ValueError as exc:
        raise FormatError(f"{where}: {exc}") from None
    return vid, det


def write_detections(path, items: Iterable[tuple[str, Detection]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for vid, det in items:
            fh.write(dumps_line(detection_record(vid, det)) + "\n")


def read_detections(path) -> list[tuple[str, Detection]]:
    return [parse_detection(rec, f"{path}:{lineno}") for lineno, rec in _read_jsonl(path)]


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, allow_nan=False) + "\n", encoding="utf-8")


def read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:{exc.lineno}: {exc.msg}") from None
