"""Binary container for feature matrices (.mosf).

Layout, little-endian:

  magic     4s   b"MOSF"
  version   u16  currently 1
  kind      u8   source kind (0=MFCC, 1=XLSR, 2=OTHER)
  frames    u32
  channels  u32
  stride    u32  frame stride in microseconds
  payload        frames*channels float32, row-major (time-major)

The format is the exchange boundary with external embedding exporters and
must stay bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"MOSF"
VERSION = 1
_HEADER = struct.Struct("<4sHBIII")
_U32_MAX = 0xFFFFFFFF


class FeatureFileError(DataError):
    pass


class SourceKind(IntEnum):
    MFCC = 0
    XLSR = 1
    OTHER = 2


@dataclass
class FeatureMatrix:
    """frames x channels real matrix, time-major, with frame-stride metadata."""

    data: np.ndarray
    frame_stride_s: float
    source_kind: SourceKind = SourceKind.OTHER

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise ValueError(f"feature matrix must be 2-D, got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"feature matrix must be non-empty, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature matrix contains non-finite values")
        if self.frame_stride_s <= 0:
            raise ValueError(f"frame_stride_s must be positive, got {self.frame_stride_s}")
        self.data = data
        self.source_kind = SourceKind(self.source_kind)

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]


def save_features(fm: FeatureMatrix, path: str | Path) -> None:
    if fm.frames > _U32_MAX or fm.channels > _U32_MAX:
        raise FeatureFileError(f"dimension overflow: {fm.frames} x {fm.channels}")
    stride_us = round(fm.frame_stride_s * 1e6)
    if not (0 < stride_us <= _U32_MAX):
        raise FeatureFileError(f"frame stride {fm.frame_stride_s}s not storable in u32 microseconds")
    header = _HEADER.pack(
        MAGIC, VERSION, int(fm.source_kind), fm.frames, fm.channels, stride_us
    )
    payload = np.ascontiguousarray(fm.data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load_features(path: str | Path) -> FeatureMatrix:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FeatureFileError(f"cannot read feature file {path}: {exc}") from None
    if len(raw) < _HEADER.size:
        raise FeatureFileError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, kind, frames, channels, stride_us = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FeatureFileError(f"{path}: magic-number mismatch ({magic!r})")
    if version != VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version}")
    try:
        source_kind = SourceKind(kind)
    except ValueError:
        raise FeatureFileError(f"{path}: unknown source kind {kind}") from None
    expected = _HEADER.size + frames * channels * 4
    if len(raw) != expected:
        raise FeatureFileError(
            f"{path}: truncated payload ({len(raw)} bytes, expected {expected})"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(frames, channels)
    try:
        return FeatureMatrix(
            data=data.copy(),
            frame_stride_s=stride_us / 1e6,
            source_kind=source_kind,
        )
    except ValueError as exc:
        raise FeatureFileError(f"{path}: {exc}") from None
