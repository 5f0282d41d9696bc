"""Writer for the .mosf feature container consumed by the MOS toolkit.

The layout is the exchange contract and must stay bit-exact:

  magic     4s   b"MOSF"
  version   u16  1
  kind      u8   0=MFCC, 1=XLSR, 2=OTHER
  frames    u32
  channels  u32
  stride    u32  frame stride in microseconds
  payload        frames*channels float32, row-major (time-major)
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MOSF"
VERSION = 1
KIND_XLSR = 1
_HEADER = struct.Struct("<4sHBIII")


def write_feature_file(
    path: str | Path,
    data: np.ndarray,
    frame_stride_s: float,
    kind: int = KIND_XLSR,
) -> None:
    """Atomic write: temp file in the target directory, then rename."""
    data = np.ascontiguousarray(data, dtype="<f4")
    if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
        raise ValueError(f"feature matrix must be non-empty 2-D, got {data.shape}")
    if not np.all(np.isfinite(data)):
        raise ValueError("feature matrix contains non-finite values")
    stride_us = round(frame_stride_s * 1e6)
    header = _HEADER.pack(MAGIC, VERSION, kind, data.shape[0], data.shape[1], stride_us)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())
    os.replace(tmp, path)
