"""Run a frozen pre-trained wav2vec2-family model over WAV clips and write
hidden-state sequences as .mosf feature files.

Audio is resampled to 16 kHz mono, normalized to zero mean / unit variance
per clip (the wav2vec2 input convention), and processed in inference mode.
No model parameter is ever updated. The hidden layer is selectable; the
default is the final transformer layer.

Long clips can be chunked to bound memory: chunk boundaries are aligned to
the 320-sample encoder stride and each chunk's input is extended to the
400-sample receptive field, so every convolutional frame sees its full
context and concatenation is overlap-free with exact frame alignment.
Attention context is per-chunk, which is the documented approximation; the
default processes each clip whole.
"""

from __future__ import annotations

import concurrent.futures
import csv
import math
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal

from .featfmt import KIND_XLSR, write_feature_file

TARGET_RATE = 16000
DEFAULT_MODEL = "facebook/wav2vec2-xls-r-300m"

MANIFEST_FIELDS = ("id", "source", "corpus", "mos_raw", "duration_s")


class ExportError(Exception):
    pass


@dataclass(frozen=True)
class ExportSpec:
    manifest: Path
    out_dir: Path
    model_id: str = DEFAULT_MODEL
    layer: int | None = None  # None: final hidden layer
    jobs: int = 1
    chunk_frames: int = 0  # 0: process clips whole
    normalize: bool = True


def read_manifest_rows(path: Path) -> list[dict[str, str]]:
    if not path.exists():
        raise ExportError(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(
            f not in reader.fieldnames for f in MANIFEST_FIELDS[:4]
        ):
            raise ExportError(f"{path}: expected columns {MANIFEST_FIELDS[:4]}")
        rows = list(reader)
    seen = set()
    for row in rows:
        if row["id"] in seen:
            raise ExportError(f"{path}: duplicate clip id {row['id']!r}")
        seen.add(row["id"])
    return rows


def load_audio(path: Path) -> np.ndarray:
    """WAV of any rate/channel count -> 16 kHz mono float32."""
    try:
        rate, data = scipy.io.wavfile.read(path)
    except FileNotFoundError:
        raise ExportError(f"audio file not found: {path}") from None
    except ValueError as exc:
        raise ExportError(f"cannot decode {path}: {exc}") from None
    if data.dtype == np.int16:
        wave = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        wave = data.astype(np.float32) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        wave = data.astype(np.float32)
    else:
        raise ExportError(f"{path}: unsupported sample format {data.dtype}")
    if wave.ndim == 2:
        wave = wave.mean(axis=1)
    if rate != TARGET_RATE:
        g = math.gcd(rate, TARGET_RATE)
        wave = scipy.signal.resample_poly(wave, TARGET_RATE // g, rate // g).astype(np.float32)
    return wave


def load_model(model_id: str):
    import torch
    from transformers import Wav2Vec2Model

    model = Wav2Vec2Model.from_pretrained(model_id)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    torch.set_grad_enabled(False)
    return model


def encoder_geometry(model) -> tuple[int, int]:
    """(stride, receptive field) of the conv feature encoder, in samples."""
    stride = 1
    receptive = 1
    for k, s in zip(model.config.conv_kernel, model.config.conv_stride):
        receptive += (k - 1) * stride
        stride *= s
    return stride, receptive


def resolve_layer(model, layer: int | None) -> int:
    depth = model.config.num_hidden_layers
    if layer is None:
        return depth  # hidden_states[depth] is the final transformer layer
    if not (0 <= layer <= depth):
        raise ExportError(f"layer {layer} outside model depth 0..{depth}")
    return layer


def extract_hidden_states(
    model, wave: np.ndarray, layer: int | None = None,
    chunk_frames: int = 0, normalize: bool = True,
) -> np.ndarray:
    """(frames x hidden) float32 hidden states for one 16 kHz waveform."""
    import torch

    stride, receptive = encoder_geometry(model)
    layer_index = resolve_layer(model, layer)
    if len(wave) < receptive:
        raise ExportError(f"clip too short: {len(wave)} samples < receptive field {receptive}")
    if normalize:
        wave = (wave - wave.mean()) / np.sqrt(wave.var() + 1e-7)
    total_frames = int(model._get_feat_extract_output_lengths(len(wave)))

    def run(segment: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            out = model(
                torch.from_numpy(np.ascontiguousarray(segment, dtype=np.float32))[None, :],
                output_hidden_states=True,
            )
        return out.hidden_states[layer_index][0].numpy().astype(np.float32)

    if chunk_frames <= 0 or total_frames <= chunk_frames:
        states = run(wave)
    else:
        pieces = []
        for first in range(0, total_frames, chunk_frames):
            last = min(first + chunk_frames, total_frames)  # frames [first, last)
            lo = first * stride
            hi = min((last - 1) * stride + receptive, len(wave))
            piece = run(wave[lo:hi])
            if piece.shape[0] != last - first:
                raise ExportError(
                    f"chunk [{first}, {last}) produced {piece.shape[0]} frames"
                )
            pieces.append(piece)
        states = np.concatenate(pieces, axis=0)
    if states.shape[0] != total_frames:
        raise ExportError(
            f"expected {total_frames} frames, model produced {states.shape[0]}"
        )
    return states


def run_export(spec: ExportSpec, model=None) -> Path:
    """Export every manifest clip; returns the path of the feature manifest."""
    rows = read_manifest_rows(Path(spec.manifest))
    out_dir = Path(spec.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if model is None:
        model = load_model(spec.model_id)
    stride, _ = encoder_geometry(model)
    stride_s = stride / TARGET_RATE
    layer_index = resolve_layer(model, spec.layer)
    infer_lock = threading.Lock()

    def one(row: dict[str, str]) -> tuple[str, Path]:
        clip_id = row["id"]
        try:
            wave = load_audio(Path(row["source"]))
            with infer_lock:  # single model instance; I/O stays parallel
                states = extract_hidden_states(
                    model, wave, spec.layer, spec.chunk_frames, spec.normalize
                )
            path = out_dir / f"{clip_id}.mosf"
            write_feature_file(path, states, stride_s, KIND_XLSR)
            return clip_id, path
        except ExportError as exc:
            raise ExportError(f"clip {clip_id!r}: {exc}") from None

    results: dict[str, Path] = {}
    if spec.jobs > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=spec.jobs) as pool:
            for clip_id, path in pool.map(one, rows):
                results[clip_id] = path
    else:
        for row in rows:
            clip_id, path = one(row)
            results[clip_id] = path

    manifest_path = out_dir / "features.csv"
    with open(manifest_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for row in rows:
            writer.writerow([
                row["id"], str(results[row["id"]]), row["corpus"],
                row["mos_raw"], row.get("duration_s", ""),
            ])
    (out_dir / "export.meta").write_text(
        f"model = {spec.model_id}\nlayer = {layer_index}\n"
        f"frame_stride_s = {stride_s}\nnormalize = {spec.normalize}\n",
        encoding="utf-8",
    )
    return manifest_path
