"""On-disk formats: signal traces, LDBP checkpoints and loss histories.

A trace is a pair of files: ``<stem>.json`` (header) and ``<stem>.bin``
holding little-endian float64 samples interleaved as
``x_re, x_im, y_re, y_im``. Symbol frames use the same layout at one sample
per symbol.
"""
from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .cdfir import FirFilter
from .ldbp import LdbpModel
from .signal import GENERATOR_NAME, DualPolSignal, SymbolFrame

FORMAT_VERSION = 1
TRACE_FIELDS = ("format_version", "n_samples", "sample_rate_hz", "baud_rate_hz",
                "launch_power_dbm", "seed", "generator", "constellation")


class TraceFormatError(ValueError):
    """Malformed or incompatible trace file."""


class SchemaError(TraceFormatError):
    pass


class LengthMismatchError(TraceFormatError):
    pass


class VersionMismatchError(TraceFormatError):
    pass


def _paths(stem) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    # append rather than replace: stems such as "p+2.50_t0" contain dots
    return stem.with_name(stem.name + ".json"), stem.with_name(stem.name + ".bin")


def _interleave(field: np.ndarray) -> np.ndarray:
    out = np.empty((field.shape[1], 4), dtype="<f8")
    out[:, 0] = field[0].real
    out[:, 1] = field[0].imag
    out[:, 2] = field[1].real
    out[:, 3] = field[1].imag
    return out


def _write(stem, field: np.ndarray, header: dict) -> Path:
    head, body = _paths(stem)
    head.parent.mkdir(parents=True, exist_ok=True)
    head.write_text(json.dumps(header, indent=2, sort_keys=True))
    _interleave(field).tofile(body)
    return head


def _read(stem) -> tuple[dict, np.ndarray]:
    head, body = _paths(stem)
    try:
        header = json.loads(head.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{head}: header is not valid JSON ({exc})") from exc
    missing = [k for k in TRACE_FIELDS if k not in header]
    if missing:
        raise SchemaError(f"{head}: header lacks field(s) {', '.join(missing)}")
    if header["format_version"] != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{head}: format version {header['format_version']}, expected {FORMAT_VERSION}")
    raw = np.fromfile(body, dtype="<f8")
    n = int(header["n_samples"])
    if raw.size != 4 * n:
        raise LengthMismatchError(
            f"{body}: payload holds {raw.size} values, header promises {4 * n}")
    raw = raw.reshape(n, 4)
    field = np.stack([raw[:, 0] + 1j * raw[:, 1], raw[:, 2] + 1j * raw[:, 3]])
    return header, field


def write_trace(stem, sig: DualPolSignal, baud_rate: float, seed=None,
                constellation: str | None = None, generator: str = GENERATOR_NAME,
                extra: dict | None = None) -> Path:
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "signal",
        "n_samples": sig.n_samples,
        "sample_rate_hz": sig.sample_rate,
        "baud_rate_hz": baud_rate,
        "launch_power_dbm": sig.launch_power_dbm,
        "seed": seed,
        "generator": generator,
        "constellation": constellation,
    }
    if extra:
        header.update(extra)
    return _write(stem, sig.field, header)


def read_trace(stem) -> tuple[DualPolSignal, dict]:
    header, field = _read(stem)
    sig = DualPolSignal(field, float(header["sample_rate_hz"]), header["launch_power_dbm"])
    return sig, header


def write_frame(stem, frame: SymbolFrame, launch_power_dbm=None, extra: dict | None = None) -> Path:
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "symbols",
        "n_samples": frame.symbols.shape[1],
        "sample_rate_hz": frame.baud_rate,
        "baud_rate_hz": frame.baud_rate,
        "launch_power_dbm": launch_power_dbm,
        "seed": frame.seed,
        "generator": frame.generator,
        "constellation": frame.constellation,
    }
    if extra:
        header.update(extra)
    return _write(stem, frame.symbols, header)


def read_frame(stem) -> tuple[SymbolFrame, dict]:
    header, field = _read(stem)
    frame = SymbolFrame(field, float(header["baud_rate_hz"]), header["constellation"],
                        header["seed"], header["generator"])
    return frame, header


def write_filter(stem, filt: FirFilter) -> Path:
    """FIR taps in the trace layout: one polarization pair per tap (y = x)."""
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "fir",
        "n_samples": filt.n_taps,
        "symmetric": filt.symmetric,
        "mask": filt.mask.astype(int).tolist(),
        "design": filt.meta,
    }
    return _write(stem, np.stack([filt.taps, filt.taps]), header)


def read_filter(stem) -> FirFilter:
    head, body = _paths(stem)
    try:
        header = json.loads(head.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{head}: header is not valid JSON ({exc})") from exc
    for key in ("format_version", "n_samples", "mask"):
        if key not in header:
            raise SchemaError(f"{head}: filter header lacks {key!r}")
    if header["format_version"] != FORMAT_VERSION:
        raise VersionMismatchError(f"{head}: unsupported filter version")
    raw = np.fromfile(body, dtype="<f8")
    n = int(header["n_samples"])
    if raw.size != 4 * n:
        raise LengthMismatchError(f"{body}: payload holds {raw.size} values, header promises {4 * n}")
    raw = raw.reshape(n, 4)
    return FirFilter(raw[:, 0] + 1j * raw[:, 1], bool(header.get("symmetric", True)),
                     np.array(header["mask"], dtype=bool), header.get("design", {}))


def write_operator_log(path, ops) -> Path:
    """JSON audit log of a recorded forward operator sequence."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"format_version": FORMAT_VERSION, "operators": list(ops)}, indent=1))
    return path


def read_operator_log(path) -> list[dict]:
    data = json.loads(Path(path).read_text())
    if data.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: unsupported operator log version")
    return data["operators"]


# ---------------------------------------------------------------------------
# Checkpoints

def save_checkpoint(stem, model: LdbpModel, config_hash: str | None = None,
                    schedule_position: int | None = None) -> Path:
    """JSON header with layer structure and masks, taps as raw float64."""
    head, body = _paths(stem)
    head.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "ldbp-checkpoint",
        "sample_rate_hz": model.sample_rate,
        "n_layers": model.n_layers,
        "tap_counts": [pair[0].n_taps for pair in model.layers],
        "masks": [[pair[0].mask.astype(int).tolist(), pair[1].mask.astype(int).tolist()]
                  for pair in model.layers],
        "nl_coeffs": model.nl_coeffs.tolist(),
        "layer_distance_km": None if model.layer_distance_km is None
        else np.asarray(model.layer_distance_km).tolist(),
        "quant_bits": model.quant_bits,
        "schedule_position": schedule_position,
        "config_hash": config_hash,
        "meta": model.meta,
    }
    taps = np.concatenate([np.concatenate([f.taps for f in pair]) for pair in model.layers])
    payload = np.empty(2 * taps.size, dtype="<f8")
    payload[0::2] = taps.real
    payload[1::2] = taps.imag
    head.write_text(json.dumps(header, indent=2))
    payload.tofile(body)
    return head


def load_checkpoint(stem) -> LdbpModel:
    head, body = _paths(stem)
    try:
        header = json.loads(head.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{head}: header is not valid JSON ({exc})") from exc
    for key in ("format_version", "tap_counts", "masks", "nl_coeffs", "sample_rate_hz"):
        if key not in header:
            raise SchemaError(f"{head}: checkpoint header lacks {key!r}")
    if header["format_version"] != FORMAT_VERSION:
        raise VersionMismatchError(f"{head}: unsupported checkpoint version")
    raw = np.fromfile(body, dtype="<f8")
    counts = header["tap_counts"]
    if raw.size != 2 * 2 * sum(counts):
        raise LengthMismatchError(f"{body}: tap payload size does not match header")
    taps = raw[0::2] + 1j * raw[1::2]
    layers, pos = [], 0
    for n, masks in zip(counts, header["masks"]):
        pair = []
        for m in masks:
            pair.append(FirFilter(taps[pos:pos + n].copy(), True, np.array(m, dtype=bool)))
            pos += n
        layers.append(tuple(pair))
    dist = header.get("layer_distance_km")
    return LdbpModel(layers, np.array(header["nl_coeffs"]), header["sample_rate_hz"],
                     None if dist is None else np.array(dist), header.get("quant_bits"),
                     header.get("meta", {}))


def write_history(path, history) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss", "power_dbm", "active_taps"])
        for h in history:
            w.writerow([h["iteration"], repr(h["loss"]), h["power_dbm"], h["active_taps"]])
    return path


def config_hash(obj) -> str:
    """Short SHA-256 of the canonical JSON form of ``obj``."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
