"""On-disk formats: binary tensors, run configs, CSV columns and PGM heatmaps.

Tensor files ("CT1") are little-endian::

    magic    4 bytes   b"CT1\\0"
    ndim     uint32
    dims     ndim x uint32, all > 0
    payload  prod(dims) x float32, row-major

Computation is float64; values are rounded to float32 on write and upcast
on read.
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import CcraError, ConfigError
from .pipeline import CcraConfig

MAGIC = b"CT1\0"
CONFIG_KEYS = ("L", "N", "d", "T", "d_hidden", "d_llm", "V", "k", "sigma", "seed", "variant")
_INT_KEYS = {"L", "N", "d", "T", "d_hidden", "d_llm", "V", "k", "seed"}


class TensorFileError(CcraError, OSError):
    pass


def atomic_write(path, data: bytes):
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        _discard(tmp)
        raise


def _discard(tmp):
    try:
        os.unlink(tmp)
    except FileNotFoundError:
        pass


# -------------------------------------------------------------- tensor files


def encode_tensor(array) -> bytes:
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.size == 0:
        raise TensorFileError("cannot encode an empty tensor")
    header = MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise TensorFileError("not a CT1 tensor file (bad magic)")
    (ndim,) = struct.unpack_from("<I", blob, 4)
    head = 8 + 4 * ndim
    if ndim == 0 or len(blob) < head:
        raise TensorFileError(f"truncated or invalid header (ndim={ndim})")
    dims = struct.unpack_from(f"<{ndim}I", blob, 8)
    if any(x == 0 for x in dims):
        raise TensorFileError(f"zero extent in dims {dims}")
    count = math.prod(dims)
    if len(blob) - head != 4 * count:
        raise TensorFileError(f"payload has {len(blob) - head} bytes, dims {dims} need {4 * count}")
    return np.frombuffer(blob, dtype="<f4", offset=head).astype(np.float64).reshape(dims)


def write_tensor(path, array):
    atomic_write(path, encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise TensorFileError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        return decode_tensor(blob)
    except TensorFileError as exc:
        raise TensorFileError(f"{path}: {exc}") from None


# --------------------------------------------------------------- run config


def parse_config(text: str, seed: int | None = None) -> CcraConfig:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped.

    ``seed`` (if given) replaces whatever the file says.
    """
    values: dict[str, object] = {}
    lines: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            if key in _INT_KEYS:
                values[key] = int(value)
            elif key == "sigma":
                values[key] = None if value.lower() in ("", "auto") else float(value)
            else:
                values[key] = value
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from None
        lines[key] = lineno
    if seed is not None:
        values["seed"] = seed
        lines.pop("seed", None)
    try:
        return CcraConfig(**values)
    except ConfigError as exc:
        key = str(exc).split(" ", 1)[0].split("=", 1)[0]
        if key in lines:
            raise ConfigError(f"line {lines[key]}: {exc}") from None
        raise


def format_config(cfg: CcraConfig) -> str:
    out = []
    for key in CONFIG_KEYS:
        value = getattr(cfg, key)
        out.append(f"{key}={'auto' if value is None else value}")
    return "\n".join(out) + "\n"


def load_config(path=None, seed: int | None = None, env=None) -> CcraConfig:
    """Config from ``path`` (defaults if None). Seed precedence: argument > CCRA_SEED > file."""
    env = os.environ if env is None else env
    if seed is None and env.get("CCRA_SEED", "").strip():
        try:
            seed = int(env["CCRA_SEED"])
        except ValueError:
            raise ConfigError(f"CCRA_SEED is not an integer: {env['CCRA_SEED']!r}") from None
    if path is None:
        return parse_config("", seed=seed)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, seed=seed)


# ----------------------------------------------------------- CSV and heatmap


def format_columns(header, columns) -> bytes:
    cols = [np.asarray(c, dtype=np.float64).reshape(-1) for c in columns]
    rows = [",".join(header)]
    for i in range(len(cols[0])):
        rows.append(",".join([str(i)] + [repr(float(c[i])) for c in cols]))
    return ("\n".join(rows) + "\n").encode()


def read_columns(path) -> dict[str, np.ndarray]:
    lines = Path(path).read_text().strip().splitlines()
    header = lines[0].split(",")
    body = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]])
    return {name: body[:, j] for j, name in enumerate(header)}


def square_grid(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    side = math.isqrt(v.size)
    if side * side != v.size:
        raise TensorFileError(f"map of {v.size} patches is not a square grid; shape cannot be {v.size}")
    return v.reshape(side, side)


def to_gray8(grid) -> np.ndarray:
    """Min-max scale to 0..255 (round half up); constant maps become 128."""
    g = np.asarray(grid, dtype=np.float64)
    lo, hi = g.min(), g.max()
    if hi == lo:
        return np.full(g.shape, 128, dtype=np.uint8)
    return np.floor((g - lo) / (hi - lo) * 255.0 + 0.5).astype(np.uint8)


def encode_pgm(grid) -> bytes:
    pixels = to_gray8(grid)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes()


def decode_pgm(blob: bytes) -> np.ndarray:
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5" or parts[2] != b"255":
        raise TensorFileError("not an 8-bit binary PGM")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def encode_grid_csv(grid) -> bytes:
    return ("\n".join(",".join(repr(float(x)) for x in row) for row in grid) + "\n").encode()
