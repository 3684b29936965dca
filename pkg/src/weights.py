"""
OCLW1 weight files.

    OCLW1\n
    tensors=<n>\n
    <name> <d1>x<d2>... <offset>\n     (n lines; offset in bytes from the payload start)
    <payload: little-endian float64>

A 0-d tensor is written with shape "-".
"""

import os
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np
import pandas as pd

from encoder import EncoderParams, init_encoder, load_named_tensors
from errors import ConfigError, FormatError
from ndgrad import Tensor

MAGIC = b"OCLW1"
PAYLOAD_DTYPE = np.dtype("<f8")


def _shape_text(shape) -> str:
    return "x".join(str(d) for d in shape) if len(shape) else "-"


def write_weights(path: str, tensors: Dict[str, Tensor]) -> None:
    lines = [MAGIC.decode(), f"tensors={len(tensors)}"]
    offset = 0
    for name, tensor in tensors.items():
        if not name or any(ch.isspace() for ch in name):
            raise FormatError(f"tensor name '{name}' must be nonempty and contain no whitespace", offset=0)
        lines.append(f"{name} {_shape_text(tensor.data.shape)} {offset}")
        offset += tensor.data.size * PAYLOAD_DTYPE.itemsize
    header = ("\n".join(lines) + "\n").encode("ascii")
    payload = b"".join(np.ascontiguousarray(t.data, dtype=PAYLOAD_DTYPE).tobytes() for t in tensors.values())
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header + payload)


def _next_line(raw: bytes, pos: int) -> Tuple[str, int]:
    end = raw.find(b"\n", pos)
    if end < 0:
        raise FormatError("header line is not terminated", offset=pos)
    try:
        return raw[pos:end].decode("ascii"), end + 1
    except UnicodeDecodeError:
        raise FormatError("header is not ASCII", offset=pos) from None


def _parse_header(raw: bytes) -> Tuple[List[Tuple[str, Tuple[int, ...], int]], int]:
    """Table entries (name, shape, payload offset) and the absolute payload start"""
    if not raw.startswith(MAGIC + b"\n"):
        raise FormatError(f"bad magic {raw[:len(MAGIC)]!r}, expected {MAGIC!r}", offset=0)
    pos = len(MAGIC) + 1
    count_line, after = _next_line(raw, pos)
    if not count_line.startswith("tensors=") or not count_line[len("tensors="):].isdigit():
        raise FormatError(f"expected 'tensors=<n>', got '{count_line}'", offset=pos)
    pos = after
    entries = []
    seen = set()
    for _ in range(int(count_line[len("tensors="):])):
        line, after = _next_line(raw, pos)
        parts = line.split(" ")
        if len(parts) != 3:
            raise FormatError(f"expected '<name> <shape> <offset>', got '{line}'", offset=pos)
        name, shape_text, offset_text = parts
        if name in seen:
            raise FormatError(f"tensor '{name}' listed twice", offset=pos)
        try:
            shape = () if shape_text == "-" else tuple(int(d) for d in shape_text.split("x"))
            offset = int(offset_text)
        except ValueError:
            raise FormatError(f"unreadable shape or offset in '{line}'", offset=pos) from None
        if offset < 0 or any(d < 0 for d in shape):
            raise FormatError(f"negative shape or offset in '{line}'", offset=pos)
        seen.add(name)
        entries.append((name, shape, offset))
        pos = after
    return entries, pos


@dataclass
class WeightFile:
    """Parsed OCLW1 header plus the raw bytes it indexes"""
    raw: bytes
    entries: List[Tuple[str, Tuple[int, ...], int]]
    payload_start: int

    @property
    def payload_len(self) -> int:
        return len(self.raw) - self.payload_start

    def extent(self, name: str, shape: Tuple[int, ...], offset: int) -> int:
        """Byte length of one tensor; raises when it lies outside the payload"""
        nbytes = int(np.prod(shape, dtype=np.int64)) * PAYLOAD_DTYPE.itemsize
        if offset % PAYLOAD_DTYPE.itemsize or offset + nbytes > self.payload_len:
            raise FormatError(f"tensor '{name}' at offset {offset} ({nbytes} bytes) lies outside the payload",
                              offset=self.payload_start + offset)
        return nbytes


def open_weights(path: str) -> WeightFile:
    with open(path, "rb") as f:
        raw = f.read()
    entries, start = _parse_header(raw)
    return WeightFile(raw, entries, start)


def read_weights(path: str) -> Dict[str, Tensor]:
    wf = open_weights(path)
    tensors = {}
    for name, shape, offset in wf.entries:
        nbytes = wf.extent(name, shape, offset)
        start = wf.payload_start + offset
        values = np.frombuffer(wf.raw, dtype=PAYLOAD_DTYPE, count=nbytes // PAYLOAD_DTYPE.itemsize, offset=start)
        values = values.astype(np.float64).reshape(shape)
        if not np.all(np.isfinite(values)):
            raise FormatError(f"tensor '{name}' holds non-finite values", offset=start)
        tensors[name] = Tensor(values)
    return tensors


def inspect_weights(path: str) -> pd.DataFrame:
    """Name/shape/offset table of a weight file; the payload is bounds-checked, not decoded"""
    wf = open_weights(path)
    rows = []
    for name, shape, offset in wf.entries:
        wf.extent(name, shape, offset)
        rows.append({"name": name, "shape": _shape_text(shape), "offset": offset,
                     "numel": int(np.prod(shape, dtype=np.int64))})
    return pd.DataFrame(rows, columns=["name", "shape", "offset", "numel"])


def save_encoder(path: str, params: EncoderParams) -> None:
    write_weights(path, params.named_tensors())


def load_encoder(cfg) -> EncoderParams:
    """Random backbone from cfg.encoder, overridden by cfg.weights_path when set"""
    params = init_encoder(cfg.encoder)
    if cfg.weights_path:
        if not os.path.exists(cfg.weights_path):
            raise ConfigError(f"file not found: {cfg.weights_path}", key="weights_path")
        load_named_tensors(params, read_weights(cfg.weights_path))
    return params
