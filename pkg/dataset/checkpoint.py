"""
Binary checkpoint

    magic b"BAGS", u32 version
    repeated sections: 4-byte tag, u64 payload length, payload

A payload is a JSON header (u64 length + UTF-8) followed by a u32 array count
and, per array: u16 name length + UTF-8 name, u8 dtype code, u8 ndim, u64 dims,
raw little-endian data. A run without the blur network has no BPN section.
"""
import io
import json
import logging
import os
import struct
from pathlib import Path
from typing import BinaryIO, Dict, Tuple

import numpy as np

from bags.errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"BAGS"
VERSION = 1

SECTION_TAGS = {
    "cloud": b"CLD\0",
    "bpn": b"BPN\0",
    "optimizer": b"OPT\0",
    "schedule": b"SCHD",
    "rng": b"RNG\0",
}
TAG_SECTIONS = {tag: name for name, tag in SECTION_TAGS.items()}
REQUIRED_SECTIONS = ("cloud", "optimizer", "schedule", "rng")

DTYPE_CODES = {
    np.dtype("<f8"): 0,
    np.dtype("<f4"): 1,
    np.dtype("<i8"): 2,
    np.dtype("<i4"): 3,
    np.dtype("u1"): 4,
    np.dtype("?"): 5,
}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}

Sections = Dict[str, Tuple[dict, Dict[str, np.ndarray]]]


def _encode_payload(meta: dict, arrays: Dict[str, np.ndarray]) -> bytes:
    out = io.BytesIO()
    header = json.dumps(meta, sort_keys=True).encode("utf-8")
    out.write(struct.pack("<Q", len(header)))
    out.write(header)
    out.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        array = np.asarray(arrays[name])
        dtype = array.dtype.newbyteorder("<") if array.dtype.byteorder == ">" else array.dtype
        if dtype not in DTYPE_CODES:
            raise CheckpointError(f"array '{name}' has unsupported dtype {array.dtype}")
        encoded = name.encode("utf-8")
        out.write(struct.pack("<H", len(encoded)))
        out.write(encoded)
        out.write(struct.pack("<BB", DTYPE_CODES[dtype], array.ndim))
        out.write(struct.pack(f"<{array.ndim}Q", *array.shape))
        out.write(np.ascontiguousarray(array, dtype=dtype).tobytes())
    return out.getvalue()


def _read_exact(stream: BinaryIO, n: int, what: str) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def _decode_payload(payload: bytes, section: str) -> Tuple[dict, Dict[str, np.ndarray]]:
    stream = io.BytesIO(payload)
    (size,) = struct.unpack("<Q", _read_exact(stream, 8, f"{section} header"))
    try:
        meta = json.loads(_read_exact(stream, size, f"{section} header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"section {section}: corrupt header ({e})") from None
    (count,) = struct.unpack("<I", _read_exact(stream, 4, f"{section} array count"))
    arrays = {}
    for _ in range(count):
        (length,) = struct.unpack("<H", _read_exact(stream, 2, f"{section} array name"))
        name = _read_exact(stream, length, f"{section} array name").decode("utf-8")
        code, ndim = struct.unpack("<BB", _read_exact(stream, 2, f"{section}/{name} dtype"))
        if code not in CODE_DTYPES:
            raise CheckpointError(f"section {section}: array '{name}' has unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}Q", _read_exact(stream, 8 * ndim, f"{section}/{name} shape"))
        dtype = CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        data = _read_exact(stream, nbytes, f"{section}/{name} data")
        arrays[name] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
    return meta, arrays


class CheckpointStore:
    """Reads and writes checkpoint files made of named sections"""

    def __init__(self, path):
        self.path = Path(path)

    def exists(self) -> bool:
        return self.path.exists()

    def save(self, sections: Sections) -> None:
        missing = [name for name in REQUIRED_SECTIONS if name not in sections]
        if missing:
            raise CheckpointError(f"cannot save checkpoint without section(s): {', '.join(missing)}")
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_name(self.path.name + ".tmp")
        with open(tmp, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", VERSION))
            for name, tag in SECTION_TAGS.items():
                if name not in sections:
                    continue
                meta, arrays = sections[name]
                payload = _encode_payload(meta, arrays)
                f.write(tag)
                f.write(struct.pack("<Q", len(payload)))
                f.write(payload)
        os.replace(tmp, self.path)
        logger.info("Checkpoint written to %s", self.path)

    def load(self) -> Sections:
        if not self.path.exists():
            raise CheckpointError(f"{self.path}: checkpoint not found")
        sections: Sections = {}
        with open(self.path, "rb") as f:
            if f.read(4) != MAGIC:
                raise CheckpointError(f"{self.path}: not a checkpoint (bad magic)")
            (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
            if version != VERSION:
                raise CheckpointError(f"{self.path}: unsupported checkpoint version {version}")
            while True:
                tag = f.read(4)
                if not tag:
                    break
                if len(tag) != 4 or tag not in TAG_SECTIONS:
                    raise CheckpointError(f"{self.path}: unknown section tag {tag!r}")
                (length,) = struct.unpack("<Q", _read_exact(f, 8, "section length"))
                name = TAG_SECTIONS[tag]
                sections[name] = _decode_payload(_read_exact(f, length, f"section {name}"), name)
        missing = [name for name in REQUIRED_SECTIONS if name not in sections]
        if missing:
            raise CheckpointError(f"{self.path}: missing section(s) {', '.join(missing)}")
        return sections

    def has_section(self, name: str) -> bool:
        return name in self.load()
