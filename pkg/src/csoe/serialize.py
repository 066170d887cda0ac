"""Binary container shared by sinograms, maps, sensing matrices and models.

Layout: one line of compact UTF-8 JSON (the header) terminated by ``\\n``,
followed by the payload. The header lists named sections; each section is
a row-major little-endian float64 array stored at ``offset`` bytes from the
start of the payload, with its SHA-256 digest. ``head -1 FILE`` prints the
header.
"""

import hashlib
import json
import os
import tempfile

import numpy as np

from .errors import ParseError

FORMAT_VERSION = 1
_DTYPE = np.dtype("<f8")


def atomic_write_bytes(path, data):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def dumps_json(obj):
    """Canonical JSON: sorted keys, no whitespace, so output is byte-stable."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def encode_container(header, arrays):
    sections = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes(order="C")
        sections.append({
            "name": name,
            "shape": list(np.shape(arr)),
            "offset": offset,
            "nbytes": len(raw),
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
        chunks.append(raw)
        offset += len(raw)
    full = dict(header)
    full["format_version"] = FORMAT_VERSION
    full["sections"] = sections
    head = dumps_json(full).encode("utf-8") + b"\n"
    return head + b"".join(chunks)


def decode_container(data, source="<bytes>", verify=True):
    nl = data.find(b"\n")
    if nl < 0:
        raise ParseError(f"{source}: missing header line")
    try:
        header = json.loads(data[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{source}: malformed header: {exc}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise ParseError(f"{source}: unsupported format_version "
                         f"{header.get('format_version')!r}")
    payload = data[nl + 1:]
    arrays = {}
    for sec in header.get("sections", []):
        start, stop = sec["offset"], sec["offset"] + sec["nbytes"]
        if stop > len(payload):
            raise ParseError(f"{source}: section {sec['name']!r} truncated")
        raw = payload[start:stop]
        if verify and hashlib.sha256(raw).hexdigest() != sec["sha256"]:
            raise ParseError(f"{source}: section {sec['name']!r} hash mismatch")
        arr = np.frombuffer(raw, dtype=_DTYPE).reshape(sec["shape"])
        arrays[sec["name"]] = arr.astype(np.float64)
    return header, arrays


def write_container(path, header, arrays):
    atomic_write_bytes(path, encode_container(header, arrays))


def read_container(path, verify=True):
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror}") from None
    return decode_container(data, source=path, verify=verify)
