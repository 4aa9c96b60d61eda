"""Reader and writer for the ``avrnn-ckpt v1`` named-tensor container.

Layout::

    avrnn-ckpt v1
    meta <key> <value>            (zero or more)
    tensor <name> <tag> <d1>x<d2>x...
    ...
    end
    <payload>

The payload is the concatenation of every tensor's values, in header order,
as little-endian IEEE-754 float64 in row-major order.  Names, tags, meta keys
and meta values must not contain whitespace.
"""

from __future__ import annotations

from typing import Dict, List, Mapping, NamedTuple, Optional, Tuple

import numpy as np

from .nn import ParameterStore

MAGIC = "avrnn-ckpt v1"


class CheckpointError(ValueError):
    pass


class CheckpointEntry(NamedTuple):
    name: str
    tag: str
    array: np.ndarray


def _token(s: str, what: str) -> str:
    s = str(s)
    if not s or any(ch.isspace() for ch in s):
        raise CheckpointError(f"{what} {s!r} is empty or contains whitespace")
    return s


def write_checkpoint(path, entries: List[CheckpointEntry], meta: Optional[Mapping[str, str]] = None) -> None:
    lines = [MAGIC]
    for k, v in (meta or {}).items():
        lines.append(f"meta {_token(k, 'meta key')} {_token(v, 'meta value')}")
    for e in entries:
        shape = "x".join(str(d) for d in e.array.shape)
        if not shape:
            raise CheckpointError(f"tensor {e.name!r} is a scalar; only arrays are stored")
        lines.append(f"tensor {_token(e.name, 'name')} {_token(e.tag, 'tag')} {shape}")
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        for e in entries:
            fh.write(np.ascontiguousarray(e.array, dtype="<f8").tobytes())


def read_checkpoint(path) -> Tuple[Dict[str, str], List[CheckpointEntry]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    pos = 0
    meta: Dict[str, str] = {}
    specs = []

    def next_line():
        nonlocal pos
        end = raw.find(b"\n", pos)
        if end < 0:
            raise CheckpointError("truncated header")
        line = raw[pos:end].decode("ascii", errors="replace")
        pos = end + 1
        return line

    if next_line() != MAGIC:
        raise CheckpointError(f"not an {MAGIC} file")
    while True:
        parts = next_line().split()
        if parts == ["end"]:
            break
        if len(parts) == 3 and parts[0] == "meta":
            meta[parts[1]] = parts[2]
        elif len(parts) == 4 and parts[0] == "tensor":
            try:
                shape = tuple(int(d) for d in parts[3].split("x"))
            except ValueError:
                raise CheckpointError(f"bad shape {parts[3]!r}") from None
            specs.append((parts[1], parts[2], shape))
        else:
            raise CheckpointError(f"malformed header line {' '.join(parts)!r}")
    entries = []
    for name, tag, shape in specs:
        n = int(np.prod(shape))
        nbytes = 8 * n
        if pos + nbytes > len(raw):
            raise CheckpointError(f"payload truncated in tensor {name!r}")
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
        pos += nbytes
        entries.append(CheckpointEntry(name, tag, arr))
    if pos != len(raw):
        raise CheckpointError("trailing bytes after payload")
    return meta, entries


def save_store(path, store: ParameterStore, meta: Optional[Mapping[str, str]] = None) -> None:
    entries = [CheckpointEntry(n, store.tag_of(n), store[n].data) for n in store]
    write_checkpoint(path, entries, meta)


def load_store(path, store: ParameterStore) -> Dict[str, str]:
    """Fill ``store`` from a checkpoint; names, tags and shapes must match exactly."""
    meta, entries = read_checkpoint(path)
    for e in entries:
        if e.name in store and store.tag_of(e.name) != e.tag:
            raise CheckpointError(f"tag mismatch for {e.name!r}: {e.tag} vs {store.tag_of(e.name)}")
    try:
        store.load_arrays({e.name: e.array for e in entries})
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None
    return meta
