"""Named-array parameter container.

Layout: a UTF-8 text header, then the raw payload.

    ndarrays <count>
    <name> <rows> <cols>        (one line per array, sorted by name)
    end
    <payload>

The payload is each array's little-endian float64 data, row-major, in header
order.  Vectors are stored as (1, dim).  Round-trips are byte-exact.
"""

from __future__ import annotations

import numpy as np

_MAGIC = "ndarrays"


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    items = []
    for name in sorted(arrays):
        if " " in name or "\n" in name:
            raise ValueError(f"array name {name!r} may not contain whitespace")
        a = np.asarray(arrays[name], dtype=np.float64)
        if a.ndim == 1:
            a = a.reshape(1, -1)
        if a.ndim != 2:
            raise ValueError(f"{name}: only vectors and matrices are stored, got {a.shape}")
        items.append((name, a))

    with open(path, "wb") as f:
        header = [f"{_MAGIC} {len(items)}"]
        header += [f"{name} {a.shape[0]} {a.shape[1]}" for name, a in items]
        header.append("end\n")
        f.write("\n".join(header).encode("utf-8"))
        for _, a in items:
            f.write(np.ascontiguousarray(a).astype("<f8").tobytes())


def load_arrays(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()

    def next_line(pos):
        end = blob.index(b"\n", pos)
        return blob[pos:end].decode("utf-8"), end + 1

    line, pos = next_line(0)
    magic, count = line.split()
    if magic != _MAGIC:
        raise ValueError(f"not a parameter container: bad magic {magic!r}")
    shapes = []
    for _ in range(int(count)):
        line, pos = next_line(pos)
        name, rows, cols = line.split()
        shapes.append((name, int(rows), int(cols)))
    line, pos = next_line(pos)
    if line != "end":
        raise ValueError("malformed container header")

    out = {}
    for name, rows, cols in shapes:
        nbytes = rows * cols * 8
        raw = blob[pos : pos + nbytes]
        if len(raw) != nbytes:
            raise ValueError(f"truncated payload while reading {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f8").reshape(rows, cols).copy()
        pos += nbytes
    if pos != len(blob):
        raise ValueError("trailing bytes after final array")
    return out
