"""Minimal binary little-endian PLY reader/writer.

Supports scalar per-element properties and fixed-count list properties (the
``face`` element of triangle meshes), which covers splat clouds, point dumps
and meshes.
"""
from __future__ import annotations

import io

import numpy as np

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_NP_TO_PLY = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort",
              "i4": "int", "u4": "uint", "f4": "float", "f8": "double"}


class PlyError(ValueError):
    pass


class _Element:
    def __init__(self, name, count):
        self.name = name
        self.count = count
        self.props = []  # (name, dtype) or (name, (count_dtype, item_dtype))


def _parse_header(data: bytes):
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise PlyError("malformed header: missing 'ply' magic or 'end_header'")
    lines = data[:end].decode("ascii", errors="replace").split("\n")
    elements = []
    fmt = None
    for line in lines[1:]:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1] if len(parts) > 1 else None
        elif parts[0] == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise PlyError(f"malformed header: bad element line {line!r}")
            elements.append(_Element(parts[1], int(parts[2])))
        elif parts[0] == "property":
            if not elements:
                raise PlyError("malformed header: property before any element")
            el = elements[-1]
            try:
                if parts[1] == "list":
                    el.props.append((parts[4], (_PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]])))
                else:
                    el.props.append((parts[2], _PLY_TYPES[parts[1]]))
            except (KeyError, IndexError):
                raise PlyError(f"malformed header: bad property line {line!r}") from None
        else:
            raise PlyError(f"malformed header: unknown keyword {parts[0]!r}")
    if fmt != "binary_little_endian":
        raise PlyError(f"malformed header: unsupported format {fmt!r}")
    return elements, end + len(b"end_header\n")


def read_ply(data: bytes) -> dict[str, dict[str, np.ndarray]]:
    """Parse PLY bytes into ``{element: {property: array}}``.

    List properties come back as 2D arrays and must have a constant count.
    """
    elements, offset = _parse_header(data)
    out = {}
    for el in elements:
        if all(not isinstance(t, tuple) for _, t in el.props):
            dtype = np.dtype([(n, "<" + t) for n, t in el.props])
            nbytes = dtype.itemsize * el.count
            if offset + nbytes > len(data):
                raise PlyError(f"truncated {el.name} data: expected {el.count} records")
            rec = np.frombuffer(data, dtype=dtype, count=el.count, offset=offset)
            offset += nbytes
            out[el.name] = {n: rec[n].copy() for n, _ in el.props}
            continue
        if len(el.props) != 1:
            raise PlyError(f"element {el.name!r}: mixed list/scalar properties are not supported")
        name, (ctype, itype) = el.props[0]
        csize, isize = np.dtype(ctype).itemsize, np.dtype(itype).itemsize
        if el.count == 0:
            out[el.name] = {name: np.zeros((0, 3), dtype=itype)}
            continue
        if offset + csize > len(data):
            raise PlyError(f"truncated {el.name} data")
        first = int(np.frombuffer(data, dtype="<" + ctype, count=1, offset=offset)[0])
        dtype = np.dtype([("n", "<" + ctype), ("v", "<" + itype, (first,))])
        nbytes = dtype.itemsize * el.count
        if offset + nbytes > len(data):
            raise PlyError(f"truncated {el.name} data: expected {el.count} records")
        rec = np.frombuffer(data, dtype=dtype, count=el.count, offset=offset)
        if np.any(rec["n"] != first):
            raise PlyError(f"element {el.name!r}: variable-length lists are not supported")
        offset += nbytes
        out[el.name] = {name: rec["v"].copy()}
    return out


def write_ply(elements: dict[str, dict[str, np.ndarray]], comments: list[str] = ()) -> bytes:
    """Serialize ``{element: {property: array}}``; 2D integer arrays become lists."""
    header = ["ply", "format binary_little_endian 1.0"]
    header += [f"comment {c}" for c in comments]
    body = io.BytesIO()
    for ename, props in elements.items():
        arrays = {k: np.asarray(v) for k, v in props.items()}
        counts = {len(v) for v in arrays.values()}
        if len(counts) > 1:
            raise PlyError(f"element {ename!r}: properties have different lengths")
        count = counts.pop() if counts else 0
        header.append(f"element {ename} {count}")
        fields = []
        for pname, arr in arrays.items():
            if arr.ndim == 2:
                itype = arr.dtype.str[1:]
                header.append(f"property list uchar {_NP_TO_PLY[itype]} {pname}")
                fields.append(("n_" + pname, "<u1"))
                fields.append((pname, "<" + itype, (arr.shape[1],)))
            else:
                t = arr.dtype.str[1:]
                if t not in _NP_TO_PLY:
                    raise PlyError(f"unsupported dtype {arr.dtype} for property {pname!r}")
                header.append(f"property {_NP_TO_PLY[t]} {pname}")
                fields.append((pname, "<" + t))
        rec = np.zeros(count, dtype=np.dtype(fields))
        for pname, arr in arrays.items():
            if arr.ndim == 2:
                rec["n_" + pname] = arr.shape[1]
            rec[pname] = arr
        body.write(rec.tobytes())
    header.append("end_header")
    return ("\n".join(header) + "\n").encode("ascii") + body.getvalue()
