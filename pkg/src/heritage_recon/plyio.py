"""Binary little-endian PLY reading and writing.

Scalar properties are read in one ``np.frombuffer`` call per element.
Elements carrying list properties are read with a fixed-stride fast path when
every list has the same length, and row by row otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


class PlyFormatError(ValueError):
    pass


@dataclass
class PlyProperty:
    name: str
    dtype: str  # numpy code without byte order, e.g. "f4"
    count_dtype: str | None = None  # set for list properties

    @property
    def is_list(self) -> bool:
        return self.count_dtype is not None


@dataclass
class PlyElement:
    name: str
    count: int
    properties: list[PlyProperty] = field(default_factory=list)


def _parse_header(fh) -> tuple[list[PlyElement], str]:
    if fh.readline().strip() != b"ply":
        raise PlyFormatError("missing 'ply' magic")
    elements: list[PlyElement] = []
    fmt = None
    while True:
        line = fh.readline()
        if not line:
            raise PlyFormatError("unterminated header")
        parts = line.decode("ascii", "replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append(PlyElement(parts[1], int(parts[2])))
        elif parts[0] == "property":
            if not elements:
                raise PlyFormatError("property before element")
            if parts[1] == "list":
                elements[-1].properties.append(
                    PlyProperty(parts[4], PLY_TYPES[parts[3]], PLY_TYPES[parts[2]]))
            else:
                elements[-1].properties.append(PlyProperty(parts[2], PLY_TYPES[parts[1]]))
        elif parts[0] == "end_header":
            break
    if fmt != "binary_little_endian":
        raise PlyFormatError(f"unsupported PLY format {fmt!r}; only binary_little_endian is read")
    return elements, fmt


def read_ply(path) -> dict[str, dict[str, object]]:
    """Return ``{element: {property: array or list of arrays}}``."""
    with open(path, "rb") as fh:
        elements, _ = _parse_header(fh)
        buf = fh.read()
    pos = 0
    out: dict[str, dict[str, object]] = {}
    for el in elements:
        props = el.properties
        if not any(p.is_list for p in props):
            dt = np.dtype([(p.name, "<" + p.dtype) for p in props])
            arr = np.frombuffer(buf, dtype=dt, count=el.count, offset=pos)
            pos += dt.itemsize * el.count
            out[el.name] = {p.name: arr[p.name].copy() for p in props}
            continue
        data, pos = _read_list_element(buf, pos, el)
        out[el.name] = data
    return out


def _read_list_element(buf: bytes, pos: int, el: PlyElement):
    props = el.properties
    n_list = sum(p.is_list for p in props)
    # fast path: a single list property whose lengths are all equal
    if n_list == 1 and el.count > 0:
        dt_head = []
        for p in props:
            if p.is_list:
                break
            dt_head.append((p.name, "<" + p.dtype))
        lp = next(p for p in props if p.is_list)
        tail = props[props.index(lp) + 1:]
        if not tail:
            head_size = np.dtype(dt_head).itemsize if dt_head else 0
            first_len = int(np.frombuffer(buf, "<" + lp.count_dtype, 1, pos + head_size)[0])
            dt = np.dtype(dt_head + [("__n", "<" + lp.count_dtype),
                                     ("__v", "<" + lp.dtype, (first_len,))])
            if pos + dt.itemsize * el.count <= len(buf):
                arr = np.frombuffer(buf, dtype=dt, count=el.count, offset=pos)
                if np.all(arr["__n"] == first_len):
                    res = {name: arr[name].copy() for name, _ in dt_head}
                    res[lp.name] = arr["__v"].copy()
                    return res, pos + dt.itemsize * el.count
    cols: dict[str, list] = {p.name: [] for p in props}
    for _ in range(el.count):
        for p in props:
            if p.is_list:
                cdt = np.dtype("<" + p.count_dtype)
                n = int(np.frombuffer(buf, cdt, 1, pos)[0])
                pos += cdt.itemsize
                vdt = np.dtype("<" + p.dtype)
                cols[p.name].append(np.frombuffer(buf, vdt, n, pos).copy())
                pos += vdt.itemsize * n
            else:
                vdt = np.dtype("<" + p.dtype)
                cols[p.name].append(np.frombuffer(buf, vdt, 1, pos)[0])
                pos += vdt.itemsize
    res = {}
    for p in props:
        res[p.name] = cols[p.name] if p.is_list else np.asarray(cols[p.name], dtype="<" + p.dtype)
    return res, pos


def write_ply(path, elements: list[tuple[str, list[tuple[str, str, object]]]], comments=()) -> None:
    """Write binary little-endian PLY.

    ``elements`` is ``[(name, [(prop, type, values), ...]), ...]`` where
    ``type`` is a PLY scalar type name or ``"list:<count>:<item>"`` with
    ``values`` a sequence of 1-D arrays.
    """
    header = ["ply", "format binary_little_endian 1.0"]
    header += [f"comment {c}" for c in comments]
    body = []
    for name, props in elements:
        n = len(props[0][2]) if props else 0
        header.append(f"element {name} {n}")
        has_list = False
        for pname, ptype, _ in props:
            if ptype.startswith("list:"):
                _, ct, it = ptype.split(":")
                header.append(f"property list {ct} {it} {pname}")
                has_list = True
            else:
                header.append(f"property {ptype} {pname}")
        if n == 0:
            continue
        if not has_list:
            dt = np.dtype([(pname, "<" + PLY_TYPES[ptype]) for pname, ptype, _ in props])
            arr = np.empty(n, dtype=dt)
            for pname, _, vals in props:
                arr[pname] = np.asarray(vals)
            body.append(arr.tobytes())
            continue
        body.append(_pack_list_element(props, n))
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        for chunk in body:
            fh.write(chunk)


def _pack_list_element(props, n: int) -> bytes:
    lists = [p for p in props if p[1].startswith("list:")]
    if len(lists) == 1 and props[-1] is lists[0]:
        pname, ptype, vals = lists[0]
        _, ct, it = ptype.split(":")
        lens = {len(v) for v in vals}
        if len(lens) == 1:
            k = lens.pop()
            dt = np.dtype([(q, "<" + PLY_TYPES[t]) for q, t, _ in props[:-1]]
                          + [("__n", "<" + PLY_TYPES[ct]), ("__v", "<" + PLY_TYPES[it], (k,))])
            arr = np.empty(n, dtype=dt)
            for q, _, v in props[:-1]:
                arr[q] = np.asarray(v)
            arr["__n"] = k
            arr["__v"] = np.asarray(vals).reshape(n, k)
            return arr.tobytes()
    chunks = []
    for i in range(n):
        for pname, ptype, vals in props:
            if ptype.startswith("list:"):
                _, ct, it = ptype.split(":")
                v = np.asarray(vals[i], dtype="<" + PLY_TYPES[it])
                chunks.append(np.asarray(len(v), dtype="<" + PLY_TYPES[ct]).tobytes())
                chunks.append(v.tobytes())
            else:
                chunks.append(np.asarray(vals[i], dtype="<" + PLY_TYPES[ptype]).tobytes())
    return b"".join(chunks)


def ply_header(path) -> list[str]:
    lines = []
    with open(path, "rb") as fh:
        while True:
            line = fh.readline().decode("ascii").rstrip("\n")
            lines.append(line)
            if line == "end_header" or not line:
                return lines


def write_points_ply(path, xyz: np.ndarray, rgb: np.ndarray | None = None,
                     visibility: list | None = None, normals: np.ndarray | None = None) -> None:
    """Point cloud: float x,y,z [, uchar rgb] [, float normals] [, list uchar int visibility]."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    props = [("x", "float", xyz[:, 0]), ("y", "float", xyz[:, 1]), ("z", "float", xyz[:, 2])]
    if rgb is not None:
        rgb = np.asarray(rgb).reshape(-1, 3)
        props += [("red", "uchar", rgb[:, 0]), ("green", "uchar", rgb[:, 1]), ("blue", "uchar", rgb[:, 2])]
    if normals is not None:
        props += [("nx", "float", normals[:, 0]), ("ny", "float", normals[:, 1]), ("nz", "float", normals[:, 2])]
    if visibility is not None:
        props.append(("visibility", "list:uchar:int", [np.asarray(v, dtype=np.int32) for v in visibility]))
    write_ply(path, [("vertex", props)])


def read_points_ply(path) -> tuple[np.ndarray, np.ndarray | None, list | None]:
    data = read_ply(path)
    if "vertex" not in data:
        raise PlyFormatError(f"{path}: no vertex element")
    v = data["vertex"]
    if not all(k in v for k in ("x", "y", "z")):
        raise PlyFormatError(f"{path}: vertex element lacks x, y, z properties")
    xyz = np.stack([np.asarray(v[k], dtype=np.float64) for k in ("x", "y", "z")], axis=-1)
    rgb = None
    if all(k in v for k in ("red", "green", "blue")):
        rgb = np.stack([np.asarray(v[k]) for k in ("red", "green", "blue")], axis=-1).astype(np.uint8)
    vis = None
    if "visibility" in v:
        raw = v["visibility"]
        vis = [np.asarray(r, dtype=np.int64) for r in raw]
    return xyz, rgb, vis
