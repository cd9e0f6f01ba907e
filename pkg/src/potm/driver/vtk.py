"""Legacy VTK point-cloud output, one file per worker and output step."""
from __future__ import annotations

from pathlib import Path

import numpy as np


KIND_NODE = 0
KIND_MP = 1


def point_fields(sub, dt: float, temperature: bool = False) -> tuple[np.ndarray, dict]:
    """Owned particle positions and the per-point output fields."""
    n, m = sub.owned.nodes, sub.owned.mps
    x = np.concatenate([n.x, m.x])
    dev = m.sigma - np.trace(m.sigma, axis1=1, axis2=2)[:, None, None] / 3.0 * np.eye(3)
    sv = np.sqrt(1.5 * np.einsum("kij,kij->k", dev, dev))
    data = {
        "kind": np.concatenate([np.full(len(n), KIND_NODE), np.full(len(m), KIND_MP)]).astype(np.int32),
        "owner": np.full(len(x), sub.rank, dtype=np.int32),
        "displacement": np.concatenate([n.x - n.x0, m.x - m.x0]),
        "velocity": np.concatenate([n.du_next / dt, (m.x - m.x_prev) / dt]),
        "von_mises": np.concatenate([np.zeros(len(n)), sv]),
        "eps_p": np.concatenate([np.zeros(len(n)), m.eps_p]),
        "fractured": np.concatenate([np.zeros(len(n), dtype=np.int32),
                                     m.fractured.astype(np.int32)]),
    }
    if temperature:
        data["temperature"] = np.concatenate([np.full(len(n), np.nan), m.temperature])
    return x, data


def _block(fh, arr: np.ndarray, binary: bool, per_line: int) -> None:
    if binary:
        dt = ">i4" if arr.dtype.kind in "iub" else ">f8"
        fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
        fh.write(b"\n")
        return
    flat = arr.reshape(-1, per_line)
    fmt = "%d" if arr.dtype.kind in "iub" else "%.17g"
    if len(flat):
        fh.write(("\n".join(" ".join(fmt % v for v in row) for row in flat) + "\n").encode())


def write_points(path, x, data: dict, binary: bool = False, title: str = "potm") -> None:
    x = np.asarray(x, dtype=float).reshape(-1, 3)
    n = len(x)
    with open(path, "wb") as fh:
        fh.write(f"# vtk DataFile Version 3.0\n{title}\n{'BINARY' if binary else 'ASCII'}\n"
                 f"DATASET UNSTRUCTURED_GRID\nPOINTS {n} double\n".encode())
        _block(fh, x, binary, 3)
        fh.write(f"CELLS {n} {2 * n}\n".encode())
        cells = np.column_stack([np.ones(n, dtype=np.int32), np.arange(n, dtype=np.int32)])
        _block(fh, cells, binary, 2)
        fh.write(f"CELL_TYPES {n}\n".encode())
        _block(fh, np.ones(n, dtype=np.int32), binary, 1)
        fh.write(f"POINT_DATA {n}\n".encode())
        for name, arr in data.items():
            arr = np.asarray(arr)
            kind = "int" if arr.dtype.kind in "iub" else "double"
            if arr.ndim == 2:
                fh.write(f"VECTORS {name} {kind}\n".encode())
                _block(fh, arr, binary, 3)
            else:
                fh.write(f"SCALARS {name} {kind} 1\nLOOKUP_TABLE default\n".encode())
                _block(fh, arr, binary, 1)


def vtk_path(out_dir, rank: int, step: int) -> Path:
    return Path(out_dir) / f"potm_r{rank:04d}_s{step:07d}.vtk"


def write_vtk(sub, step: int, out_dir, dt: float, binary: bool = False,
              temperature: bool = False) -> Path:
    """Write the owned particles of ``sub`` and return the file path."""
    path = vtk_path(out_dir, sub.rank, step)
    path.parent.mkdir(parents=True, exist_ok=True)
    x, data = point_fields(sub, dt, temperature)
    write_points(path, x, data, binary, title=f"potm rank {sub.rank} step {step}")
    return path
