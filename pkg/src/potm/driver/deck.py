"""Flat ``key = value`` problem decks.

Keys (``#`` starts a comment; vectors are comma-separated)::

    mesh_path = rod.mesh            # or: generator = taylor_rod(n=6, nz=30)
    material = j2                   # j2 | johnson_cook
    E = 117e9                       # material constants, named as in the
    nu = 0.35                       # parameter dataclasses (J2Params /
    rho0 = 8930                     # JcParams)
    H = 100e6
    sigma_y0 = 400e6
    dt = 4e-9
    n_steps = 2000
    gamma = 1.8
    radius_factor = 1.8             # search settings (SearchConfig fields)
    min_support = 8
    stab_epsilon = auto             # auto: 0.01 * E * hbar^2
    wall_point = 0, 0, 0
    wall_normal = 0, 0, 1
    tool_profile = 0 0; 1 0; 1 1    # polygon vertices separated by ';'
    tool_velocity = -1, 0, 0
    c_N = auto                      # auto: 100 * E / hbar
    c_T = auto
    mu_f = 0.2
    initial_velocity = 0, 0, -227
    body_force = 0, 0, 0
    initial_temperature = 25
    rebalance_interval = 500
    rebalance_threshold = 1.2
    write_interval = 0              # 0 disables VTK output
    vtk_binary = false
    workers = 1
    backend = inproc                # inproc | cluster
    out = out
    allow_inversion = false
    diagnostics_interval = 1
"""
from __future__ import annotations

import ast
import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from ..materials import J2Params, JcParams
from ..search import SearchConfig


class DeckError(ValueError):
    pass


_MATERIALS = {"j2": J2Params, "johnson_cook": JcParams}
_SEARCH_KEYS = {f.name: f.type for f in fields(SearchConfig)}
_MATERIAL_KEYS = {f.name for cls in _MATERIALS.values() for f in fields(cls)}


def _vector(text: str, n: int = 3) -> np.ndarray:
    try:
        v = np.array([float(t) for t in text.split(",")])
    except ValueError:
        raise DeckError(f"expected {n} comma-separated numbers, got {text!r}") from None
    if len(v) != n:
        raise DeckError(f"expected {n} comma-separated numbers, got {text!r}")
    return v


def _polygon(text: str) -> np.ndarray:
    try:
        pts = [[float(t) for t in p.replace(",", " ").split()] for p in text.split(";") if p.strip()]
        return np.array(pts, dtype=float).reshape(-1, 2)
    except ValueError:
        raise DeckError(f"malformed polygon {text!r}") from None


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise DeckError(f"expected a boolean, got {text!r}")


def _auto_float(text: str) -> float | None:
    return None if text.strip().lower() == "auto" else float(text)


def parse_generator(text: str) -> tuple[str, dict]:
    """``name(key=literal, ...)`` into ``(name, kwargs)``."""
    try:
        node = ast.parse(text.strip(), mode="eval").body
        if isinstance(node, ast.Name):
            return node.id, {}
        if not isinstance(node, ast.Call) or not isinstance(node.func, ast.Name) or node.args:
            raise ValueError
        return node.func.id, {k.arg: ast.literal_eval(k.value) for k in node.keywords}
    except (SyntaxError, ValueError):
        raise DeckError(f"malformed generator {text!r}; expected name(key=value, ...)") from None


@dataclass
class ProblemDeck:
    mesh_path: str | None = None
    generator: str | None = None
    material: str = "j2"
    material_params: dict = field(default_factory=dict)
    dt: float = 1e-6
    n_steps: int = 1
    gamma: float = 1.8
    search: SearchConfig = field(default_factory=SearchConfig)
    stab_epsilon: float | None = None
    wall_point: np.ndarray | None = None
    wall_normal: np.ndarray | None = None
    tool_profile: np.ndarray | None = None
    tool_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    c_N: float | None = None
    c_T: float | None = None
    mu_f: float = 0.0
    initial_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    body_force: np.ndarray = field(default_factory=lambda: np.zeros(3))
    initial_temperature: float | None = None
    rebalance_interval: int = 500
    rebalance_threshold: float = 1.2
    write_interval: int = 0
    vtk_binary: bool = False
    workers: int = 1
    backend: str = "inproc"
    out: str = "out"
    allow_inversion: bool = False
    diagnostics_interval: int = 1
    seed: int = 0
    base_dir: Path = field(default_factory=Path.cwd, repr=False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.dt > 0:
            raise DeckError("dt must be positive")
        if self.n_steps < 0:
            raise DeckError("n_steps must be non-negative")
        if self.workers < 1:
            raise DeckError("workers must be >= 1")
        if self.backend not in ("inproc", "cluster"):
            raise DeckError(f"unknown backend {self.backend!r}")
        if self.material not in _MATERIALS:
            raise DeckError(f"unknown material {self.material!r}; use j2 or johnson_cook")
        if (self.mesh_path is None) == (self.generator is None):
            raise DeckError("exactly one of mesh_path and generator is required")
        if (self.wall_point is None) != (self.wall_normal is None):
            raise DeckError("wall_point and wall_normal go together")
        if self.write_interval < 0 or self.diagnostics_interval < 0:
            raise DeckError("intervals must be non-negative")
        if self.stab_epsilon is not None and self.stab_epsilon < 0:
            raise DeckError("stab_epsilon must be non-negative")

    def material_parameters(self):
        cls = _MATERIALS[self.material]
        try:
            return cls(**self.material_params)
        except TypeError as exc:
            raise DeckError(f"{self.material} parameters: {exc}") from None

    @classmethod
    def from_text(cls, text: str, base_dir=None) -> "ProblemDeck":
        cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string("[deck]\n" + text)
        except configparser.Error as exc:
            raise DeckError(str(exc)) from None
        raw = dict(cp["deck"])
        kw: dict = {"base_dir": Path(base_dir) if base_dir else Path.cwd()}
        mat: dict = {}
        search: dict = {}
        conv = {
            "dt": float, "n_steps": int, "gamma": float, "mu_f": float,
            "rebalance_interval": int, "rebalance_threshold": float, "write_interval": int,
            "workers": int, "diagnostics_interval": int, "seed": int,
            "initial_temperature": float,
            "vtk_binary": _bool, "allow_inversion": _bool,
            "stab_epsilon": _auto_float, "c_N": _auto_float, "c_T": _auto_float,
            "wall_point": _vector, "wall_normal": _vector, "tool_velocity": _vector,
            "initial_velocity": _vector, "body_force": _vector, "tool_profile": _polygon,
            "mesh_path": str, "generator": str, "material": str, "backend": str, "out": str,
        }
        for key, value in raw.items():
            try:
                if key in conv:
                    kw[key] = conv[key](value)
                elif key in _SEARCH_KEYS:
                    t = _SEARCH_KEYS[key]
                    search[key] = _bool(value) if t in (bool, "bool") else \
                        int(value) if t in (int, "int") else float(value)
                elif key in _MATERIAL_KEYS:
                    mat[key] = float(value)
                else:
                    raise DeckError(f"unknown key {key!r}")
            except ValueError as exc:
                if isinstance(exc, DeckError):
                    raise
                raise DeckError(f"{key}: cannot parse {value!r}") from None
        kw["material_params"] = mat
        kw["search"] = SearchConfig(**search)
        deck = cls(**kw)
        deck.material_parameters()
        return deck

    @classmethod
    def from_file(cls, path) -> "ProblemDeck":
        path = Path(path)
        return cls.from_text(path.read_text(), base_dir=path.parent)

    def resolved_mesh_path(self) -> Path:
        p = Path(self.mesh_path)
        return p if p.is_absolute() else self.base_dir / p
