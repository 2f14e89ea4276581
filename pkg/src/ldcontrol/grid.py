"""Uniform lattices over a box and scalar fields sampled on them."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .control_problem import Domain
from .errors import ArgumentError, DataError

EXTERIOR, INTERIOR, BOUNDARY = 0, 1, 2
CLASS_NAMES = {EXTERIOR: "exterior", INTERIOR: "interior", BOUNDARY: "boundary"}


class Grid:
    """Nodes ``lo + i * h`` over a box, classified against an optional domain.

    With a bounded domain the closure is Dirichlet: interior nodes are those
    with negative signed distance, and boundary nodes are the remaining nodes
    in the 3^d neighborhood of an interior node. Without a domain every node
    is interior and missing neighbors are replaced by the nearest node
    (homogeneous Neumann copy-node closure).
    """

    def __init__(self, lo, hi, h: float, domain: Domain | None = None):
        if not h > 0:
            raise ArgumentError("grid spacing must be positive")
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        self.h = float(h)
        self.dim = self.lo.size
        counts = (self.hi - self.lo) / self.h
        n = np.rint(counts).astype(int)
        if np.any(np.abs(counts - n) > 1e-9 * np.maximum(1, counts)) or np.any(n < 2):
            raise ArgumentError("box extent must be a multiple of h with at least 2 cells")
        self.hi = self.lo + n * self.h
        self.shape = tuple(int(k) + 1 for k in n)
        self.size = int(np.prod(self.shape))
        self.domain = domain if (domain is not None and domain.bounded) else None
        self.closure = "dirichlet" if self.domain is not None else "neumann"
        self.axes = [self.lo[i] + self.h * np.arange(self.shape[i]) for i in range(self.dim)]
        self._classify()

    @classmethod
    def for_domain(cls, domain: Domain, h: float, pad: int = 1) -> "Grid":
        """Lattice aligned with the origin covering the domain plus ``pad`` cells."""
        lo, hi = domain.bounding_box()
        lo = (np.floor(lo / h + 1e-9) - pad) * h
        hi = (np.ceil(hi / h - 1e-9) + pad) * h
        return cls(lo, hi, h, domain)

    @classmethod
    def box(cls, lo, hi, h: float) -> "Grid":
        return cls(lo, hi, h, None)

    def coords(self, idx=None) -> np.ndarray:
        multi = self.unravel(np.arange(self.size) if idx is None else np.asarray(idx))
        return self.lo + self.h * multi

    def unravel(self, idx) -> np.ndarray:
        return np.stack(np.unravel_index(idx, self.shape), axis=-1)

    def ravel(self, multi) -> np.ndarray:
        return np.ravel_multi_index(tuple(np.moveaxis(np.asarray(multi), -1, 0)), self.shape)

    def _classify(self):
        X = self.coords()
        if self.domain is None:
            self.node_class = np.full(self.size, INTERIOR, dtype=np.int8)
        else:
            cls_ = np.where(self.domain.signed_distance(X) < 0, INTERIOR, EXTERIOR).astype(np.int8)
            interior = np.nonzero(cls_ == INTERIOR)[0]
            multi = self.unravel(interior)
            on_edge = np.any((multi == 0) | (multi == np.array(self.shape) - 1), axis=1)
            if np.any(on_edge):
                raise ArgumentError("domain touches the grid edge; enlarge the box")
            for off in neighbor_offsets(self.dim):
                nb = self.ravel(multi + off)
                hit = nb[cls_[nb] == EXTERIOR]
                cls_[hit] = BOUNDARY
            self.node_class = cls_
        self.interior = np.nonzero(self.node_class == INTERIOR)[0]
        self.position = np.full(self.size, -1, dtype=np.int64)
        self.position[self.interior] = np.arange(self.interior.size)

    @property
    def n_interior(self) -> int:
        return int(self.interior.size)

    def neighbor(self, idx, offset) -> tuple[np.ndarray, np.ndarray]:
        """Flat neighbor indices and a mask of in-range neighbors (before clamping)."""
        multi = self.unravel(idx) + np.asarray(offset)
        upper = np.array(self.shape) - 1
        inside = np.all((multi >= 0) & (multi <= upper), axis=1)
        return self.ravel(np.clip(multi, 0, upper)), inside

    def nearest(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        multi = np.rint((X - self.lo) / self.h).astype(np.int64)
        multi = np.clip(multi, 0, np.array(self.shape) - 1)
        return self.ravel(multi)

    def same_lattice(self, other: "Grid") -> bool:
        return (self.shape == other.shape and self.h == other.h
                and np.array_equal(self.lo, other.lo))

    def describe(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist(), "h": self.h,
                "shape": list(self.shape), "closure": self.closure,
                "domain": self.domain.describe() if self.domain is not None else None}

    @classmethod
    def from_description(cls, desc: dict) -> "Grid":
        dom = desc.get("domain")
        domain = None
        if dom is not None:
            if dom["shape"] == "ball":
                domain = Domain.ball(dom["center"], dom["radius"])
            elif dom["shape"] == "box":
                domain = Domain.box(dom["lo"], dom["hi"])
        return cls(desc["lo"], desc["hi"], desc["h"], domain)


def neighbor_offsets(dim: int) -> np.ndarray:
    """All nonzero offsets in {-1, 0, 1}^d."""
    offs = np.stack(np.meshgrid(*([np.array([-1, 0, 1])] * dim), indexing="ij"),
                    axis=-1).reshape(-1, dim)
    return offs[np.any(offs != 0, axis=1)]


@dataclass
class GridFunction:
    grid: Grid
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.size,):
            raise DataError(f"expected {self.grid.size} values, got {self.values.shape}")
        live = self.grid.node_class != EXTERIOR
        if not np.all(np.isfinite(self.values[live])):
            raise DataError("grid function has non-finite values on interior/boundary nodes")

    @classmethod
    def from_function(cls, grid: Grid, fn, **meta) -> "GridFunction":
        return cls(grid, np.asarray(fn(grid.coords()), dtype=float), dict(meta))

    def as_array(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape)

    def at(self, X) -> np.ndarray:
        """Multilinear interpolation; points are clipped into the box."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        interp = RegularGridInterpolator(self.grid.axes, self.as_array(), method="linear")
        return interp(np.clip(X, self.grid.lo, self.grid.hi))

    def to_csv(self, path) -> Path:
        path = Path(path)
        X = self.grid.coords()
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i + 1}" for i in range(self.grid.dim)] + ["value", "class"])
            for x, v, c in zip(X, self.values, self.grid.node_class):
                w.writerow([repr(float(t)) for t in x] + [repr(float(v)), CLASS_NAMES[int(c)]])
        sidecar = path.with_suffix(".json")
        sidecar.write_text(json.dumps({**self.grid.describe(), "meta": self.meta},
                                      indent=2, sort_keys=True, default=str))
        return path

    @classmethod
    def from_csv(cls, path) -> "GridFunction":
        path = Path(path)
        desc = json.loads(path.with_suffix(".json").read_text())
        grid = Grid.from_description(desc)
        with path.open() as fh:
            rows = list(csv.reader(fh))
        col = rows[0].index("value")
        values = np.array([float(r[col]) for r in rows[1:]])
        return cls(grid, values, desc.get("meta", {}))
