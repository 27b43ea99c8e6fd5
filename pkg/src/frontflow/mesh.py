"""Triangular meshes with tagged boundaries and vertex-centred control volumes.

Mesh file format (UTF-8 text, 0-based indices, one record per line):

    nodes
    <id> <x> <y>
    ...
    triangles
    <id> <n1> <n2> <n3>
    ...
    boundary
    <n1> <n2> <tag>
    ...

Tags are ``inlet``, ``outlet`` or ``wall``. Floats are written with 17
significant digits so a save/load round trip is bit identical.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .grid import RegularGrid

BOUNDARY_TAGS = ("inlet", "outlet", "wall")


class MeshFormatError(ValueError):
    """Raised when a mesh file cannot be parsed."""


class MeshValidationError(ValueError):
    """Raised when mesh data violates a structural invariant."""


@dataclass(frozen=True)
class Mesh:
    nodes: np.ndarray           # (n_nodes, 2) float64 coordinates in metres
    triangles: np.ndarray       # (n_tris, 3) int node indices, positive orientation
    boundary_edges: np.ndarray  # (n_bedges, 2) int node indices
    boundary_tags: tuple        # per-boundary-edge tag in BOUNDARY_TAGS
    domain_size: tuple          # (Dx, Dy)

    def __post_init__(self):
        object.__setattr__(self, "nodes", np.ascontiguousarray(self.nodes, dtype=np.float64))
        object.__setattr__(self, "triangles", np.ascontiguousarray(self.triangles, dtype=np.int64))
        object.__setattr__(self, "boundary_edges",
                           np.ascontiguousarray(self.boundary_edges, dtype=np.int64))
        object.__setattr__(self, "boundary_tags", tuple(self.boundary_tags))
        _validate(self)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @cached_property
    def triangle_areas(self) -> np.ndarray:
        p = self.nodes
        t = self.triangles
        d1 = p[t[:, 1]] - p[t[:, 0]]
        d2 = p[t[:, 2]] - p[t[:, 0]]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def _tagged_nodes(self, tag: str) -> np.ndarray:
        tags = np.array(self.boundary_tags)
        edges = self.boundary_edges[tags == tag]
        return np.unique(edges)

    @cached_property
    def inlet_nodes(self) -> np.ndarray:
        return self._tagged_nodes("inlet")

    @cached_property
    def outlet_nodes(self) -> np.ndarray:
        return self._tagged_nodes("outlet")

    @cached_property
    def wall_nodes(self) -> np.ndarray:
        return self._tagged_nodes("wall")


@dataclass(frozen=True)
class ControlVolumeDecomposition:
    """Median-dual control volumes: per-node area equals the lumped quadrature weight."""
    cv_area: np.ndarray   # (n_nodes,) m^2
    weights: np.ndarray   # (n_nodes,) positive, summing to the domain area


def _boundary_edge_set(mesh: Mesh) -> set:
    """Edges owned by exactly one triangle, as sorted tuples."""
    t = mesh.triangles
    edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    edges.sort(axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    return {tuple(e) for e in uniq[counts == 1]}


def _validate(mesh: Mesh) -> None:
    n = mesh.n_nodes
    Dx, Dy = mesh.domain_size
    if mesh.nodes.ndim != 2 or mesh.nodes.shape[1] != 2:
        raise MeshValidationError("nodes must be an (n, 2) array")
    if mesh.triangles.size and (mesh.triangles.min() < 0 or mesh.triangles.max() >= n):
        raise MeshValidationError("triangle references a node index out of range")
    if mesh.boundary_edges.size and (mesh.boundary_edges.min() < 0 or mesh.boundary_edges.max() >= n):
        raise MeshValidationError("boundary edge references a node index out of range")
    if len(mesh.boundary_tags) != mesh.boundary_edges.shape[0]:
        raise MeshValidationError("boundary edge and tag counts differ")
    for tag in mesh.boundary_tags:
        if tag not in BOUNDARY_TAGS:
            raise MeshValidationError(f"unknown boundary tag {tag!r}")

    tol = 1e-9 * max(Dx, Dy)
    x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
    if (x < -tol).any() or (x > Dx + tol).any() or (y < -tol).any() or (y > Dy + tol).any():
        raise MeshValidationError("node coordinates lie outside [0,Dx]x[0,Dy]")

    if (mesh.triangle_areas <= 0).any():
        raise MeshValidationError("every triangle must have positive signed area")

    topo = _boundary_edge_set(mesh)
    tagged = {tuple(sorted(e)) for e in mesh.boundary_edges}
    if len(tagged) != mesh.boundary_edges.shape[0]:
        raise MeshValidationError("a boundary edge carries more than one tag record")
    missing = topo - tagged
    if missing:
        raise MeshValidationError(f"untagged boundary edge(s), e.g. {sorted(missing)[0]}")
    extra = tagged - topo
    if extra:
        raise MeshValidationError(f"tagged edge(s) not on the mesh boundary, e.g. {sorted(extra)[0]}")

    tags_arr = np.array(mesh.boundary_tags)
    inlet_edges = {tuple(sorted(e)) for e in mesh.boundary_edges[tags_arr == "inlet"]}
    outlet_edges = {tuple(sorted(e)) for e in mesh.boundary_edges[tags_arr == "outlet"]}
    if not inlet_edges or not outlet_edges:
        raise MeshValidationError("inlet and outlet edge sets must be non-empty")
    if inlet_edges & outlet_edges:
        raise MeshValidationError("inlet and outlet edge sets must be disjoint")


def generate_structured_mesh(nx: int, ny: int, domain: tuple) -> Mesh:
    """Triangulated regular grid: each cell split along its lower-left to
    upper-right diagonal. Left edge is the inlet, right edge the outlet,
    top and bottom are walls.
    """
    if nx < 2 or ny < 2:
        raise ValueError("nx and ny must be at least 2")
    Dx, Dy = float(domain[0]), float(domain[1])
    if Dx <= 0 or Dy <= 0:
        raise ValueError("domain lengths must be positive")

    xs = np.linspace(0.0, Dx, nx)
    ys = np.linspace(0.0, Dy, ny)
    X, Y = np.meshgrid(xs, ys)
    nodes = np.column_stack([X.ravel(), Y.ravel()])  # node id = j * nx + i

    def nid(i, j):
        return j * nx + i

    tris = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            ll, lr = nid(i, j), nid(i + 1, j)
            ul, ur = nid(i, j + 1), nid(i + 1, j + 1)
            tris.append((ll, lr, ur))
            tris.append((ll, ur, ul))

    edges = []
    tags = []
    for j in range(ny - 1):
        edges.append((nid(0, j), nid(0, j + 1)))
        tags.append("inlet")
        edges.append((nid(nx - 1, j), nid(nx - 1, j + 1)))
        tags.append("outlet")
    for i in range(nx - 1):
        edges.append((nid(i, 0), nid(i + 1, 0)))
        tags.append("wall")
        edges.append((nid(i, ny - 1), nid(i + 1, ny - 1)))
        tags.append("wall")

    return Mesh(nodes=nodes, triangles=np.array(tris), boundary_edges=np.array(edges),
                boundary_tags=tuple(tags), domain_size=(Dx, Dy))


def save_mesh(mesh: Mesh, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"domain {mesh.domain_size[0]:.17g} {mesh.domain_size[1]:.17g}\n")
        fh.write("nodes\n")
        for i, (x, y) in enumerate(mesh.nodes):
            fh.write(f"{i} {x:.17g} {y:.17g}\n")
        fh.write("triangles\n")
        for i, (a, b, c) in enumerate(mesh.triangles):
            fh.write(f"{i} {a} {b} {c}\n")
        fh.write("boundary\n")
        for (a, b), tag in zip(mesh.boundary_edges, mesh.boundary_tags):
            fh.write(f"{a} {b} {tag}\n")


def load_mesh(path) -> Mesh:
    domain = None
    nodes: dict[int, tuple] = {}
    tris: dict[int, tuple] = {}
    edges = []
    tags = []
    section = None
    with open(path, encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                if parts[0] == "domain":
                    domain = (float(parts[1]), float(parts[2]))
                elif parts[0] in ("nodes", "triangles", "boundary"):
                    section = parts[0]
                elif section == "nodes":
                    nodes[int(parts[0])] = (float(parts[1]), float(parts[2]))
                elif section == "triangles":
                    tris[int(parts[0])] = (int(parts[1]), int(parts[2]), int(parts[3]))
                elif section == "boundary":
                    edges.append((int(parts[0]), int(parts[1])))
                    tags.append(parts[2])
                else:
                    raise MeshFormatError(f"line {ln}: record outside any section")
            except (IndexError, ValueError) as exc:
                if isinstance(exc, MeshFormatError):
                    raise
                raise MeshFormatError(f"line {ln}: cannot parse {line!r}") from exc
    if domain is None:
        raise MeshFormatError("missing domain record")
    if not nodes or not tris:
        raise MeshFormatError("missing nodes or triangles section")
    n = max(nodes) + 1
    if set(nodes) != set(range(n)):
        raise MeshFormatError("node ids must be contiguous from 0")
    nt = max(tris) + 1
    if set(tris) != set(range(nt)):
        raise MeshFormatError("triangle ids must be contiguous from 0")
    node_arr = np.array([nodes[i] for i in range(n)])
    tri_arr = np.array([tris[i] for i in range(nt)])
    return Mesh(nodes=node_arr, triangles=tri_arr, boundary_edges=np.array(edges),
                boundary_tags=tuple(tags), domain_size=domain)


def build_control_volumes(mesh: Mesh) -> ControlVolumeDecomposition:
    """Lumped quadrature weights: each vertex receives a third of every incident
    triangle's area (median-dual construction)."""
    w = np.zeros(mesh.n_nodes)
    share = np.repeat(mesh.triangle_areas / 3.0, 3)
    np.add.at(w, mesh.triangles.ravel(), share)
    return ControlVolumeDecomposition(cv_area=w.copy(), weights=w)


def nearest_neighbour_transfer(grid_values: np.ndarray, grid: RegularGrid, mesh: Mesh) -> np.ndarray:
    """Assign each mesh node the value of the nearest grid point.

    Preserves sharp interfaces: output values are always members of the input
    value set. The grid must cover the mesh domain.
    """
    grid_values = np.asarray(grid_values)
    if grid_values.shape != grid.shape:
        raise ValueError(f"grid values shape {grid_values.shape} != grid shape {grid.shape}")
    Dx, Dy = mesh.domain_size
    tol = 1e-9 * max(Dx, Dy)
    if grid.Dx < Dx - tol or grid.Dy < Dy - tol:
        raise ValueError("grid does not cover the mesh domain")
    iy, ix = grid.nearest_index(mesh.nodes[:, 0], mesh.nodes[:, 1])
    return grid_values[iy, ix]
