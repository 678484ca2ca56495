"""Two-layer rectangle meshed by uniform right triangles.

Nodes are numbered row by row, ``node = j * (nx + 1) + i``. Every cell is split by its
south-west to north-east diagonal into two counter-clockwise triangles. Cells with column
index ``i < split_index`` belong to subdomain 1, the others to subdomain 2.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Tuple

import numpy as np
import scipy.sparse as sp
import vtk
import vtk.util.numpy_support as vnp

from ddlscheme.exceptions import MeshConfigError

logger = logging.getLogger(__name__)

SUBDOMAINS = (1, 2)


class NodeClass(str, Enum):
    """
    Enum for the boundary classification of a mesh node.

    Attributes:
        INTERIOR_1 (str): Interior node of subdomain 1.
        INTERIOR_2 (str): Interior node of subdomain 2.
        INTERFACE (str): Node on the interface line, end points included.
        OUTER_BOUNDARY_1 (str): Dirichlet node on the outer boundary of subdomain 1.
        OUTER_BOUNDARY_2 (str): Dirichlet node on the outer boundary of subdomain 2.
    """

    INTERIOR_1 = "interior1"
    INTERIOR_2 = "interior2"
    INTERFACE = "interface"
    OUTER_BOUNDARY_1 = "outer_boundary1"
    OUTER_BOUNDARY_2 = "outer_boundary2"


def _frozen(array):
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class TwoLayerMesh:
    """
    Structured triangulation of ``[0, lx] x [0, ly]`` with one vertical interface.

    Attributes:
        lx (float): Width of the rectangle.
        ly (float): Height of the rectangle.
        nx (int): Cells in x.
        ny (int): Cells in y.
        split_index (int): Column of the interface line, ``0 < split_index < nx``.
        nodes (ndarray): ``(n_nodes, 2)`` coordinates.
        triangles (ndarray): ``(n_triangles, 3)`` counter-clockwise vertex indices.
        node_class (tuple): One NodeClass per node.
        element_subdomain (ndarray): Subdomain (1 or 2) of every triangle.
    """

    lx: float
    ly: float
    nx: int
    ny: int
    split_index: int
    nodes: np.ndarray
    triangles: np.ndarray
    node_class: Tuple[NodeClass, ...]
    element_subdomain: np.ndarray

    @property
    def hx(self):
        return self.lx / self.nx

    @property
    def hy(self):
        return self.ly / self.ny

    @property
    def x_interface(self):
        return self.lx * self.split_index / self.nx

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_triangles(self):
        return self.triangles.shape[0]

    @cached_property
    def areas(self):
        """Area of every triangle."""
        p = self.nodes[self.triangles]
        doubled = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (
            p[:, 2, 0] - p[:, 0, 0]
        ) * (p[:, 1, 1] - p[:, 0, 1])
        return _frozen(0.5 * doubled)

    @cached_property
    def gradients(self):
        """``(n_triangles, 3, 2)`` gradients of the three P1 basis functions per triangle."""
        p = self.nodes[self.triangles]
        x, y = p[:, :, 0], p[:, :, 1]
        doubled = 2.0 * self.areas
        grads = np.empty((self.n_triangles, 3, 2))
        for k in range(3):
            a, b = (k + 1) % 3, (k + 2) % 3
            grads[:, k, 0] = (y[:, a] - y[:, b]) / doubled
            grads[:, k, 1] = (x[:, b] - x[:, a]) / doubled
        return _frozen(grads)

    def nodes_of_class(self, *classes):
        """Indices of all nodes whose class is one of ``classes``, ascending."""
        wanted = set(classes)
        return np.array([n for n, c in enumerate(self.node_class) if c in wanted], dtype=int)


def _check_count(field, value, minimum):
    if isinstance(value, bool) or int(value) != value or value < minimum:
        raise MeshConfigError(field, value, f"must be an integer >= {minimum}")
    return int(value)


def build_mesh(lx, ly, nx, ny, split_index):
    """
    Builds the two-layer mesh.

    Args:
        lx (float): Width, positive.
        ly (float): Height, positive.
        nx (int): Cells in x, at least 1.
        ny (int): Cells in y, at least 1.
        split_index (int): Interface column, strictly inside ``(0, nx)``.

    Returns:
        TwoLayerMesh: The mesh.

    Raises:
        MeshConfigError: If a parameter is out of range.
    """
    for field, value in (("lx", lx), ("ly", ly)):
        if not (np.isfinite(value) and value > 0):
            raise MeshConfigError(field, value, "must be a positive finite length")
    nx = _check_count("nx", nx, 1)
    ny = _check_count("ny", ny, 1)
    if isinstance(split_index, bool) or int(split_index) != split_index:
        raise MeshConfigError("split_index", split_index, "must be an integer")
    split_index = int(split_index)
    if not 0 < split_index < nx:
        raise MeshConfigError(
            "split_index", split_index, f"must lie strictly inside (0, nx) = (0, {nx})"
        )

    xs = np.linspace(0.0, lx, nx + 1)
    ys = np.linspace(0.0, ly, ny + 1)
    xs[split_index] = lx * split_index / nx
    gx, gy = np.meshgrid(xs, ys)
    nodes = np.column_stack([gx.ravel(), gy.ravel()])

    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny))
    ii, jj = ii.ravel(), jj.ravel()
    sw = jj * (nx + 1) + ii
    se, nw = sw + 1, sw + nx + 1
    ne = nw + 1
    triangles = np.empty((2 * nx * ny, 3), dtype=int)
    triangles[0::2] = np.column_stack([sw, se, ne])
    triangles[1::2] = np.column_stack([sw, ne, nw])
    element_subdomain = np.repeat(np.where(ii < split_index, 1, 2), 2)

    node_class = []
    for j in range(ny + 1):
        for i in range(nx + 1):
            on_rim = j in (0, ny)
            if i == split_index:
                node_class.append(NodeClass.INTERFACE)
            elif i < split_index:
                outer = on_rim or i == 0
                node_class.append(NodeClass.OUTER_BOUNDARY_1 if outer else NodeClass.INTERIOR_1)
            else:
                outer = on_rim or i == nx
                node_class.append(NodeClass.OUTER_BOUNDARY_2 if outer else NodeClass.INTERIOR_2)

    mesh = TwoLayerMesh(
        lx=float(lx),
        ly=float(ly),
        nx=nx,
        ny=ny,
        split_index=split_index,
        nodes=_frozen(nodes),
        triangles=_frozen(triangles),
        node_class=tuple(node_class),
        element_subdomain=_frozen(element_subdomain),
    )
    logger.debug(
        "Built %dx%d mesh on [0, %g] x [0, %g], interface at x = %g",
        nx, ny, lx, ly, mesh.x_interface,
    )
    return mesh


@dataclass(frozen=True, eq=False)
class SubdomainDofMap:
    """
    Node and degree-of-freedom bookkeeping of one subdomain.

    Global indices refer to mesh nodes, local indices to positions in ``nodes``.

    Attributes:
        subdomain (int): 1 or 2.
        nodes (ndarray): Global indices of the subdomain's nodes, ascending.
        elements (ndarray): Global indices of the subdomain's triangles.
        free_dofs (ndarray): Global indices of the unknowns, interface nodes included.
        dirichlet_dofs (ndarray): Global indices of the outer boundary nodes.
        interface_dofs (ndarray): Global indices of the interface nodes, ordered by y.
        local_triangles (ndarray): Triangles in local numbering.
        free_local (ndarray): Local positions of ``free_dofs``.
        dirichlet_local (ndarray): Local positions of ``dirichlet_dofs``.
        interface_local (ndarray): Local positions of ``interface_dofs``.
    """

    subdomain: int
    nodes: np.ndarray
    elements: np.ndarray
    free_dofs: np.ndarray
    dirichlet_dofs: np.ndarray
    interface_dofs: np.ndarray
    local_triangles: np.ndarray
    free_local: np.ndarray
    dirichlet_local: np.ndarray
    interface_local: np.ndarray

    @property
    def n_nodes(self):
        return self.nodes.shape[0]


def _dof_map(mesh, subdomain):
    interior = NodeClass.INTERIOR_1 if subdomain == 1 else NodeClass.INTERIOR_2
    outer = NodeClass.OUTER_BOUNDARY_1 if subdomain == 1 else NodeClass.OUTER_BOUNDARY_2
    nodes = mesh.nodes_of_class(interior, outer, NodeClass.INTERFACE)
    free = mesh.nodes_of_class(interior, NodeClass.INTERFACE)
    dirichlet = mesh.nodes_of_class(outer)
    interface = mesh.nodes_of_class(NodeClass.INTERFACE)
    interface = interface[np.argsort(mesh.nodes[interface, 1], kind="stable")]

    to_local = np.full(mesh.n_nodes, -1, dtype=int)
    to_local[nodes] = np.arange(nodes.size)
    elements = np.flatnonzero(mesh.element_subdomain == subdomain)
    return SubdomainDofMap(
        subdomain=subdomain,
        nodes=_frozen(nodes),
        elements=_frozen(elements),
        free_dofs=_frozen(free),
        dirichlet_dofs=_frozen(dirichlet),
        interface_dofs=_frozen(interface),
        local_triangles=_frozen(to_local[mesh.triangles[elements]]),
        free_local=_frozen(to_local[free]),
        dirichlet_local=_frozen(to_local[dirichlet]),
        interface_local=_frozen(to_local[interface]),
    )


def dof_maps(mesh):
    """Returns the ``(subdomain 1, subdomain 2)`` DOF maps of ``mesh``."""
    return tuple(_dof_map(mesh, subdomain) for subdomain in SUBDOMAINS)


def global_free_dofs(mesh):
    """Union of both subdomains' free DOFs: every node that is not an outer boundary node."""
    return mesh.nodes_of_class(NodeClass.INTERIOR_1, NodeClass.INTERIOR_2, NodeClass.INTERFACE)


@dataclass(frozen=True, eq=False)
class InterfaceTrace:
    """
    Discrete trace on the interface and the lumped interface pairing.

    Attributes:
        interface_nodes (ndarray): Global interface node indices ordered by y.
        y (ndarray): y coordinates of the interface nodes.
        weights (ndarray): Lumped length weights, ``h_y`` inside and ``h_y / 2`` at the ends.
    """

    interface_nodes: np.ndarray
    y: np.ndarray
    weights: np.ndarray

    @property
    def size(self):
        return self.interface_nodes.size

    def restrict(self, values, dof_map):
        """Interface values of a subdomain-local nodal vector."""
        return np.asarray(values)[dof_map.interface_local]

    def mass_matrix(self, consistent=False):
        """Interface mass matrix; diagonal lumped weights unless ``consistent``."""
        if not consistent:
            return sp.diags(self.weights).tocsr()
        h = np.diff(self.y)
        diagonal = np.zeros(self.size)
        diagonal[:-1] += h / 3.0
        diagonal[1:] += h / 3.0
        return sp.diags([h / 6.0, diagonal, h / 6.0], [-1, 0, 1]).tocsr()

    def pairing(self, a, b, consistent=False):
        """Discrete ``<a, b>`` on the interface."""
        if not consistent:
            return float(np.dot(self.weights * np.asarray(a), np.asarray(b)))
        return float(np.asarray(a) @ (self.mass_matrix(True) @ np.asarray(b)))

    def norm(self, values, consistent=False):
        return float(np.sqrt(max(self.pairing(values, values, consistent), 0.0)))


def interface_trace(mesh):
    """Builds the interface trace of ``mesh``."""
    nodes = mesh.nodes_of_class(NodeClass.INTERFACE)
    nodes = nodes[np.argsort(mesh.nodes[nodes, 1], kind="stable")]
    y = mesh.nodes[nodes, 1]
    h = np.diff(y)
    weights = np.zeros(nodes.size)
    weights[:-1] += h / 2.0
    weights[1:] += h / 2.0
    return InterfaceTrace(interface_nodes=_frozen(nodes), y=_frozen(y), weights=_frozen(weights))


def write_vtk(mesh, path, point_data=None, title="ddlscheme two-layer mesh"):
    """
    Writes the mesh as a legacy ASCII VTK unstructured grid with triangle cells.

    Args:
        mesh (TwoLayerMesh): The mesh.
        path (str or Path): Output file.
        point_data (dict, optional): Name to per-node array.
        title (str, optional): Header line.
    """
    point_data = point_data or {}
    arrays = {}
    for name, values in point_data.items():
        values = np.ascontiguousarray(values, dtype=np.float64)
        if values.shape != (mesh.n_nodes,):
            raise ValueError(f"point data '{name}' must have one value per node")
        arrays[name] = values

    points = vtk.vtkPoints()
    xyz = np.zeros((mesh.n_nodes, 3))
    xyz[:, :2] = mesh.nodes
    points.SetData(vnp.numpy_to_vtk(xyz, deep=True))
    connectivity = np.hstack([np.full((mesh.n_triangles, 1), 3), mesh.triangles]).astype(np.int64)
    cells = vtk.vtkCellArray()
    cells.SetCells(mesh.n_triangles, vnp.numpy_to_vtkIdTypeArray(connectivity.ravel(), deep=True))

    grid = vtk.vtkUnstructuredGrid()
    grid.SetPoints(points)
    grid.SetCells(vtk.VTK_TRIANGLE, cells)
    subdomain = vnp.numpy_to_vtk(np.asarray(mesh.element_subdomain, dtype=np.int32), deep=True)
    subdomain.SetName("subdomain")
    grid.GetCellData().AddArray(subdomain)
    for name, values in arrays.items():
        array = vnp.numpy_to_vtk(values, deep=True)
        array.SetName(name)
        grid.GetPointData().AddArray(array)

    writer = vtk.vtkUnstructuredGridWriter()
    writer.SetFileName(str(path))
    writer.SetInputData(grid)
    writer.SetHeader(title)
    writer.SetFileTypeToASCII()
    writer.SetFileVersion(42)
    if not writer.Write():
        raise OSError(f"VTK writer failed for {path}")
