"""Mesh generators: structured rectangles and the channel benchmark domain.

The benchmark fluid domain is a 2.5 x 0.41 channel with a cylinder of
radius 0.05 centered at (0.2, 0.2) and an attached flap of height 0.02
ending at x = 0.6.  Boundary edges on the flap are tagged "moving"; the
outer walls and the cylinder are tagged "fixed".
"""

import numpy as np
from scipy.spatial import Delaunay

from .errors import MeshMotionError
from .mesh import TriMesh

CHANNEL_LENGTH = 2.5
CHANNEL_HEIGHT = 0.41
CYLINDER_CENTER = np.array([0.2, 0.2])
CYLINDER_RADIUS = 0.05
FLAP_HALF_HEIGHT = 0.01
FLAP_END_X = 0.6
FLAP_Y0 = CYLINDER_CENTER[1] - FLAP_HALF_HEIGHT
FLAP_Y1 = CYLINDER_CENTER[1] + FLAP_HALF_HEIGHT
# x where the flap sides meet the cylinder
FLAP_X0 = CYLINDER_CENTER[0] + np.sqrt(CYLINDER_RADIUS**2 - FLAP_HALF_HEIGHT**2)
FLAP_TIP = np.array([FLAP_END_X, CYLINDER_CENTER[1]])

# spacing that lands refinement 0 near 3935 vertices (calibrated)
_H0 = 0.0174


def rectangle_mesh(x0, y0, x1, y1, nx, ny, tag_of_midpoint=None) -> TriMesh:
    """Structured right-diagonal triangulation of [x0,x1] x [y0,y1].

    Default tagging: all boundary edges "fixed".
    """
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    verts = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return i * (ny + 1) + j

    cells = []
    for i in range(nx):
        for j in range(ny):
            a, b = vid(i, j), vid(i + 1, j)
            c, d = vid(i + 1, j + 1), vid(i, j + 1)
            cells.append((a, b, c))
            cells.append((a, c, d))
    if tag_of_midpoint is None:
        tag_of_midpoint = lambda m: "fixed"
    return TriMesh.from_cells(verts, np.array(cells), tag_of_midpoint)


def unit_square_mesh(n, tag_of_midpoint=None) -> TriMesh:
    return rectangle_mesh(0.0, 0.0, 1.0, 1.0, n, n, tag_of_midpoint)


def flap_tag(m, tol=1e-9):
    """Tag midpoints of the flap solid rectangle boundary."""
    if abs(m[0] - FLAP_X0) < tol:
        return "attach"
    if abs(m[0] - FLAP_END_X) < tol:
        return "tip"
    if abs(m[1] - FLAP_Y1) < tol:
        return "top"
    return "bottom"


def flap_solid_mesh(nx=24, ny=2) -> TriMesh:
    """Structured mesh of the flap rectangle (the deformable solid).

    Tags: "attach" (cylinder side, clamped), "tip" (free end), "top",
    "bottom" (lateral sides carrying the distributed loads).
    """
    return rectangle_mesh(FLAP_X0, FLAP_Y0, FLAP_END_X, FLAP_Y1, nx, ny, flap_tag)


def _polyline(points_fn, t0, t1, n):
    t = np.linspace(t0, t1, n + 1)
    return points_fn(t)


def _hole_outline(h):
    """Closed outline of cylinder + flap, as point array and provenance.

    Returns (points, on_circle, on_flap) where provenance marks whether a
    point lies on the cylinder arc or on the flap sides/tip (corner points
    lie on both).
    """
    theta_top = np.arctan2(FLAP_HALF_HEIGHT, FLAP_X0 - CYLINDER_CENTER[0])
    # arc from the top junction counter-clockwise around to the bottom one
    arc_span = 2.0 * np.pi - 2.0 * theta_top
    n_arc = max(8, int(np.ceil(arc_span * CYLINDER_RADIUS / h)))
    ang = theta_top + arc_span * np.arange(n_arc + 1) / n_arc
    arc = CYLINDER_CENTER + CYLINDER_RADIUS * np.column_stack([np.cos(ang), np.sin(ang)])

    n_side = max(2, int(np.ceil((FLAP_END_X - FLAP_X0) / h)))
    xs = np.linspace(FLAP_X0, FLAP_END_X, n_side + 1)
    bottom = np.column_stack([xs, np.full_like(xs, FLAP_Y0)])
    top = np.column_stack([xs[::-1], np.full_like(xs, FLAP_Y1)])
    n_tip = max(2, int(np.ceil(2 * FLAP_HALF_HEIGHT / min(h, 0.01))))
    tip_y = np.linspace(FLAP_Y0, FLAP_Y1, n_tip + 1)
    tip = np.column_stack([np.full_like(tip_y, FLAP_END_X), tip_y])

    # arc ends at the bottom junction == bottom[0]; avoid duplicates
    pts = np.vstack([arc, bottom[1:], tip[1:], top[1:-1]])
    n = len(pts)
    on_circle = np.zeros(n, dtype=bool)
    on_circle[: n_arc + 1] = True
    on_flap = np.zeros(n, dtype=bool)
    on_flap[0] = True  # top junction
    on_flap[n_arc:] = True  # bottom junction onwards
    return pts, on_circle, on_flap


def _inside_hole(p, pad=0.0):
    """True for points inside cylinder or flap, padded outward by ``pad``."""
    p = np.atleast_2d(p)
    in_cyl = np.hypot(p[:, 0] - CYLINDER_CENTER[0], p[:, 1] - CYLINDER_CENTER[1]) < (
        CYLINDER_RADIUS + pad
    )
    in_flap = (
        (p[:, 0] > FLAP_X0 - pad)
        & (p[:, 0] < FLAP_END_X + pad)
        & (p[:, 1] > FLAP_Y0 - pad)
        & (p[:, 1] < FLAP_Y1 + pad)
    )
    return in_cyl | in_flap


def channel_mesh(h, seed=0) -> TriMesh:
    """Delaunay mesh of the channel-with-cylinder-and-flap fluid domain.

    ``h`` is the target point spacing.  Interior points sit on a lightly
    jittered hexagonal lattice (seeded, reproducible); boundary points are
    spaced ``h`` along the outline.  Cells inside the hole are discarded.
    """
    hole_pts, on_circle, on_flap = _hole_outline(h)

    # outer rectangle
    nx = int(np.ceil(CHANNEL_LENGTH / h))
    ny = int(np.ceil(CHANNEL_HEIGHT / h))
    xs = np.linspace(0.0, CHANNEL_LENGTH, nx + 1)
    ys = np.linspace(0.0, CHANNEL_HEIGHT, ny + 1)
    wall = np.vstack(
        [
            np.column_stack([xs, np.zeros_like(xs)]),
            np.column_stack([xs, np.full_like(xs, CHANNEL_HEIGHT)]),
            np.column_stack([np.zeros(ny - 1), ys[1:-1]]),
            np.column_stack([np.full(ny - 1, CHANNEL_LENGTH), ys[1:-1]]),
        ]
    )

    # hexagonal interior lattice
    dy = h * np.sqrt(3.0) / 2.0
    rows = int(np.floor(CHANNEL_HEIGHT / dy))
    pts = []
    for j in range(1, rows):
        y = j * dy
        off = 0.5 * h if j % 2 else 0.0
        x = np.arange(h * 0.75 + off, CHANNEL_LENGTH - 0.5 * h, h)
        pts.append(np.column_stack([x, np.full_like(x, y)]))
    interior = np.vstack(pts)
    rng = np.random.Generator(np.random.Philox(seed))
    interior = interior + rng.uniform(-0.06 * h, 0.06 * h, interior.shape)

    # clear the lattice away from all boundary points
    clearance = 0.55 * h
    keep = ~_inside_hole(interior, pad=clearance)
    keep &= interior[:, 1] > clearance
    keep &= interior[:, 1] < CHANNEL_HEIGHT - clearance
    keep &= interior[:, 0] > clearance
    keep &= interior[:, 0] < CHANNEL_LENGTH - clearance
    interior = interior[keep]

    points = np.vstack([wall, hole_pts, interior])
    tri = Delaunay(points)
    cells = tri.simplices.astype(np.int64)

    # orient counter-clockwise
    v = points
    d1 = v[cells[:, 1]] - v[cells[:, 0]]
    d2 = v[cells[:, 2]] - v[cells[:, 0]]
    areas = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    flip = areas < 0
    cells[flip] = cells[flip][:, [0, 2, 1]]

    centroids = v[cells].mean(axis=1)
    cells = cells[~_inside_hole(centroids)]

    # drop unused points, remap indices
    used = np.unique(cells)
    remap = -np.ones(len(points), dtype=np.int64)
    remap[used] = np.arange(len(used))
    points = points[used]
    cells = remap[cells]

    n_wall = len(wall)
    circle_set = set((np.where(on_circle)[0] + n_wall).tolist())
    flap_set = set((np.where(on_flap)[0] + n_wall).tolist())
    circle_set = {remap[i] for i in circle_set if remap[i] >= 0}
    flap_set = {remap[i] for i in flap_set if remap[i] >= 0}
    wall_set = {remap[i] for i in range(n_wall) if remap[i] >= 0}

    def classify(edge):
        a, b = int(edge[0]), int(edge[1])
        if a in circle_set and b in circle_set:
            return "fixed"
        if a in flap_set and b in flap_set:
            return "moving"
        if a in wall_set and b in wall_set:
            return "fixed"
        raise MeshMotionError("boundary edge off the intended outline")

    e = np.sort(
        np.concatenate([cells[:, [0, 1]], cells[:, [1, 2]], cells[:, [2, 0]]]), axis=1
    )
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    bedges = uniq[counts == 1]
    tags = [classify(edge) for edge in bedges]
    return TriMesh(points, cells, bedges, tags)


def benchmark_mesh(refinement: int) -> TriMesh:
    """Channel benchmark fluid mesh at refinement 0, 1 or 2.

    Vertex counts land near the 3935 / 15300 / 60320 ladder.
    """
    if refinement not in (0, 1, 2):
        raise MeshMotionError("refinement must be 0, 1 or 2")
    return channel_mesh(_H0 / (2.0**refinement), seed=refinement)
