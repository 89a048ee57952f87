"""Quadrature rules on the reference triangle and reference edge.

Triangle rules are Dunavant rules, exact for the stated polynomial degree.
Points are barycentric-free (x, y) coordinates on the unit reference
triangle with vertices (0,0), (1,0), (0,1); weights sum to 1 and must be
scaled by the physical cell area.
"""

import numpy as np


def _sym3(a):
    # orbit of a point (a, a) under the S3 symmetry of the triangle
    b = 1.0 - 2.0 * a
    return [(a, a), (b, a), (a, b)]


def _sym6(a, b):
    c = 1.0 - a - b
    return [(a, b), (b, a), (a, c), (c, a), (b, c), (c, b)]


def _rule(points, weights):
    pts = np.array(points, dtype=float)
    w = np.array(weights, dtype=float)
    return pts, w


_RULES = {
    1: _rule([(1.0 / 3.0, 1.0 / 3.0)], [1.0]),
    2: _rule(_sym3(1.0 / 6.0), [1.0 / 3.0] * 3),
    4: _rule(
        _sym3(0.445948490915965) + _sym3(0.091576213509771),
        [0.223381589678011] * 3 + [0.109951743655322] * 3,
    ),
    5: _rule(
        [(1.0 / 3.0, 1.0 / 3.0)]
        + _sym3(0.470142064105115)
        + _sym3(0.101286507323456),
        [0.225]
        + [0.132394152788506] * 3
        + [0.125939180544827] * 3,
    ),
    6: _rule(
        _sym3(0.063089014491502)
        + _sym3(0.249286745170910)
        + _sym6(0.310352451033785, 0.636502499121399),
        [0.050844906370207] * 3
        + [0.116786275726379] * 3
        + [0.082851075618374] * 6,
    ),
}


def triangle_rule(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (points, weights) exact for polynomials up to ``degree``.

    Requests between tabulated degrees are rounded up.
    """
    for d in sorted(_RULES):
        if d >= degree:
            return _RULES[d]
    raise ValueError(f"no triangle rule of degree {degree}")


def edge_rule(n: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre rule on [0, 1] with ``n`` points; weights sum to 1."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def lattice_points(degree: int) -> np.ndarray:
    """Principal-lattice nodes of the given degree on the reference triangle.

    Degree 6 yields the 28 nodal points of a sixth-order nodal space; these
    are the sample points used for deformation-gradient determinant checks.
    """
    pts = [
        (i / degree, j / degree)
        for j in range(degree + 1)
        for i in range(degree + 1 - j)
    ]
    return np.array(pts, dtype=float)
