"""Exception types shared across the toolkit."""


class MeshMotionError(Exception):
    """Base class for all toolkit errors."""


class DegenerateCellError(MeshMotionError):
    """A mesh operation produced or encountered a non-positive cell."""

    def __init__(self, cell: int, message: str | None = None):
        self.cell = int(cell)
        super().__init__(message or f"cell {cell} has non-positive area")


class NonPositiveWeightError(MeshMotionError):
    """A diffusion weight was sampled non-positive during assembly."""

    def __init__(self, cell: int, value: float):
        self.cell = int(cell)
        self.value = float(value)
        super().__init__(f"non-positive weight {value:g} in cell {cell}")


class FactorizationError(MeshMotionError):
    """Sparse direct factorization failed (singular or structurally broken)."""


class NewtonError(MeshMotionError):
    """Newton iteration did not reach the requested tolerance."""

    def __init__(self, residual_norm: float, iterations: int, message: str | None = None):
        self.residual_norm = float(residual_norm)
        self.iterations = int(iterations)
        super().__init__(
            message
            or f"Newton did not converge in {iterations} iterations "
            f"(last residual norm {residual_norm:.3e})"
        )


class MaskPositivityError(MeshMotionError):
    """The boundary-vanishing mask came out non-positive at an interior vertex."""

    def __init__(self, vertex: int, value: float):
        self.vertex = int(vertex)
        self.value = float(value)
        super().__init__(
            f"mask value {value:g} at interior vertex {vertex}; "
            "mesh violates the positivity assumption (not Delaunay/weakly acute?)"
        )


class UsageError(MeshMotionError):
    """Bad command-line arguments or malformed configuration."""
