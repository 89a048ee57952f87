"""2D finite-element mesh-motion toolkit.

Classic boundary-displacement extension operators (harmonic, biharmonic,
p-Laplace, linear-elastic) and two learned ones: a nonlinear extension
whose diffusion coefficient is an input-convex network of the squared
gradient norm, and a harmonic extension corrected pointwise by a masked
MLP.  Includes dataset generation from hyperelastic solid solves, mesh
quality measurement, training harnesses and a CLI.
"""

from .errors import (
    DegenerateCellError,
    FactorizationError,
    MaskPositivityError,
    MeshMotionError,
    NewtonError,
    NonPositiveWeightError,
    UsageError,
)
from .extensions import (
    BoundaryDisplacement,
    ElasticStiffnessConfig,
    biharmonic_extend,
    elastic_extend,
    elastic_stiffness_field,
    harmonic_extend,
    incremental_extend,
    p_laplace_extend,
)
from .fem import (
    NewtonConfig,
    SparseSystem,
    assemble_mass,
    assemble_weighted_laplacian,
    clement_gradient,
    clement_matrix,
    newton_solve,
    solve_linear,
)
from .geometry import benchmark_mesh, channel_mesh, flap_solid_mesh, rectangle_mesh, unit_square_mesh
from .hybrid import (
    HybridState,
    HybridTrainConfig,
    StrategyConfig,
    hybrid_extend_auto,
    hybrid_extend_incremental,
    hybrid_extend_nonlinear,
    train_hybrid,
)
from .icnn import (
    IcnnParams,
    ShallowReluNet,
    alpha_eval,
    counterexample_fit,
    counterexample_target,
    icnn_derivative,
    icnn_eval,
    random_icnn,
    represent_convex_pwl,
    zero_icnn,
)
from .mesh import Field, TriMesh, deform
from .nncorr import (
    MaskConfig,
    MlpParams,
    NNCorrTrainConfig,
    compute_mask,
    mlp_forward,
    mlp_init,
    nncorr_extend,
    train_nncorr,
)
from .datagen import (
    LoadConfig,
    Material,
    Snapshot,
    SnapshotSet,
    build_artificial_dataset,
    neo_hookean_solve,
    replay_sequence,
    split_dataset,
    table1_configs,
)
from .quality import QualityReport, min_det_gradient, scaled_jacobian, sign_degenerate

__all__ = [n for n in dir() if not n.startswith("_")]
__version__ = "0.1.0"
