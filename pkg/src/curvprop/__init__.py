"""Unbiased stochastic Hessian estimation on computational graphs.

Build a graph of vector-valued nodes, evaluate it, back-propagate the
gradient, and then estimate any part of the Hessian (diagonal, blocks,
or all of it) from rank-1 probes whose expectation is exact. Exact dense
oracles, closed-form estimator variances, a batched feed-forward-network
specialization, and a reproducible accuracy-experiment harness round out
the package.
"""

from .graph import (
    CycleError,
    Edge,
    GradState,
    Graph,
    GraphError,
    Tape,
    evaluate,
    gradient,
    topological_order,
)
from .nodes import (
    ACTIVATIONS,
    AffineNode,
    BilinearCurvature,
    CurvatureFactor,
    DenseCurvature,
    DenseFactor,
    DiagonalCurvature,
    DiagonalFactor,
    ElementwiseNode,
    InputNode,
    LocalCurvature,
    MatmulNode,
    Node,
    ParameterSliceNode,
    QuadraticFormNode,
    SquaredLossNode,
    SumNode,
    ZeroCurvature,
    ZeroFactor,
    factor_curvature,
)
from .exact import (
    DENSE_CAP,
    HessianOperator,
    SizeLimitError,
    exact_hessian,
    finite_difference_hessian,
    hessian_vector_product,
    local_curvatures,
)
from .estimators import (
    EstimateResult,
    EstimatorConfig,
    FactorMatrix,
    NoiseDraw,
    active_node_ids,
    estimate,
    factor_matrix,
    sample_noise,
    simple_sample,
    sweep_s,
    sweep_tu,
)
from .variance import (
    FactoredEstimator,
    closed_form_covariance,
    empirical_moments,
    sample_entry_estimates,
    theorem41_gap,
)
from .mlp import (
    BatchTape,
    CpNoise,
    DiagEstimate,
    Mlp,
    averaged_diagonal,
    becker_lecun_diagonal,
    diagonal_samples,
    init_mlp,
    load_checkpoint,
    mlp_as_graph,
    mlp_cp_diagonal,
    mlp_objective_and_gradient,
    mlp_simple_diagonal,
    sample_cp_noise,
    sample_weight_noise,
    save_checkpoint,
    train_sgd,
)
from .graphio import GraphFormatError, format_graph, load_graph, parse_graph
from .experiment import (
    ConfigError,
    ExperimentConfig,
    ResultRow,
    emit_outputs,
    parse_config_text,
    run_accuracy_experiment,
)

__version__ = "0.1.0"
