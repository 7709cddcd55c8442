"""psdmap: power-spectral-density map estimation from linearly compressed,
quantized power measurements.

The package provides batch estimators (kernel ridge, interval-insensitive
support-vector fits, semiparametric and thin-plate-spline variants), an
online stochastic-subgradient estimator with a regret envelope, the
quantizers feeding them, and a reproducible simulation/evaluation harness.
"""

from .batch import (
    DesignMatrices,
    DualSolution,
    MapEstimate,
    assemble_design,
    assemble_ktilde_dense,
    assemble_ktilde_separable,
    evaluate_map,
    fit_ridge,
    fit_svm_cpd,
    fit_svm_nonparametric,
    fit_svm_semiparametric,
    theta_recovery_separable,
)
from .kernels import (
    DiagonalGaussianKernel,
    KernelMatrix,
    ScalarSeparableKernel,
    ThinPlateKernel,
    TpsPolynomialBasis,
    TransmitterPathlossBasis,
    assemble_basis_matrix,
    assemble_kernel,
    cpd_check,
    kernel_block,
    projector,
    scalar_gaussian_kernel,
    tps_radial,
)
from .model import (
    MeasurementRecord,
    SpectralBasis,
    compute_phi,
    ensemble_power,
    evaluate_psd,
)
from .online import (
    OnlineState,
    RegretLedger,
    instantaneous_cost,
    loss_subgradient,
    loss_value,
    make_distinct_state,
    make_shared_state,
    predict,
    regret_envelope,
    rkhs_norm_sq,
    step,
    suggested_truncation,
)
from .evaluate import (
    EstimatorSpec,
    ResultTable,
    SweepSpec,
    nmse,
    nmse_values,
    online_trace,
    run_sweep,
    sign_test_pvalue,
)
from .qpsolver import QpProblem, QpSolution, SolverError, solve_qp
from .quantize import (
    QuantizerSpec,
    calibrate_cpq,
    calibrate_uniform,
    interval_of,
    quantize,
    virtual_records,
)
from .simulate import (
    GroundTruthField,
    ScenarioConfig,
    SimulatedScenario,
    calibrate_noise_for_error_rate,
    calibrate_quantizer,
    gain_field,
    sample_shadowing,
    simulate_scenario,
    stream,
    synthesize_measurements,
)

__version__ = "0.1.0"
