"""graysim: hybrid simulation of systems mixing physics models and trained
neural macromodels over shared state variables.

Steady states solve by damped Newton-Raphson; transients by trapezoidal
integration with an inner Newton loop. At every iteration the macromodels
contribute a forward pass to the residual and an analytic input Jacobian to
the Newton matrix, so physical balance equations hold at any converged
solution regardless of how subsystems are modeled.
"""

from .errors import (
    BuildError,
    DeviceError,
    DimensionMismatchError,
    DuplicateNodeError,
    EmptyDatasetError,
    GraysimError,
    MissingAnalysisError,
    ModelDimMismatchError,
    ModelFormatError,
    NetlistError,
    NonConvergenceError,
    NonFiniteLossError,
    NotSquareError,
    OverflowGuardError,
    ParseError,
    SingularJacobianError,
    SingularMatrixError,
    UnknownNodeError,
    VoltageCollapseError,
)
from .linalg import inf_norm, lu_factor, lu_solve
from .neural import (
    Activation,
    Dataset,
    Mlp,
    TrainConfig,
    evaluate,
    forward,
    init_mlp,
    input_jacobian,
    load_model,
    preset_mlp,
    save_model,
    train,
)
from .devices import (
    Capacitor,
    Diode,
    ISource,
    InductionMotorReduced,
    Inductor,
    Mosfet,
    NeuralDevice,
    PqLoad,
    Resistor,
    TransmissionNetwork,
    VSource,
    diode_eval,
    mosfet_eval,
    motor_derivatives,
    motor_equilibrium,
    pq_residual,
    sweep_dataset,
)
from .graybox import (
    Analysis,
    GrayBoxSystem,
    Subsystem,
    TransientState,
    assemble_algebraic,
    assemble_trapezoidal,
    count_unknowns,
)
from .solvers import (
    SolveReport,
    SolverConfig,
    TimeSeries,
    fd_jacobian,
    nr_solve,
    solve_dc,
    transient_solve,
)
from .netlist import NetlistDoc, build, build_file, parse, parse_file, serialize

__version__ = "0.1.0"
