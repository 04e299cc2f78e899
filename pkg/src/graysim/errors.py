"""Exception types shared across the package."""


class GraysimError(Exception):
    """Base class for all graysim errors."""


class SingularMatrixError(GraysimError):
    """LU factorization hit a pivot below the singularity threshold."""


class DimensionMismatchError(GraysimError):
    """Vector/matrix shapes do not line up with the declared dimensions."""


class EmptyDatasetError(GraysimError):
    """Training was requested on a dataset with zero samples."""


class NonFiniteLossError(GraysimError):
    """Training loss became NaN/inf; carries the last finite model."""

    def __init__(self, message, last_model=None, loss_history=None):
        super().__init__(message)
        self.last_model = last_model
        self.loss_history = list(loss_history or [])


class ModelFormatError(GraysimError):
    """Model file is truncated, has a bad magic, or an unknown version."""


class OverflowGuardError(GraysimError):
    """Device exponent guard tripped; the operating point is unphysical."""


class VoltageCollapseError(GraysimError):
    """Constant-power load evaluated at (near-)zero voltage magnitude."""


class DeviceError(GraysimError):
    """Device evaluation failed; carries the offending subsystem id."""

    def __init__(self, subsystem_id, cause):
        super().__init__(f"subsystem '{subsystem_id}': {cause}")
        self.subsystem_id = subsystem_id
        self.cause = cause


class NetlistError(GraysimError):
    """Base for netlist parse/build problems."""


class ParseError(NetlistError):
    """Syntax error with the 1-based position of the offending token."""

    def __init__(self, line, column, message, token=""):
        super().__init__(f"line {line}, col {column}: {message}")
        self.line = line
        self.column = column
        self.message = message
        self.token = token


class DuplicateNodeError(ParseError):
    pass


class UnknownNodeError(ParseError):
    pass


class MissingAnalysisError(NetlistError):
    """Document has no analysis directive."""


class BuildError(NetlistError):
    """Document parsed but cannot be turned into a solvable system."""


class ModelDimMismatchError(BuildError):
    """Bound model's input/output dims disagree with the declared layout."""


class NotSquareError(BuildError):
    """Equations != unknowns (e.g. a node no device references)."""


class NonConvergenceError(GraysimError):
    """Newton iteration exhausted max_iter without meeting the tolerance."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class SingularJacobianError(GraysimError):
    """The NR Jacobian was singular; carries the iteration index."""

    def __init__(self, iteration, cause):
        super().__init__(f"singular Jacobian at NR iteration {iteration}: {cause}")
        self.iteration = iteration
