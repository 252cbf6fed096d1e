"""Exception hierarchy shared by every stage of the toolchain.

Each error carries a ``module`` tag so the CLI can prefix messages with the
stage that raised them.
"""


class QDeployError(Exception):
    module = "qdeploy"

    def __str__(self):
        return f"[{self.module}] {super().__str__()}"


class InvalidInputError(QDeployError, ValueError):
    module = "input"


class PlanError(QDeployError):
    module = "model-deploy"


class FormatError(PlanError):
    """A tensor's fixed-point format cannot satisfy the kernel's shift constraints."""

    def __init__(self, message, tensor=None):
        super().__init__(message)
        self.tensor = tensor


class NumericError(QDeployError, ArithmeticError):
    module = "autodiff-train"

    def __init__(self, message, node_id=None):
        super().__init__(message)
        self.node_id = node_id


class TrainingDiverged(NumericError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class StateError(QDeployError, RuntimeError):
    module = "autodiff-train"


class DataFormatError(QDeployError):
    module = "data-harness"

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class ManifestError(QDeployError):
    """Raised with every problem found in a manifest, not just the first."""

    module = "model-deploy"

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))
