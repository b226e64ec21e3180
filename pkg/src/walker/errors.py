"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """Input shapes or fields do not match what an operation requires."""


class ConfigurationError(ValueError):
    """A morphology or run configuration is invalid or infeasible."""


class TrainingDivergence(RuntimeError):
    """A loss or gradient became non-finite during optimization."""


class SimulationBlowUp(RuntimeError):
    """The simulator produced a non-finite state."""

    def __init__(self, message: str, step_index: int):
        super().__init__(f"{message} (step {step_index})")
        self.step_index = step_index


class InsufficientData(ValueError):
    """A metric was asked to summarize a series that is too short."""


class AperiodicGait(ValueError):
    """A joint trajectory has no dominant periodic component."""


class CheckpointMismatch(ValueError):
    """A checkpoint does not belong to the requested configuration."""
