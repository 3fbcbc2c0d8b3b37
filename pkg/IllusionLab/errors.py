class LabError(Exception):
    """Base class for every failure raised by the lab."""


class DimensionMismatchError(LabError, ValueError):
    pass


class NonFiniteError(LabError, ValueError):
    pass


class SvdConvergenceError(LabError, RuntimeError):
    # LAPACK bidiagonal QR iteration gives up after 6·n² sweeps, n = min(m, n)
    ITERATIONS_PER_SQUARED_DIM = 6

    def __init__(self, shape, drivers):
        """
        :param shape: shape of the matrix that failed to factor
        :param drivers: the LAPACK drivers that were tried, in order
        """
        self.shape = shape
        self.drivers = tuple(drivers)
        self.iteration_cap = self.ITERATIONS_PER_SQUARED_DIM * min(shape) ** 2
        super().__init__(
            f"SVD of a {shape[0]}x{shape[1]} matrix did not converge within {self.iteration_cap} iterations "
            f"(drivers tried: {', '.join(self.drivers)})"
        )


class NotPositiveDefiniteError(LabError, ValueError):
    pass


class NotUnitVectorError(LabError, ValueError):
    pass


class NotOrthonormalError(LabError, ValueError):
    pass


class UnknownSiteError(LabError, ValueError):
    pass


class KernelCheckError(LabError, ValueError):
    pass


class NearZeroLogitDiffError(LabError, ValueError):
    pass


class DegenerateInputError(LabError, ValueError):
    pass


class NotSeparableError(LabError, ValueError):
    pass


class DivergenceError(LabError, RuntimeError):
    def __init__(self, step, loss):
        self.step = step
        self.loss = loss
        super().__init__(f"training diverged at step {step} (mean loss {loss})")


class ConfigError(LabError, ValueError):
    pass


class InstanceFailedError(LabError, RuntimeError):
    def __init__(self, suite, seed, cause):
        self.suite = suite
        self.seed = seed
        self.cause = cause
        super().__init__(f"{suite} instance with seed {seed} failed: {type(cause).__name__}: {cause}")
