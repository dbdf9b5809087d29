from pathlib import Path


class Lare2Error(Exception):
    pass


class ParameterError(Lare2Error, ValueError):
    pass


class ShapeError(Lare2Error, ValueError):
    pass


class NumericError(Lare2Error, ArithmeticError):
    pass


class SamplingError(NumericError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class InversionError(NumericError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class TrainingError(Lare2Error):
    def __init__(self, message: str, last_finite_state: Path | None = None):
        if last_finite_state is not None:
            message = f"{message}; last finite state saved to {last_finite_state}"
        super().__init__(message)
        self.last_finite_state = last_finite_state


class DataError(Lare2Error):
    pass


class UndefinedMetricError(Lare2Error, ValueError):
    pass
