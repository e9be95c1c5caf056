# tamt/errors.py


class TamtError(Exception):
    """所有领域错误的基类。"""


class DimensionError(TamtError):
    pass


class NumericError(TamtError):
    pass


class EmptyLossError(TamtError):
    pass


class DegenerateVectorError(TamtError):
    pass


class InvalidArgumentError(TamtError):
    pass


class UnknownTaskError(TamtError):
    pass


class ConfigError(TamtError):
    pass


class CheckpointFormatError(TamtError):
    pass


class CorpusError(TamtError):
    pass


class ScheduleError(TamtError):
    pass


class TrainingAbortedError(TamtError):
    """训练损失非有限时中止，附带诊断信息。"""

    def __init__(self, message, step=None, recent_losses=None):
        super().__init__(message)
        self.step = step
        self.recent_losses = list(recent_losses or [])

    def __str__(self):
        base = super().__str__()
        if self.step is None:
            return base
        tail = ', '.join(f'{v:.6g}' for v in self.recent_losses[-5:])
        return f'{base} (step={self.step}, recent losses=[{tail}])'
