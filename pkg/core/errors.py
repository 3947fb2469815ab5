"""
Error hierarchy shared by every module; each class knows its CLI exit code
"""


class ShardTrainError(Exception):
    """Base class for all failures raised by this package"""
    exit_code = 1


class InvalidConfigError(ShardTrainError, ValueError):
    exit_code = 2


class ConfigError(InvalidConfigError):
    """Run-config validation failure, message is `file:line: reason`"""


class InvalidArgumentError(ShardTrainError, ValueError):
    exit_code = 2


class InvalidPlanError(InvalidArgumentError):
    pass


class InfeasibleBudgetError(ShardTrainError):
    """No checkpoint plan fits the budget; `min_peak` is the best achievable peak"""
    exit_code = 2

    def __init__(self, budget, min_peak):
        super().__init__(f"Memory budget {budget} is infeasible, "
                         f"minimum achievable peak is {min_peak}")
        self.budget = budget
        self.min_peak = min_peak


class ShapeError(ShardTrainError, ValueError):
    exit_code = 2


class NumericError(ShardTrainError, ArithmeticError):
    exit_code = 3


class StateError(ShardTrainError, RuntimeError):
    exit_code = 4


class ProtocolError(ShardTrainError, RuntimeError):
    exit_code = 4


class DeadlockTimeoutError(ProtocolError):
    pass


class CheckpointFormatError(ShardTrainError):
    exit_code = 4


class ReshardingRequiredError(CheckpointFormatError):
    pass


class MissingShardError(CheckpointFormatError):
    pass
