class ContractViolation(ValueError):
    """Raised when an operation's preconditions are not met."""


class NoSupervisedPositions(ContractViolation):
    def __init__(self, msg="no supervised positions"):
        super().__init__(msg)


class TrainingDiverged(RuntimeError):
    pass


class CorpusFormatError(ValueError):
    def __init__(self, line, msg):
        super().__init__(f"line {line}: {msg}")
        self.line = line
