"""Exception types shared across the simulator."""


class SmartFreezeError(Exception):
    """Base class for all simulator errors."""


class ConfigurationError(SmartFreezeError):
    """Invalid model/experiment configuration (bad shapes, boundaries, ranges)."""


class InputError(SmartFreezeError):
    """Invalid runtime input (labels out of range, malformed batch)."""


class ContractError(SmartFreezeError):
    """A caller violated an API precondition."""


class InfeasibleStageError(SmartFreezeError):
    """Fewer eligible clients than the stage minimum."""

    def __init__(self, stage: int, eligible: int, minimum: int):
        self.stage = stage
        self.eligible = eligible
        self.minimum = minimum
        super().__init__(
            f"stage {stage}: only {eligible} eligible clients, "
            f"minimum required is {minimum}"
        )


class UndefinedSimilarityError(SmartFreezeError):
    """Cosine similarity requested for a zero gradient vector."""


class UndefinedCKAError(SmartFreezeError):
    """CKA requested for a zero-variance activation matrix."""


class ConfigError(SmartFreezeError):
    """Config file failed validation; carries every problem found."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
