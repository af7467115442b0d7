"""Shared exception types."""


class ConfigError(ValueError):
    """A search/scenario configuration is structurally invalid."""


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss."""


class SearchCancelled(RuntimeError):
    """A counterfactual search was cancelled before finishing."""
