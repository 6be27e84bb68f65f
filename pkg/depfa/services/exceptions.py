from typing import Any, Dict, Optional


class DepfaError(Exception):
    """Base class for depfa exceptions; `details` is rendered in CLI error JSON."""
    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.details = details or {}

class ConfigError(DepfaError):
    """Raised when a run configuration is invalid or inconsistent."""

class DataError(DepfaError):
    """Raised when input data are malformed or violate dataset invariants."""

class GraphError(DataError):
    """Raised when a neighbor graph cannot be built from the given points."""

class FactorizationError(DepfaError):
    """Raised when a precision or covariance matrix cannot be factorized."""

class CovarianceError(FactorizationError):
    """Raised when the condition covariance stays indefinite after jitter."""

class SamplerError(DepfaError):
    """Raised when MCMC fails (e.g. every warmup transition diverged)."""

class ShardError(SamplerError):
    """Raised when a shard run fails; carries the shard id."""
    def __init__(self, shard_id: int, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(f"shard {shard_id} failed: {message}", {"shard_id": shard_id, **(details or {})})
        self.shard_id = shard_id

class EvaluationError(DepfaError):
    """Raised when a scoring routine has nothing to evaluate."""

class ValidationError(DepfaError):
    """Raised when validation fails; include details in message."""
