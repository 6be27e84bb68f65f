from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from shared.config import settings


class SamplerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    warmup: int = Field(default=500, ge=1)
    draws: int = Field(default=500, ge=1)
    target_accept: float = Field(default=0.8, gt=0.0, lt=1.0)
    max_tree_depth: int = Field(default=10, ge=1, le=20)
    seed: int = Field(default=0, ge=0)
    chains: int = Field(default=4, ge=1)


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mode: Literal["direct", "drug"] = "direct"
    dynamic: bool = False
    delta_prior: Literal["lowrank", "diagonal"] = "lowrank"
    epsilon: float = Field(default_factory=lambda: settings.default_epsilon, gt=0.0, lt=1.0)
    k: int = Field(default=10, ge=1)
    metric: str = "euclidean"
    logdet_backend: Literal["auto", "spectrum", "cholesky"] = "auto"


class SimConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_items: int = Field(default=150, ge=1)
    n_conditions: int = Field(default=10, ge=1)
    n_drugs: Optional[int] = Field(default=None, ge=1)   # derived from the drug map when absent
    k: int = Field(default=10, ge=1)
    tau_s: float = Field(default=2.0, gt=0.0)
    tau_u: float = Field(default=2.0, gt=0.0)
    sigma_delta: float = Field(default=1.0, gt=0.0)
    # low-rank Sigma_delta; used instead of sigma_delta when sigma is given
    sigma: Optional[List[float]] = None
    rho: Optional[List[float]] = None
    xi: float = Field(default=0.0, gt=-1.0, lt=1.0)
    delta: Optional[List[float]] = None
    mask_fraction: float = Field(default=0.2, gt=0.0, lt=1.0)
    replications: int = Field(default=20, ge=1)
    seed: int = Field(default=0, ge=0)
    epsilon: float = Field(default=0.01, ge=0.0, lt=1.0)
    threshold: float = Field(default=0.5, gt=0.0, lt=1.0)
    # polypharmacy
    # None means min(3, n_conditions)
    n_anchors: Optional[int] = Field(default=None, ge=0)
    drugs_per_condition: int = Field(default=2, ge=1)
    # dynamic
    rho_ou: Optional[float] = Field(default=None, gt=0.0, lt=1.0)
    sigma_ou: Optional[float] = Field(default=None, gt=0.0)
    n_visits: int = Field(default=1, ge=1)
    visit_spacing: float = Field(default=1.0, gt=0.0)
    gap_probability: float = Field(default=0.0, ge=0.0, lt=1.0)
    miss_probability: float = Field(default=0.0, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def _check_lowrank(self):
        c = self.n_conditions
        if self.sigma is not None and len(self.sigma) != c:
            raise ValueError(f"sigma needs {c} entries, got {len(self.sigma)}")
        if self.rho is not None and len(self.rho) != c:
            raise ValueError(f"rho needs {c} entries, got {len(self.rho)}")
        if self.rho is not None and self.sigma is None:
            raise ValueError("rho given without sigma")
        if self.delta is not None and len(self.delta) != c:
            raise ValueError(f"delta needs {c} entries, got {len(self.delta)}")
        if self.n_anchors is not None and self.n_anchors > c:
            raise ValueError(f"n_anchors={self.n_anchors} exceeds n_conditions={c}")
        return self

    @property
    def anchors(self) -> int:
        return min(3, self.n_conditions) if self.n_anchors is None else self.n_anchors


class RunConfig(BaseModel):
    """One CLI invocation; `seed` is the master seed and overrides `sampler.seed`."""
    model_config = ConfigDict(extra="forbid")

    command: Literal["fit", "fit-dynamic", "predict", "simulate-fdr", "generate-data", "combine-shards"]
    data: Optional[str] = None
    output_dir: str = "depfa_out"
    seed: Optional[int] = Field(default=None, ge=0)
    shards: int = Field(default=1, ge=1)
    model: ModelConfig = Field(default_factory=ModelConfig)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    simulation: SimConfig = Field(default_factory=SimConfig)
    generator: Literal["static", "polypharmacy", "dynamic"] = "static"
    # predict
    manifest: Optional[str] = None
    covariates: Optional[str] = None
    k_predict: Optional[int] = Field(default=None, ge=1)
    # combine-shards
    shards_dir: Optional[str] = None

    @model_validator(mode="after")
    def _master_seed(self):
        if self.seed is None:
            self.seed = self.sampler.seed
        else:
            self.sampler.seed = self.seed
        if self.command == "fit-dynamic":
            self.model.dynamic = True
        return self


class DeltaSummary(BaseModel):
    condition: int
    mean: float
    lower: float
    upper: float


class ChainReport(BaseModel):
    chain: int
    seed: int
    step_size: float
    divergences: int
    warmup_divergences: int = 0
    mean_accept: float
    mean_tree_depth: float
