from enum import Enum
from itertools import product
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from miivbma import constants

Operator = Literal["=~", "~", "~~"]


# Parser models
class Term(BaseModel):
    name: str
    value: float | None = None


class Statement(BaseModel):
    lhs: str
    op: Operator
    terms: list[Term]
    line: int
    column: int


# Model IR
class Edge(BaseModel):
    model_config = ConfigDict(frozen=True)

    lhs: str
    op: Operator
    rhs: str
    value: float | None = None

    @property
    def ref(self) -> str:
        return f"{self.lhs}{self.op}{self.rhs}"

    @property
    def free(self) -> bool:
        return self.value is None


class Intercept(BaseModel):
    model_config = ConfigDict(frozen=True)

    variable: str
    value: float | None = None

    @property
    def ref(self) -> str:
        return f"{self.variable}~1"


class ModelIR(BaseModel):
    """
    Parsed structural equation model.

    Observed variables that take part in regressions without being indicators are kept in
    `observed` and act as error-free single-indicator factors in the matrix form.
    """

    model_config = ConfigDict(frozen=True)

    latents: list[str]
    observed: list[str]
    loadings: list[Edge]
    regressions: list[Edge]
    covariances: list[Edge]
    intercepts: list[Intercept]
    scaling: dict[str, str]

    @property
    def indicators(self) -> list[str]:
        loaded = {edge.rhs for edge in self.loadings}
        return [name for name in self.observed if name in loaded]

    @property
    def structural_observed(self) -> list[str]:
        used = {edge.lhs for edge in self.regressions} | {edge.rhs for edge in self.regressions}
        return [name for name in self.observed if name in used]

    @property
    def factors(self) -> list[str]:
        return self.latents + self.structural_observed

    @property
    def endogenous(self) -> list[str]:
        outcomes = {edge.lhs for edge in self.regressions}
        return [name for name in self.factors if name in outcomes]

    @property
    def exogenous(self) -> list[str]:
        outcomes = {edge.lhs for edge in self.regressions}
        return [name for name in self.factors if name not in outcomes]

    @property
    def free_loadings(self) -> list[Edge]:
        return [edge for edge in self.loadings if edge.free]

    @property
    def factor_covariances(self) -> list[Edge]:
        factors = set(self.factors)
        return [
            edge
            for edge in self.covariances
            if edge.lhs != edge.rhs and edge.lhs in factors and edge.rhs in factors
        ]

    @property
    def error_covariances(self) -> list[Edge]:
        indicators = set(self.indicators)
        return [
            edge
            for edge in self.covariances
            if edge.lhs != edge.rhs and edge.lhs in indicators and edge.rhs in indicators
        ]

    def scaling_of(self, factor: str) -> str:
        # structural observed variables scale themselves
        return self.scaling.get(factor, factor)

    def loadings_on(self, indicator: str) -> list[Edge]:
        return [edge for edge in self.loadings if edge.rhs == indicator]


class ParamAssignment(BaseModel):
    values: dict[str, float]


# MIIV search models
class MiivSearchSettings(BaseModel):
    draws: int = Field(default=constants.MIIV_DRAWS, gt=0)
    tolerance: float = Field(default=constants.MIIV_TOLERANCE, gt=0)
    seed: int = constants.MIIV_SEED
    coefficient_range: tuple[float, float] = constants.COEFFICIENT_RANGE
    variance_range: tuple[float, float] = constants.VARIANCE_RANGE


class DisturbanceTerm(BaseModel):
    kind: Literal["error", "disturbance"]
    variable: str
    sign: int = 1
    coefficient: str | None = None
    value: float = 1.0

    def weight(self, values: dict[str, float]) -> float:
        scale = values[self.coefficient] if self.coefficient else 1.0
        return self.sign * self.value * scale

    @property
    def label(self) -> str:
        symbol = "ε" if self.kind == "error" else "ζ"
        factor = f"[{self.coefficient}]·" if self.coefficient else ""
        if self.value != 1.0:
            factor = f"{self.value:g}·" + factor
        return f"{'-' if self.sign < 0 else '+'} {factor}{symbol}({self.variable})"


class Offset(BaseModel):
    variable: str
    value: float


class EstimationEquation(BaseModel):
    equation_id: int
    kind: Literal["measurement", "structural"]
    outcome: str
    regressors: list[str]
    coefficients: list[str]
    offsets: list[Offset] = []
    disturbance_terms: list[DisturbanceTerm]
    miivs: list[str] = []

    @property
    def disturbance(self) -> str:
        return " ".join(term.label for term in self.disturbance_terms).removeprefix("+ ")

    @property
    def overidentified(self) -> bool:
        return len(self.miivs) > len(self.regressors)


# Estimator models
class EquationEstimate(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    names: list[str]
    theta: np.ndarray
    se: np.ndarray
    residuals: np.ndarray
    sigma2: float
    r2_first_stage: list[float]
    sargan_stat: float | None = None
    sargan_df: int | None = None
    sargan_p: float | None = None
    n: int


class EstimationSettings(BaseModel):
    vcov_denominator: Literal["n-k", "n"] = "n-k"


# BMA models
class BmaSettings(BaseModel):
    subset_cap: int = Field(default=constants.SUBSET_CAP, gt=0)
    subset_sample: int | None = Field(default=None, gt=0)
    seed: int = 0
    weak_threshold: float = constants.WEAK_THRESHOLD


class SubsetFit(BaseModel):
    subset: list[str]
    r2: list[float]
    g: list[float]
    log_bf: float
    pi: float
    theta: list[float]
    var_theta: list[float]
    sargan_stat: float
    sargan_p: float


class InstrumentDiagnostic(BaseModel):
    name: str
    inclusion_prob: float
    is_sargan_p: float
    weak: bool


class BmaEquationResult(BaseModel):
    outcome: str
    names: list[str]
    theta: list[float]
    var: list[float]
    bma_sargan_p: float
    instruments: list[InstrumentDiagnostic]
    ranked_suspects: list[str]
    suspects_tied: bool
    subset_fits: list[SubsetFit]
    dropped_subsets: list[list[str]] = []
    n: int

    @property
    def se(self) -> list[float]:
        return [float(np.sqrt(v)) for v in self.var]

    def instrument(self, name: str) -> InstrumentDiagnostic:
        return next(item for item in self.instruments if item.name == name)


# Simulation models
class SimulationConfig(BaseModel):
    design: Literal["sim1", "sim2"]
    ec: float = Field(ge=0)
    fc: float
    n: int = Field(gt=10)
    reps: int = Field(default=500, gt=0)
    seed: int = 1
    factor_variance: float = Field(default=constants.FACTOR_VARIANCE, gt=0)
    error_variance: float = Field(default=constants.ERROR_VARIANCE, gt=0)
    alpha: float = Field(default=constants.ALPHA, gt=0, lt=1)

    @model_validator(mode="after")
    def check_error_correlation(self):
        if self.ec >= self.error_variance:
            raise ValueError(
                f"error covariance {self.ec} must stay below the error variance "
                f"{self.error_variance}"
            )
        return self

    @model_validator(mode="after")
    def check_positive_definite(self):
        loadings = np.kron(np.eye(2), np.ones((4, 1)))
        psi = self.factor_variance * np.array([[1.0, self.fc], [self.fc, 1.0]])
        theta = self.error_variance * np.eye(len(constants.INDICATORS))
        first, second = constants.OMITTED_COVARIANCE[self.design]
        i, j = constants.INDICATORS.index(first), constants.INDICATORS.index(second)
        theta[i, j] = theta[j, i] = self.ec
        smallest = float(np.linalg.eigvalsh(loadings @ psi @ loadings.T + theta)[0])
        if smallest <= 0:
            raise ValueError(
                f"population covariance is not positive definite "
                f"(smallest eigenvalue {smallest:.3g})"
            )
        return self

    @property
    def key(self) -> str:
        return f"{self.design}_ec{self.ec:g}_fc{self.fc:g}_n{self.n}"


class GridConfig(BaseModel):
    designs: list[Literal["sim1", "sim2"]] = ["sim1", "sim2"]
    ecs: list[float] = [0.1, 0.6]
    fcs: list[float] = [0.1, 0.8]
    ns: list[int] = [100, 500]
    reps: int = Field(default=500, gt=0)
    seed: int = 1
    factor_variance: float = constants.FACTOR_VARIANCE
    error_variance: float = constants.ERROR_VARIANCE
    alpha: float = constants.ALPHA

    def conditions(self) -> list[SimulationConfig]:
        return [
            SimulationConfig(
                design=design,
                ec=ec,
                fc=fc,
                n=n,
                reps=self.reps,
                seed=self.seed,
                factor_variance=self.factor_variance,
                error_variance=self.error_variance,
                alpha=self.alpha,
            )
            for design, ec, fc, n in product(self.designs, self.ecs, self.fcs, self.ns)
        ]


class EstimatorSummary(BaseModel):
    median_bias: float
    mean_abs_bias: float
    sargan_power: float
    mean_se: float


class ConditionSummary(BaseModel):
    config: SimulationConfig
    invalid_instrument: str
    instruments: list[str]
    estimators: dict[str, EstimatorSummary]
    is_sargan_power: dict[str, float]
    specificity: dict[str, float]
    mean_inclusion_prob: dict[str, float]
    completed: int
    failures: int


# Report models
class Estimator(str, Enum):
    two_sls = "2sls"
    two_sbma = "2sbma"


class FitSettings(BaseModel):
    estimator: Estimator = Estimator.two_sls
    alpha: float = Field(default=constants.ALPHA, gt=0, lt=1)
    bma: BmaSettings = BmaSettings()
    estimation: EstimationSettings = EstimationSettings()
    audit_subsets: bool = False
    equations: list[str] | None = None


class CoefficientRow(BaseModel):
    name: str
    estimate: float
    se: float


class SarganRow(BaseModel):
    kind: Literal["classical", "bma"]
    p: float
    stat: float | None = None
    df: int | None = None
    reject: bool


class EquationReport(BaseModel):
    outcome: str
    estimator: str
    regressors: list[str]
    miivs: list[str]
    coefficients: list[CoefficientRow]
    sargan: SarganRow | None = None
    instruments: list[InstrumentDiagnostic] = []
    ranked_suspects: list[str] = []
    suspects_tied: bool = False
    subsets: list[SubsetFit] | None = None
    dropped_subsets: list[list[str]] = []
    note: str | None = None


class Provenance(BaseModel):
    version: str
    model_path: str
    model_sha256: str
    data_path: str
    data_sha256: str
    rows_used: int
    rows_dropped: int
    miiv_seed: int
    settings: FitSettings


class FitReport(BaseModel):
    equations: list[EquationReport]
    provenance: Provenance
