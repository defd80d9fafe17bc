"""
Model-implied moments.
The IR is laid out in all-factor form: factors (latents, then observed variables taking part in
regressions) follow eta = B eta + zeta, observed variables follow y = Lambda eta + eps, with
Cov(zeta) = Psi and Cov(eps) = Theta. Exogenous factors are their own zeta.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from miivbma.errors import ModelSpecError, NumericalError
from miivbma.models import Edge, ModelIR, ParamAssignment
from miivbma.parser import free_parameters


@dataclass(frozen=True)
class ModelMatrices:
    factors: list[str]
    observed: list[str]
    loadings: np.ndarray
    beta: np.ndarray
    psi: np.ndarray
    theta: np.ndarray

    def inverse_structure(self) -> np.ndarray:
        identity = np.eye(len(self.factors))
        try:
            return np.linalg.solve(identity - self.beta, identity)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("(I - B) is singular at the given parameter values") from exc

    def factor_covariance(self) -> np.ndarray:
        a = self.inverse_structure()
        return a @ self.psi @ a.T

    def implied(self) -> np.ndarray:
        return self.loadings @ self.factor_covariance() @ self.loadings.T + self.theta

    def disturbance_loadings(self) -> np.ndarray:
        # Cov(y, zeta): observed variables against every structural disturbance
        return self.loadings @ self.inverse_structure() @ self.psi


class ImpliedCovariance(NamedTuple):
    names: list[str]
    sigma: np.ndarray
    positive_definite: bool
    min_eigenvalue: float

    def entry(self, a: str, b: str) -> float:
        return float(self.sigma[self.names.index(a), self.names.index(b)])


def edge_value(edge: Edge, values: dict[str, float]) -> float:
    return edge.value if edge.value is not None else values[edge.ref]


def check_assignment(model: ModelIR, params: ParamAssignment):
    missing = [ref for ref in free_parameters(model) if ref not in params.values]
    if missing:
        raise ModelSpecError(f"parameter assignment misses {', '.join(missing)}")
    for edge in model.covariances:
        if edge.free and edge.lhs == edge.rhs and params.values[edge.ref] <= 0:
            raise ModelSpecError(f"variance {edge.ref} must be positive")


def model_matrices(model: ModelIR, values: dict[str, float]) -> ModelMatrices:
    factors = model.factors
    observed = model.observed
    f_index = {name: i for i, name in enumerate(factors)}
    o_index = {name: i for i, name in enumerate(observed)}

    loadings = np.zeros((len(observed), len(factors)))
    for edge in model.loadings:
        loadings[o_index[edge.rhs], f_index[edge.lhs]] = edge_value(edge, values)
    for name in model.structural_observed:
        loadings[o_index[name], f_index[name]] = 1.0

    beta = np.zeros((len(factors), len(factors)))
    for edge in model.regressions:
        beta[f_index[edge.lhs], f_index[edge.rhs]] = edge_value(edge, values)

    psi = np.zeros((len(factors), len(factors)))
    theta = np.zeros((len(observed), len(observed)))
    for edge in model.covariances:
        value = edge_value(edge, values)
        if edge.lhs in f_index:
            i, j = f_index[edge.lhs], f_index[edge.rhs]
            psi[i, j] = psi[j, i] = value
        else:
            i, j = o_index[edge.lhs], o_index[edge.rhs]
            theta[i, j] = theta[j, i] = value

    return ModelMatrices(factors, observed, loadings, beta, psi, theta)


def implied_covariance(model: ModelIR, params: ParamAssignment) -> ImpliedCovariance:
    """
    Model-implied covariance of the observed variables.

    A non-positive-definite result is returned with `positive_definite=False`; the caller decides
    whether that is fatal.
    """
    check_assignment(model, params)
    sigma = model_matrices(model, params.values).implied()
    sigma = (sigma + sigma.T) / 2
    min_eigenvalue = float(np.linalg.eigvalsh(sigma).min())
    return ImpliedCovariance(model.observed, sigma, min_eigenvalue > 0, min_eigenvalue)


def simulate_observed(matrices: ModelMatrices, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw observed variables through the structural equations rather than the reduced form."""
    zeta = rng.multivariate_normal(np.zeros(len(matrices.factors)), matrices.psi, size=n)
    eps = rng.multivariate_normal(np.zeros(len(matrices.observed)), matrices.theta, size=n)
    eta = zeta @ matrices.inverse_structure().T
    return eta @ matrices.loadings.T + eps
