import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .Coordinator import Preconditioner, aggregatePrecond
from .Geometry import se3RetractBatch
from .LazyCommunication import GradNormHistory, aggregateWhat
from .LocalModel import (LAMBDA_DEFAULT, LocalBlocks, ScaleGuardError,
                         denseReducedHessian, jacobiBlocks, linearize)
from .ProblemInstance import ProblemInstance, State, evaluateCost

logger = logging.getLogger(__name__)

DENSE_DIM_GUARD: int = 6000
DESCENT_TOLERANCE: float = 1e-10


class DescentInequality(Enum):
    """Conditions under which the Lyapunov function cannot increase."""
    STEPSIZE = '0 < gamma < 1/sigma_p'
    BETA_ONE = 'beta_1 = (gamma - sigma_p*gamma^2)/2'
    BETA_CHAIN = 'beta_d < beta_(d-1) - gamma*epsilon_(d-1)/2'
    BETA_LAST = 'beta_dbar > gamma*epsilon_dbar/2'


class InadmissibleParametersError(ValueError):
    def __init__(self, inequality: DescentInequality, detail: str):
        super().__init__(f'Inadmissible parameters, {inequality.value} '
                         f'fails: {detail}')
        self.inequality = inequality


@dataclass(frozen=True)
class DescentParams:
    gamma: float
    sigmaP: float
    beta: Tuple[float, ...]
    epsilon: Tuple[float, ...]

    @property
    def dbar(self) -> int:
        return len(self.beta)


@dataclass(frozen=True)
class AssumptionEstimates:
    """
    Sampled constants: extremal eigenvalues `mu`, `L` of the damped
    Gauss-Newton matrix, the smallest preconditioner eigenvalue `muP`,
    `sigmaP = ‖SP‖_P` and a lower bound `cG` on the pullback constant.
    """
    mu: float
    L: float
    muP: float
    sigmaP: float
    cG: float


@dataclass(frozen=True)
class DescentReport:
    values: np.ndarray
    differences: np.ndarray
    violations: Tuple[int, ...]

    @property
    def verdict(self) -> bool:
        return not self.violations


def lyapunov(cost: float, history: GradNormHistory | Sequence[float],
             beta: Sequence[float]) -> float:
    """
    `V = f + Σ_d β_d hist[d]`; entries missing from a short history count
    as zero.
    """
    if not isinstance(history, GradNormHistory):
        history = GradNormHistory.fromValues(max(len(beta), 1), history)
    if history.dbar != len(beta):
        raise ValueError(f'beta has {len(beta)} entries for a history of '
                         f'depth {history.dbar}.')
    return cost + history.weightedSum(beta)


def admissibleParams(gamma: float, sigmaP: float,
                     epsilon: Sequence[float]) -> DescentParams:
    """
    Constructs `β` satisfying every descent inequality strictly:
    `β_1 = (γ − σ_pγ²)/2`, then each `β_d` sits `slack` below its bound,
    with `slack` the feasibility margin `β_1 − (γ/2) Σ ε_d` spread over the
    `dbar` steps.

    Raises:
        InadmissibleParametersError: With the inequality that cannot hold.
    """
    epsilon = tuple(float(e) for e in np.atleast_1d(epsilon))
    if not epsilon or any(not e >= 0 for e in epsilon):
        raise ValueError(f'epsilon must be a nonempty nonnegative list, got '
                         f'{epsilon}.')
    if not sigmaP > 0:
        raise ValueError(f'sigma_p must be positive, got {sigmaP}.')
    if not 0 < gamma < 1.0 / sigmaP:
        raise InadmissibleParametersError(
            DescentInequality.STEPSIZE,
            f'gamma={gamma:.6g}, 1/sigma_p={1.0 / sigmaP:.6g}')

    dbar = len(epsilon)
    betaOne = (gamma - sigmaP * gamma * gamma) / 2.0
    margin = betaOne - 0.5 * gamma * sum(epsilon)
    if not margin > 0:
        raise InadmissibleParametersError(
            DescentInequality.BETA_LAST,
            f'sum(epsilon)={sum(epsilon):.6g} must stay below '
            f'2*beta_1/gamma={2.0 * betaOne / gamma:.6g}')

    slack = margin / dbar
    beta = [betaOne]
    for d in range(1, dbar):
        beta.append(beta[-1] - 0.5 * gamma * epsilon[d - 1] - slack)

    params = DescentParams(float(gamma), float(sigmaP), tuple(beta), epsilon)
    violated = verifyDescentParams(params)
    if violated:
        raise InadmissibleParametersError(
            violated[0], 'constructed coefficients failed the re-check')
    return params


def verifyDescentParams(params: DescentParams) -> List[DescentInequality]:
    """Every descent inequality `params` violates, re-checked directly."""
    gamma, sigmaP = params.gamma, params.sigmaP
    beta, epsilon = params.beta, params.epsilon
    violated = []
    if not 0 < gamma < 1.0 / sigmaP:
        violated.append(DescentInequality.STEPSIZE)
    if not np.isclose(beta[0], (gamma - sigmaP * gamma * gamma) / 2.0,
                      rtol=1e-12, atol=1e-300):
        violated.append(DescentInequality.BETA_ONE)
    if any(not beta[d] < beta[d - 1] - 0.5 * gamma * epsilon[d - 1]
           for d in range(1, len(beta))):
        violated.append(DescentInequality.BETA_CHAIN)
    if not beta[-1] > 0.5 * gamma * epsilon[-1]:
        violated.append(DescentInequality.BETA_LAST)
    return violated


def descentCoefficients(params: DescentParams) -> Tuple[float, ...]:
    """
    `(α_0, …, α_dbar)` with
    `V^{k+1} − V^k ≤ −α_0‖ŵ^k‖² − Σ_d α_d ‖ŵ^{k−d}‖²`:
    `α_0 = (γ − σ_pγ²)/2 − β_1`, `α_d = β_d − β_{d+1} − γε_d/2` and
    `α_dbar = β_dbar − γε_dbar/2`.
    """
    gamma, beta, epsilon = params.gamma, params.beta, params.epsilon
    alphas = [(gamma - params.sigmaP * gamma * gamma) / 2.0 - beta[0]]
    for d in range(len(beta) - 1):
        alphas.append(beta[d] - beta[d + 1] - 0.5 * gamma * epsilon[d])
    alphas.append(beta[-1] - 0.5 * gamma * epsilon[-1])
    return tuple(alphas)


def _checkDenseDim(dim: int):
    if dim > DENSE_DIM_GUARD:
        raise ScaleGuardError(f'Dense dimension {dim} exceeds the guard of '
                              f'{DENSE_DIM_GUARD}.')


def estimateSigmaP(S: np.ndarray, P: np.ndarray) -> float:
    """
    `‖SP‖_P`, the spectral norm of `P^{1/2} S P^{1/2}`.

    Raises:
        ScaleGuardError: Above `DENSE_DIM_GUARD` dims.
        ValueError: If `P` is not positive definite.
    """
    _checkDenseDim(len(S))
    eigenvalues, eigenvectors = np.linalg.eigh(0.5 * (P + P.T))
    if not eigenvalues[0] > 0:
        raise ValueError('The preconditioner must be positive definite.')
    root = (eigenvectors * np.sqrt(eigenvalues)) @ eigenvectors.T
    operator = root @ S @ root
    return float(np.max(np.abs(np.linalg.eigvalsh(
        0.5 * (operator + operator.T)))))


def denseSharedHessian(localBlocks: Sequence[LocalBlocks],
                       numPoints: int) -> np.ndarray:
    """`S = Σ_i S_i` scattered into the full `3m` shared dims."""
    _checkDenseDim(3 * numPoints)
    S = np.zeros((3 * numPoints, 3 * numPoints))
    for lb in localBlocks:
        dims = (3 * lb.blockIds[:, None] + np.arange(3)).reshape(-1)
        S[np.ix_(dims, dims)] += denseReducedHessian(lb)
    return S


def densePreconditioner(precond: Preconditioner) -> np.ndarray:
    _checkDenseDim(3 * precond.numBlocks)
    P = np.zeros((3 * precond.numBlocks, 3 * precond.numBlocks))
    for l, block in enumerate(precond.blocks):
        P[3 * l:3 * l + 3, 3 * l:3 * l + 3] = block
    return P


def denseGlobalModel(localBlocks: Sequence[LocalBlocks], numPoints: int) -> \
        Tuple[np.ndarray, np.ndarray]:
    """
    The full damped Gauss-Newton matrix and gradient, poses first (agent
    order) then shared points.  `M = Σ_i M_i`, each agent's point blocks
    carrying its own damping, so eliminating the poses gives `Σ_i S_i`.
    """
    poseDims = 6 * sum(lb.numPoses for lb in localBlocks)
    dim = poseDims + 3 * numPoints
    _checkDenseDim(dim)
    M = np.zeros((dim, dim))
    g = np.zeros(dim)
    offset = 0
    for lb in localBlocks:
        for j in range(lb.numPoses):
            rows = slice(offset + 6 * j, offset + 6 * j + 6)
            M[rows, rows] = lb.A[j]
            g[rows] = lb.gX[j]
        for j, l, block in zip(lb.pairPose, lb.pairBlock, lb.C):
            rows = slice(offset + 6 * j, offset + 6 * j + 6)
            point = poseDims + 3 * lb.blockIds[l]
            M[rows, point:point + 3] += block
            M[point:point + 3, rows] += block.T
        for l, block in enumerate(lb.B):
            point = poseDims + 3 * lb.blockIds[l]
            M[point:point + 3, point:point + 3] += block
            g[point:point + 3] += lb.gY[l]
        offset += 6 * lb.numPoses
    return 0.5 * (M + M.T), g


def linearizeAll(instance: ProblemInstance, state: State,
                 lam: float = LAMBDA_DEFAULT) -> List[LocalBlocks]:
    return [linearize(agent, state.rotations[i], state.translations[i],
                      state.points[agent.observedBlocks], lam)
            for i, agent in enumerate(instance.agents)]


def estimateInitialSigmaP(instance: ProblemInstance, state: State,
                          lam: float = LAMBDA_DEFAULT) -> float:
    """`σ_p` at `state` with a freshly aggregated Jacobi preconditioner."""
    localBlocks = linearizeAll(instance, state, lam)
    precond = aggregatePrecond(
        [(lb.blockIds, jacobiBlocks(lb).values) for lb in localBlocks],
        instance.numPoints)
    return estimateSigmaP(denseSharedHessian(localBlocks, instance.numPoints),
                          densePreconditioner(precond))


def lyapunovSeries(costs: Sequence[float], gradsqs: Sequence[float],
                   beta: Sequence[float]) -> np.ndarray:
    """`V^k` for recorded `f^k` and `‖ŵ^k‖²_P` sequences."""
    costs = np.asarray(costs, dtype=float)
    gradsqs = np.asarray(gradsqs, dtype=float)
    history = GradNormHistory(len(beta))
    values = np.zeros(len(costs))
    for k, cost in enumerate(costs):
        values[k] = lyapunov(cost, history, beta)
        history.push(gradsqs[k])
    return values


def checkDescentSeries(costs: Sequence[float], gradsqs: Sequence[float],
                       beta: Sequence[float],
                       tolerance: float = DESCENT_TOLERANCE) -> DescentReport:
    values = lyapunovSeries(costs, gradsqs, beta)
    differences = np.diff(values)
    allowed = tolerance * np.maximum(1.0, np.abs(values[:-1]))
    violations = tuple(int(k) for k in
                       np.flatnonzero(~(differences <= allowed)))
    if violations:
        logger.warning(f'Lyapunov increased at {len(violations)} '
                       f'iteration(s), first: {violations[0]}')
    return DescentReport(values, differences, violations)


def checkDescent(trace, beta: Sequence[float],
                 tolerance: float = DESCENT_TOLERANCE) -> DescentReport:
    """Lyapunov differences of a recorded run and the descent verdict."""
    return checkDescentSeries(trace.column('cost'),
                              trace.column('whatNormSq'), beta, tolerance)


def pullbackGap(pullback: Callable[[np.ndarray], float], value: float,
                gradient: np.ndarray, trials: int, radius: float,
                seed: int = 0) -> float:
    """
    `max 2|F(d) − F(0) − ⟨g, d⟩| / ‖d‖²` over random tangents `d` of norm
    `radius`.
    """
    if trials < 1 or not radius > 0:
        raise ValueError(f'Need trials >= 1 and radius > 0, got {trials}, '
                         f'{radius}.')
    rng = np.random.default_rng(seed)
    gradient = np.asarray(gradient, dtype=float)
    estimate = 0.0
    for _ in range(trials):
        direction = rng.normal(size=gradient.shape)
        direction *= radius / np.linalg.norm(direction)
        gap = abs(pullback(direction) - value - np.sum(gradient * direction))
        estimate = max(estimate, 2.0 * gap / (radius * radius))
    return estimate


def samplePullbackGap(instance: ProblemInstance, state: State, trials: int,
                      radius: float, seed: int = 0,
                      lam: float = LAMBDA_DEFAULT) -> float:
    """
    Lower bound on the pullback constant of `f ∘ Retr` at `state`; tangents
    are stacked poses (agent order) then points.
    """
    localBlocks = linearizeAll(instance, state, lam)
    gY = aggregateWhat([(lb.blockIds, lb.gY) for lb in localBlocks],
                       instance.numPoints)
    gradient = np.concatenate([lb.gX.reshape(-1) for lb in localBlocks]
                              + [gY.reshape(-1)])
    value, _ = evaluateCost(instance, state)
    sizes = np.cumsum([6 * a.numPoses for a in instance.agents])

    def pullback(tangent: np.ndarray) -> float:
        moved = state.copy()
        poseTangents = np.split(tangent[:sizes[-1]], sizes[:-1])
        for i, xi in enumerate(poseTangents):
            moved.rotations[i], moved.translations[i] = se3RetractBatch(
                state.rotations[i], state.translations[i], xi.reshape(-1, 6))
        moved.points = state.points + tangent[sizes[-1]:].reshape(-1, 3)
        cost, _ = evaluateCost(instance, moved)
        return cost

    return pullbackGap(pullback, value, gradient, trials, radius, seed)


def estimateAssumptions(instance: ProblemInstance, states: Sequence[State],
                        lam: float = LAMBDA_DEFAULT, trials: int = 20,
                        radius: float = 1e-3,
                        seed: int = 0) -> AssumptionEstimates:
    """Assumption constants sampled over the given iterates."""
    if not states:
        raise ValueError('Need at least one state to sample.')
    mu, L, muP, sigmaP, cG = np.inf, 0.0, np.inf, 0.0, 0.0
    for state in states:
        localBlocks = linearizeAll(instance, state, lam)
        M, _ = denseGlobalModel(localBlocks, instance.numPoints)
        eigenvalues = np.linalg.eigvalsh(M)
        mu, L = min(mu, eigenvalues[0]), max(L, eigenvalues[-1])

        precond = aggregatePrecond(
            [(lb.blockIds, jacobiBlocks(lb).values) for lb in localBlocks],
            instance.numPoints)
        muP = min(muP, float(np.linalg.eigvalsh(precond.blocks)[:, 0].min()))
        sigmaP = max(sigmaP, estimateSigmaP(
            denseSharedHessian(localBlocks, instance.numPoints),
            densePreconditioner(precond)))
        cG = max(cG, samplePullbackGap(instance, state, trials, radius,
                                       seed, lam))
    return AssumptionEstimates(float(mu), float(L), float(muP),
                               float(sigmaP), float(cG))


def convergenceTrend(gradNormSq: Sequence[float], kStart: int = 50,
                     kEnd: Optional[int] = None,
                     factor: float = 3.0) -> bool:
    """
    `k · min_{j≤k} ‖g^j‖²` stays within `factor` times its value at
    `kStart` for every `k` in `[kStart, kEnd]`.
    """
    values = np.asarray(gradNormSq, dtype=float)
    kEnd = len(values) - 1 if kEnd is None else kEnd
    if not 1 <= kStart <= kEnd < len(values):
        raise ValueError(f'Need 1 <= kStart <= kEnd < {len(values)}, got '
                         f'{kStart}, {kEnd}.')
    runningMin = np.minimum.accumulate(values)
    ks = np.arange(kStart, kEnd + 1)
    bound = factor * kStart * runningMin[kStart]
    return bool(np.all(ks * runningMin[kStart:kEnd + 1] <= bound))
