import logging
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from .ProblemInstance import AgentData, evaluateResidualJacobians

logger = logging.getLogger(__name__)

LAMBDA_DEFAULT: float = 1e6
DENSE_BLOCK_GUARD: int = 2000


class ScaleGuardError(ValueError):
    pass


@dataclass(frozen=True)
class LocalBlocks:
    """
    One agent's Gauss-Newton model at the current iterate,
    `m_i(u, v) = f_i + g·(u, v) + ½ (u, v)ᵀ M_i (u, v)` with
    `M_i = [[A, C], [Cᵀ, B]]`.

    Attributes:
        blockIds (np.ndarray): Shared block ids `L_i`; rows of `B`/`gY`.
        A (np.ndarray): (n, 6, 6) per-pose blocks, damped.
        AInverse (np.ndarray): (n, 6, 6) inverses of `A` via Cholesky.
        B (np.ndarray): (b, 3, 3) per-point blocks, damped.
        pairPose (np.ndarray): (p,) pose index of each `C` block.
        pairBlock (np.ndarray): (p,) local block index of each `C` block.
        C (np.ndarray): (p, 6, 3) coupling blocks, one per observed
            (pose, point) pair, sorted by pose then block.
        gX (np.ndarray): (n, 6) pose gradients.
        gY (np.ndarray): (b, 3) point gradients.
        cost (float): `f_i` at the linearization point.
    """
    agentId: int
    lam: float
    blockIds: np.ndarray
    A: np.ndarray
    AInverse: np.ndarray
    B: np.ndarray
    pairPose: np.ndarray
    pairBlock: np.ndarray
    C: np.ndarray
    gX: np.ndarray
    gY: np.ndarray
    cost: float
    numInvalid: int = 0

    @property
    def numPoses(self) -> int:
        return len(self.A)

    @property
    def numBlocks(self) -> int:
        return len(self.B)


@dataclass(frozen=True)
class ReducedGradient:
    blockIds: np.ndarray
    values: np.ndarray

    def asDict(self) -> Dict[int, np.ndarray]:
        return dict(zip(self.blockIds.tolist(), self.values))


@dataclass(frozen=True)
class JacobiBlocks:
    blockIds: np.ndarray
    values: np.ndarray

    def asDict(self) -> Dict[int, np.ndarray]:
        return dict(zip(self.blockIds.tolist(), self.values))


def symmetrize(blocks: np.ndarray) -> np.ndarray:
    return 0.5 * (blocks + np.swapaxes(blocks, -1, -2))


def choleskyInverse(blocks: np.ndarray) -> np.ndarray:
    """Inverses of a stack of SPD blocks through their Cholesky factors."""
    if len(blocks) == 0:
        return blocks.copy()
    lowerInverse = np.linalg.inv(np.linalg.cholesky(blocks))
    return symmetrize(np.swapaxes(lowerInverse, -1, -2) @ lowerInverse)


def linearize(agent: AgentData, rotations: np.ndarray,
              translations: np.ndarray, blockPoints: np.ndarray,
              lam: float = LAMBDA_DEFAULT) -> LocalBlocks:
    """
    Accumulates `g = Σ 2w Jᵀr` and `M = Σ 2w JᵀJ + λI` over the agent's
    observations, with `J = ∂r/∂(u, v)` through the pose retraction.

    Args:
        blockPoints (np.ndarray): Current shared points restricted to
            `agent.observedBlocks`.

    Raises:
        ValueError: If `lam` is not positive.
    """
    if not lam > 0:
        raise ValueError(f'Damping lambda must be positive, got {lam}.')

    residuals, jPose, jPoint, valid = evaluateResidualJacobians(
        agent, rotations, translations, blockPoints)
    numInvalid = int(np.count_nonzero(~valid))
    if numInvalid:
        logger.warning(f'Agent {agent.agentId}: {numInvalid} observation(s) '
                       f'behind the camera skipped')

    twiceWeight = 2.0 * agent.obsWeight
    numPoses, numBlocks = agent.numPoses, agent.numBlocks

    gX = np.zeros((numPoses, 6))
    np.add.at(gX, agent.obsPose, twiceWeight[:, None] *
              np.einsum('kij,ki->kj', jPose, residuals))
    gY = np.zeros((numBlocks, 3))
    np.add.at(gY, agent.obsBlock, twiceWeight[:, None] *
              np.einsum('kij,ki->kj', jPoint, residuals))

    A = np.zeros((numPoses, 6, 6))
    np.add.at(A, agent.obsPose, twiceWeight[:, None, None] *
              np.einsum('kij,kil->kjl', jPose, jPose))
    A += lam * np.eye(6)
    A = symmetrize(A)

    B = np.zeros((numBlocks, 3, 3))
    np.add.at(B, agent.obsBlock, twiceWeight[:, None, None] *
              np.einsum('kij,kil->kjl', jPoint, jPoint))
    B += lam * np.eye(3)
    B = symmetrize(B)

    pairKeys, pairIndex = np.unique(
        agent.obsPose * max(numBlocks, 1) + agent.obsBlock,
        return_inverse=True)
    C = np.zeros((len(pairKeys), 6, 3))
    np.add.at(C, pairIndex, twiceWeight[:, None, None] *
              np.einsum('kij,kil->kjl', jPose, jPoint))

    cost = float(np.sum(agent.obsWeight * np.sum(residuals * residuals,
                                                 axis=1)))
    return LocalBlocks(
        agentId=agent.agentId,
        lam=float(lam),
        blockIds=agent.observedBlocks,
        A=A,
        AInverse=choleskyInverse(A),
        B=B,
        pairPose=(pairKeys // max(numBlocks, 1)).astype(np.int64),
        pairBlock=(pairKeys % max(numBlocks, 1)).astype(np.int64),
        C=C,
        gX=gX,
        gY=gY,
        cost=cost,
        numInvalid=numInvalid)


def reducedGradient(lb: LocalBlocks) -> ReducedGradient:
    """`w_i = g_iy − C_iᵀ A_i⁻¹ g_ix`, one pose block at a time."""
    eliminated = np.einsum('pij,pj->pi', lb.AInverse[lb.pairPose],
                           lb.gX[lb.pairPose])
    correction = np.zeros_like(lb.gY)
    np.add.at(correction, lb.pairBlock,
              np.einsum('pij,pi->pj', lb.C, eliminated))
    return ReducedGradient(lb.blockIds, lb.gY - correction)


def jacobiBlocks(lb: LocalBlocks) -> JacobiBlocks:
    """Diagonal blocks `S_{i,l} = B_l − Σ_j C_jlᵀ A_j⁻¹ C_jl`."""
    correction = np.zeros_like(lb.B)
    np.add.at(correction, lb.pairBlock,
              np.swapaxes(lb.C, 1, 2) @ lb.AInverse[lb.pairPose] @ lb.C)
    return JacobiBlocks(lb.blockIds, symmetrize(lb.B - correction))


def privateUpdate(lb: LocalBlocks, v: np.ndarray) -> np.ndarray:
    """
    Minimizer of the local model over the poses for a fixed shared step,
    `u*(v) = −A⁻¹(C v + g_x)`.

    Args:
        v (np.ndarray): (b, 3) shared step restricted to `lb.blockIds`.

    Returns:
        np.ndarray: (n, 6) pose tangents ordered `(omega, vee)`.
    """
    v = np.asarray(v, dtype=float)
    if v.shape != (lb.numBlocks, 3):
        raise ValueError(f'Expected a ({lb.numBlocks}, 3) shared step, got '
                         f'{v.shape}.')
    coupled = np.zeros_like(lb.gX)
    np.add.at(coupled, lb.pairPose,
              np.einsum('pij,pj->pi', lb.C, v[lb.pairBlock]))
    return -np.einsum('nij,nj->ni', lb.AInverse, coupled + lb.gX)


def denseBlocks(lb: LocalBlocks) -> \
        Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Dense `A`, `B`, `C`, `g_x`, `g_y` for oracles at desk scale."""
    if lb.numBlocks > DENSE_BLOCK_GUARD:
        raise ScaleGuardError(f'{lb.numBlocks} shared blocks exceed the '
                              f'dense guard of {DENSE_BLOCK_GUARD}.')
    n, b = lb.numPoses, lb.numBlocks
    A = np.zeros((6 * n, 6 * n))
    for j in range(n):
        A[6 * j:6 * j + 6, 6 * j:6 * j + 6] = lb.A[j]
    B = np.zeros((3 * b, 3 * b))
    for l in range(b):
        B[3 * l:3 * l + 3, 3 * l:3 * l + 3] = lb.B[l]
    C = np.zeros((6 * n, 3 * b))
    for j, l, block in zip(lb.pairPose, lb.pairBlock, lb.C):
        C[6 * j:6 * j + 6, 3 * l:3 * l + 3] = block
    return A, B, C, lb.gX.reshape(-1), lb.gY.reshape(-1)


def denseReducedHessian(lb: LocalBlocks) -> np.ndarray:
    """
    The full Schur complement `S_i = B_i − C_iᵀ A_i⁻¹ C_i` over `3|L_i|`
    dims.

    Raises:
        ScaleGuardError: Above `DENSE_BLOCK_GUARD` blocks.
    """
    _, B, C, _, _ = denseBlocks(lb)
    AInverse = np.zeros((6 * lb.numPoses, 6 * lb.numPoses))
    for j in range(lb.numPoses):
        AInverse[6 * j:6 * j + 6, 6 * j:6 * j + 6] = lb.AInverse[j]
    S = B - C.T @ AInverse @ C
    return 0.5 * (S + S.T)


def quadraticModel(lb: LocalBlocks, u: np.ndarray, v: np.ndarray) -> float:
    """`m_i(u, v)` evaluated blockwise."""
    u = np.asarray(u, dtype=float).reshape(lb.numPoses, 6)
    v = np.asarray(v, dtype=float).reshape(lb.numBlocks, 3)
    linear = np.sum(lb.gX * u) + np.sum(lb.gY * v)
    quadratic = (np.einsum('ni,nij,nj->', u, lb.A, u)
                 + 2.0 * np.einsum('pi,pij,pj->', u[lb.pairPose], lb.C,
                                   v[lb.pairBlock])
                 + np.einsum('bi,bij,bj->', v, lb.B, v))
    return float(lb.cost + linear + 0.5 * quadratic)


def reducedModel(lb: LocalBlocks, v: np.ndarray) -> float:
    """
    `h_i(v) = f_i − ½ g_xᵀA⁻¹g_x + w_iᵀv + ½ vᵀS_iv`, the local model with
    the poses eliminated.
    """
    v = np.asarray(v, dtype=float).reshape(-1)
    w = reducedGradient(lb).values.reshape(-1)
    S = denseReducedHessian(lb)
    eliminated = np.einsum('ni,nij,nj->', lb.gX, lb.AInverse, lb.gX)
    return float(lb.cost - 0.5 * eliminated + w @ v + 0.5 * v @ S @ v)
