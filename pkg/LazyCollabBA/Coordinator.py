import logging
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .LazyCommunication import sumBlocks
from .LocalModel import symmetrize
from .SharedManifold import AbstractSharedManifold, EUCLIDEAN_POINTS

logger = logging.getLogger(__name__)

MIN_EIGENVALUE: float = 1e-12
JITTER_SCALE: float = 1e-9


class PreconditionerError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Preconditioner:
    """
    Block-Jacobi preconditioner: one SPD 3×3 block per shared point.

    Attributes:
        blocks (np.ndarray): (m, 3, 3) blocks `P_l`.
        jittered (np.ndarray): Ids of blocks that needed jitter.
    """
    blocks: np.ndarray
    jittered: np.ndarray

    @property
    def numBlocks(self) -> int:
        return len(self.blocks)

    def apply(self, w: np.ndarray) -> np.ndarray:
        return np.einsum('mij,mj->mi', self.blocks, w)


@dataclass(frozen=True)
class SharedStep:
    v: np.ndarray
    gradsq: float


def aggregatePrecond(dHats: Sequence[Tuple[np.ndarray, np.ndarray]],
                     numPoints: int) -> Preconditioner:
    """
    Sums the per-agent lazy Jacobi blocks `(blockIds, D̂_i)` in agent order
    and inverts each aggregate through its Cholesky factor.  Near-singular
    aggregates get `1e-9·trace/3·I` added once.

    Raises:
        PreconditionerError: If a block stays non-SPD after jitter, or is
            covered by no agent.
    """
    total = sumBlocks(dHats, numPoints)
    covered = np.zeros(numPoints, dtype=bool)
    for blockIds, _ in dHats:
        covered[blockIds] = True
    if not np.all(covered):
        block = int(np.flatnonzero(~covered)[0])
        raise PreconditionerError(f'Shared block {block} is covered by no '
                                  f'agent.')

    minEigenvalues = np.linalg.eigvalsh(total)[:, 0]
    needsJitter = ~(minEigenvalues >= MIN_EIGENVALUE)
    jittered = np.flatnonzero(needsJitter)
    if len(jittered):
        traces = np.trace(total[jittered], axis1=1, axis2=2)
        total[jittered] += (JITTER_SCALE * traces / 3.0)[:, None, None] * \
            np.eye(3)
        logger.warning(f'Jitter added to {len(jittered)} preconditioner '
                       f'block(s), first: {int(jittered[0])}')

    try:
        lower = np.linalg.cholesky(total)
    except np.linalg.LinAlgError as e:
        block = _firstFailingBlock(total)
        logger.error(f'Preconditioner block {block} is not SPD after '
                     f'jitter: {e}')
        raise PreconditionerError(
            f'Aggregated Jacobi block {block} is not positive definite '
            f'after jitter: {total[block].tolist()}') from e
    lowerInverse = np.linalg.inv(lower)
    blocks = symmetrize(np.swapaxes(lowerInverse, 1, 2) @ lowerInverse)
    if not np.all(np.isfinite(blocks)):
        block = int(np.flatnonzero(~np.isfinite(blocks).all(axis=(1, 2)))[0])
        raise PreconditionerError(f'Preconditioner block {block} is not '
                                  f'finite.')
    return Preconditioner(blocks, jittered)


def _firstFailingBlock(blocks: np.ndarray) -> int:
    for index, block in enumerate(blocks):
        try:
            np.linalg.cholesky(block)
        except np.linalg.LinAlgError:
            return index
    return -1


def computeStep(wHat: np.ndarray, precond: Preconditioner,
                gamma: float) -> SharedStep:
    """`v_l = −γ P_l ŵ_l` and `gradsq = Σ_l ŵ_lᵀ P_l ŵ_l`."""
    if not gamma > 0:
        raise ValueError(f'Stepsize gamma must be positive, got {gamma}.')
    preconditioned = precond.apply(wHat)
    return SharedStep(v=-gamma * preconditioned,
                      gradsq=float(np.sum(wHat * preconditioned)))


def applySharedStep(points: np.ndarray, v: np.ndarray,
                    manifold: AbstractSharedManifold = EUCLIDEAN_POINTS) -> \
        np.ndarray:
    return manifold.retract(points, v)
