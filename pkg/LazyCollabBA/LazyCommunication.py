import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .SharedManifold import AbstractSharedManifold, EUCLIDEAN_POINTS

logger = logging.getLogger(__name__)

ABSENT: int = -1


class ProtocolViolationError(RuntimeError):
    pass


class MScaling(Enum):
    GLOBAL_M = 'global_m'
    PER_AGENT_OBSERVED = 'per_agent_observed'

    @classmethod
    def _missing_(cls, key):
        if isinstance(key, str):
            value = cls.__members__.get(key.upper())
            if value is not None:
                return value
        raise ValueError(f'Invalid key "{key}" for {cls.__name__}')


@dataclass(frozen=True)
class LazyConfig:
    """
    Triggering thresholds.  `deltaP = inf` freezes the preconditioner after
    each block's first upload; `epsilon` all zero uploads every changed
    gradient block.  A single epsilon value is broadcast to `dbar` entries.

    `maxStaleness` bounds the age of a cached gradient block: a block last
    uploaded that many iterations ago is uploaded again whatever the
    trigger says.  `None` leaves the trigger alone in charge.
    """
    DELTA_P_DEFAULT = 0.1
    EPSILON_DEFAULT = 10.0
    DBAR_DEFAULT = 10
    MAX_STALENESS_DEFAULT = 2

    deltaP: float = DELTA_P_DEFAULT
    epsilon: Tuple[float, ...] = (EPSILON_DEFAULT,) * DBAR_DEFAULT
    dbar: int = DBAR_DEFAULT
    mScaling: MScaling = MScaling.PER_AGENT_OBSERVED
    maxStaleness: Optional[int] = MAX_STALENESS_DEFAULT

    def __post_init__(self):
        if int(self.dbar) != self.dbar or self.dbar < 1:
            raise ValueError(f'dbar must be a positive integer, got '
                             f'{self.dbar}.')
        if self.maxStaleness is not None:
            if int(self.maxStaleness) != self.maxStaleness or \
                    self.maxStaleness < 1:
                raise ValueError(f'max_staleness must be a positive integer '
                                 f'or None, got {self.maxStaleness}.')
            object.__setattr__(self, 'maxStaleness', int(self.maxStaleness))
        epsilon = tuple(float(e) for e in np.atleast_1d(self.epsilon))
        if len(epsilon) == 1:
            epsilon = epsilon * self.dbar
        if len(epsilon) != self.dbar:
            raise ValueError(f'epsilon needs 1 or {self.dbar} entries, got '
                             f'{len(epsilon)}.')
        if any(not e >= 0 for e in epsilon):
            raise ValueError(f'epsilon entries must be nonnegative, got '
                             f'{epsilon}.')
        if not self.deltaP >= 0:
            raise ValueError(f'delta_p must be nonnegative, got '
                             f'{self.deltaP}.')
        object.__setattr__(self, 'epsilon', epsilon)
        object.__setattr__(self, 'dbar', int(self.dbar))
        object.__setattr__(self, 'deltaP', float(self.deltaP))
        object.__setattr__(self, 'mScaling', MScaling(self.mScaling))

    @property
    def freezesPreconditioner(self) -> bool:
        return np.isinf(self.deltaP)


class GradNormHistory:
    """
    The last `dbar` values of `‖ŵ‖²_P`, most recent first; `self[d]` is the
    value from `d` iterations ago (1-based).
    """

    def __init__(self, dbar: int):
        self.dbar = int(dbar)
        self._values = deque(maxlen=self.dbar)

    def push(self, value: float):
        if not value >= 0:
            raise ValueError(f'Gradient norm must be nonnegative, got '
                             f'{value}.')
        self._values.appendleft(float(value))

    def __getitem__(self, d: int) -> float:
        if not 1 <= d <= self.dbar:
            raise IndexError(f'History lag must be in [1, {self.dbar}].')
        return self._values[d - 1] if d <= len(self._values) else 0.0

    def __len__(self) -> int:
        return len(self._values)

    def values(self) -> List[float]:
        return list(self._values)

    def weightedSum(self, weights: Sequence[float]) -> float:
        """`Σ_d weights[d-1]·hist[d]`; missing entries count as zero."""
        total = 0.0
        for weight, value in zip(weights, self._values):
            total += weight * value
        return total

    def copy(self) -> 'GradNormHistory':
        other = GradNormHistory(self.dbar)
        other._values.extend(self._values)
        return other

    @classmethod
    def fromValues(cls, dbar: int, values: Iterable[float]) -> \
            'GradNormHistory':
        history = cls(dbar)
        for value in reversed(list(values)):
            history.push(value)
        return history


@dataclass
class BlockCache:
    """
    Last uploaded `S` and `w` per observed block of one agent, aligned with
    `blockIds`.  An upload iteration of `ABSENT` means nothing was uploaded
    yet.  Agent and server each hold one and commit the same uploads.
    """
    blockIds: np.ndarray
    lastS: np.ndarray = field(init=False)
    lastSIter: np.ndarray = field(init=False)
    sBase: np.ndarray = field(init=False)
    lastW: np.ndarray = field(init=False)
    lastWIter: np.ndarray = field(init=False)
    wBase: np.ndarray = field(init=False)

    def __post_init__(self):
        numBlocks = len(self.blockIds)
        self.lastS = np.zeros((numBlocks, 3, 3))
        self.lastSIter = np.full(numBlocks, ABSENT, dtype=np.int64)
        self.sBase = np.zeros((numBlocks, 3))
        self.lastW = np.zeros((numBlocks, 3))
        self.lastWIter = np.full(numBlocks, ABSENT, dtype=np.int64)
        self.wBase = np.zeros((numBlocks, 3))

    @property
    def hasS(self) -> np.ndarray:
        return self.lastSIter != ABSENT

    @property
    def hasW(self) -> np.ndarray:
        return self.lastWIter != ABSENT

    def localIndex(self, blockIds: np.ndarray) -> np.ndarray:
        """
        Raises:
            ProtocolViolationError: If a block is outside this cache.
        """
        blockIds = np.asarray(blockIds, dtype=np.int64)
        index = np.searchsorted(self.blockIds, blockIds)
        index = np.minimum(index, max(len(self.blockIds) - 1, 0))
        if len(blockIds) and (len(self.blockIds) == 0 or
                              np.any(self.blockIds[index] != blockIds)):
            raise ProtocolViolationError(
                f'Upload references block(s) outside the observed set: '
                f'{np.setdiff1d(blockIds, self.blockIds)[:5].tolist()}.')
        return index

    def commitS(self, index: np.ndarray, values: np.ndarray, iteration: int,
                basePoints: np.ndarray):
        self.lastS[index] = values
        self.lastSIter[index] = iteration
        self.sBase[index] = basePoints

    def commitW(self, index: np.ndarray, values: np.ndarray, iteration: int,
                basePoints: np.ndarray):
        self.lastW[index] = values
        self.lastWIter[index] = iteration
        self.wBase[index] = basePoints

    def equals(self, other: 'BlockCache') -> bool:
        return all(np.array_equal(getattr(self, name), getattr(other, name))
                   for name in ('blockIds', 'lastS', 'lastSIter', 'sBase',
                                'lastW', 'lastWIter', 'wBase'))


def approxPrecondBlocks(cache: BlockCache, currentPoints: np.ndarray,
                        manifold: AbstractSharedManifold = EUCLIDEAN_POINTS
                        ) -> Tuple[np.ndarray, np.ndarray]:
    """
    Cached `S` blocks conjugated into the current tangent spaces.

    Returns:
        Tuple[np.ndarray, np.ndarray]: (b, 3, 3) approximations and the (b,)
            presence mask; absent rows must be uploaded.
    """
    return (manifold.transportOperator(cache.sBase, currentPoints,
                                       cache.lastS),
            cache.hasS)


def approxGradBlocks(cache: BlockCache, currentPoints: np.ndarray,
                     manifold: AbstractSharedManifold = EUCLIDEAN_POINTS
                     ) -> Tuple[np.ndarray, np.ndarray]:
    return (manifold.transportVector(cache.wBase, currentPoints,
                                     cache.lastW),
            cache.hasW)


def precondTrigger(sNew: np.ndarray, sTilde: np.ndarray,
                   deltaP: float) -> np.ndarray:
    """
    `‖S − S̃‖_F > δ_p ‖S‖_F` per block.  A zero `S` uploads iff `S̃` is
    nonzero; `δ_p = inf` never triggers.  At `δ_p = 0` any differing entry
    uploads, even when the difference underflows the norm.
    """
    sNew = np.asarray(sNew, dtype=float)
    sTilde = np.asarray(sTilde, dtype=float)
    if np.isinf(deltaP):
        return np.zeros(sNew.shape[:-2], dtype=bool)
    difference = np.linalg.norm(sNew - sTilde, axis=(-2, -1))
    reference = np.linalg.norm(sNew, axis=(-2, -1))
    upload = difference > deltaP * reference
    differs = np.any(sNew != sTilde, axis=(-2, -1))
    upload = np.where(reference == 0, np.any(sTilde != 0, axis=(-2, -1)),
                      upload)
    if deltaP == 0:
        upload = upload | differs
    return upload


def mScale(numObserved: int, numPoints: int, config: LazyConfig) -> int:
    return (numObserved if config.mScaling is MScaling.PER_AGENT_OBSERVED
            else numPoints)


def gradThreshold(history: GradNormHistory, config: LazyConfig, scale: int,
                  numAgents: int) -> float:
    """`(1 / (m N²)) Σ_d ε_d hist[d]`; zero with an empty history."""
    if scale <= 0:
        return 0.0
    return history.weightedSum(config.epsilon) / (scale * numAgents ** 2)


def gradErrorSq(wNew: np.ndarray, wTilde: np.ndarray,
                precond: np.ndarray) -> np.ndarray:
    """`(w̃ − w)ᵀ P_l (w̃ − w)` per block."""
    error = np.asarray(wTilde, dtype=float) - np.asarray(wNew, dtype=float)
    return np.einsum('...i,...ij,...j->...', error, precond, error)


def gradTrigger(wNew: np.ndarray, wTilde: np.ndarray, precond: np.ndarray,
                history: GradNormHistory, config: LazyConfig, scale: int,
                numAgents: int) -> np.ndarray:
    """
    Gradient triggering condition per block: upload iff the stale value's
    error in the `P_l` norm exceeds the history threshold.  With a zero
    threshold any differing entry uploads.
    """
    threshold = gradThreshold(history, config, scale, numAgents)
    upload = gradErrorSq(wNew, wTilde, precond) > threshold
    if threshold == 0:
        upload = upload | np.any(np.asarray(wNew) != np.asarray(wTilde),
                                 axis=-1)
    return upload


def staleGradBlocks(cache: BlockCache, iteration: int,
                    maxStaleness: Optional[int]) -> np.ndarray:
    """Cached gradient blocks whose last upload is `maxStaleness` or more
    iterations old."""
    if maxStaleness is None:
        return np.zeros(len(cache.blockIds), dtype=bool)
    return cache.hasW & (iteration - cache.lastWIter >= maxStaleness)


def assembleDhat(cache: BlockCache, uploadIndex: np.ndarray,
                 uploadValues: np.ndarray, currentPoints: np.ndarray,
                 iteration: int,
                 manifold: AbstractSharedManifold = EUCLIDEAN_POINTS) -> \
        np.ndarray:
    """
    Commits this iteration's `S` uploads into `cache`, then returns `D̂_i`:
    exact blocks where uploaded, transported cached blocks elsewhere.

    Raises:
        ProtocolViolationError: If a block has neither an upload nor a
            cached value.
    """
    cache.commitS(uploadIndex, uploadValues, iteration,
                  currentPoints[uploadIndex])
    if not np.all(cache.hasS):
        missing = cache.blockIds[~cache.hasS]
        raise ProtocolViolationError(
            f'No preconditioner block uploaded or cached for block(s) '
            f'{missing[:5].tolist()}.')
    dHat, _ = approxPrecondBlocks(cache, currentPoints, manifold)
    dHat = dHat.copy()
    dHat[uploadIndex] = uploadValues
    return dHat


def assembleWhat(cache: BlockCache, uploadIndex: np.ndarray,
                 uploadValues: np.ndarray, currentPoints: np.ndarray,
                 iteration: int,
                 manifold: AbstractSharedManifold = EUCLIDEAN_POINTS) -> \
        np.ndarray:
    """Gradient counterpart of `assembleDhat`, returning `ŵ_i`."""
    cache.commitW(uploadIndex, uploadValues, iteration,
                  currentPoints[uploadIndex])
    if not np.all(cache.hasW):
        missing = cache.blockIds[~cache.hasW]
        raise ProtocolViolationError(
            f'No reduced gradient block uploaded or cached for block(s) '
            f'{missing[:5].tolist()}.')
    wHat, _ = approxGradBlocks(cache, currentPoints, manifold)
    wHat = wHat.copy()
    wHat[uploadIndex] = uploadValues
    return wHat


def sumBlocks(perAgent: Sequence[Tuple[np.ndarray, np.ndarray]],
              numPoints: int) -> np.ndarray:
    """
    Per-block sum of agent contributions `(blockIds, values)`, accumulated
    in the given (ascending agent) order.
    """
    if not perAgent:
        raise ValueError('Nothing to aggregate.')
    total = np.zeros((numPoints,) + perAgent[0][1].shape[1:])
    for blockIds, values in perAgent:
        total[blockIds] += values
    return total


def aggregateWhat(perAgent: Sequence[Tuple[np.ndarray, np.ndarray]],
                  numPoints: int) -> np.ndarray:
    """`ŵ = Σ_i ŵ_i` in ascending agent order."""
    return sumBlocks(perAgent, numPoints)
