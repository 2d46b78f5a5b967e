import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Sequence, Tuple

import numpy as np

from .Geometry import (CameraIntrinsics, pointResidualJacobiansBatch,
                       projectBatch, projectJacobiansBatch,
                       quaternionsToMatrices)

logger = logging.getLogger(__name__)


class ObservationKind(Enum):
    REPROJECTION = 0
    POINT3D = 1

    @classmethod
    def _missing_(cls, key):
        if isinstance(key, str):
            value = cls.__members__.get(key.upper())
            if value is not None:
                return value
        raise ValueError(f'Invalid key "{key}" for {cls.__name__}')


@dataclass(frozen=True)
class Observation:
    """
    One weighted measurement of shared block `pointId` taken at pose
    `poseIdx` of `agent`.  Reprojection measurements are 2-vectors in
    pixels; point-cloud measurements are 3-vectors in meters expressed in
    the pose's local frame.
    """
    agent: int
    poseIdx: int
    pointId: int
    kind: ObservationKind
    measurement: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        if not self.weight > 0:
            raise ValueError(f'Observation weight must be positive, '
                             f'got {self.weight}.')
        expected = 2 if self.kind is ObservationKind.REPROJECTION else 3
        if np.asarray(self.measurement).shape != (expected,):
            raise ValueError(f'{self.kind.name} measurement must have '
                             f'{expected} components.')


@dataclass(frozen=True)
class GlobalBundle:
    """
    An unpartitioned estimation problem: every camera, every point and
    every observation, before cameras are assigned to agents.
    Measurements are stored as 3-vectors; reprojection rows leave the
    last component at zero.
    """
    rotations: np.ndarray
    translations: np.ndarray
    intrinsics: np.ndarray
    points: np.ndarray
    obsCamera: np.ndarray
    obsPoint: np.ndarray
    obsKind: np.ndarray
    obsMeasurement: np.ndarray
    obsWeight: np.ndarray

    @property
    def numCameras(self) -> int:
        return len(self.rotations)

    @property
    def numPoints(self) -> int:
        return len(self.points)

    @property
    def numObservations(self) -> int:
        return len(self.obsCamera)


@dataclass(frozen=True)
class AgentData:
    """
    Everything agent `agentId` holds privately: its poses' intrinsics and
    its observations, sorted by pose then original order.

    Attributes:
        cameraIds (np.ndarray): Global camera index of each local pose.
        observedBlocks (np.ndarray): Sorted shared block ids `L_i`.
        obsBlock (np.ndarray): Index of each observation's point within
            `observedBlocks`.
    """
    agentId: int
    cameraIds: np.ndarray
    intrinsics: np.ndarray
    obsPose: np.ndarray
    obsPoint: np.ndarray
    obsKind: np.ndarray
    obsMeasurement: np.ndarray
    obsWeight: np.ndarray
    observedBlocks: np.ndarray = field(init=False)
    obsBlock: np.ndarray = field(init=False)

    def __post_init__(self):
        observedBlocks, obsBlock = np.unique(self.obsPoint,
                                             return_inverse=True)
        object.__setattr__(self, 'observedBlocks',
                           observedBlocks.astype(np.int64))
        object.__setattr__(self, 'obsBlock', obsBlock.astype(np.int64))
        if len(self.obsPose) and (self.obsPose.min() < 0 or
                                  self.obsPose.max() >= self.numPoses):
            raise ValueError(f'Agent {self.agentId} has an observation '
                             f'with a pose index out of range.')
        if np.any(self.obsWeight <= 0):
            raise ValueError(f'Agent {self.agentId} has a non-positive '
                             f'observation weight.')

    @property
    def numPoses(self) -> int:
        return len(self.cameraIds)

    @property
    def numObservations(self) -> int:
        return len(self.obsPose)

    @property
    def numBlocks(self) -> int:
        return len(self.observedBlocks)


@dataclass
class State:
    """
    Iterate `(x, y)`: per-agent pose arrays (scalar-first quaternions and
    translations) and the shared point array.
    """
    rotations: List[np.ndarray]
    translations: List[np.ndarray]
    points: np.ndarray

    def copy(self) -> 'State':
        return State([r.copy() for r in self.rotations],
                     [t.copy() for t in self.translations],
                     self.points.copy())

    def equals(self, other: 'State') -> bool:
        """Bitwise equality."""
        return (len(self.rotations) == len(other.rotations)
                and all(np.array_equal(a, b) for a, b in
                        zip(self.rotations, other.rotations))
                and all(np.array_equal(a, b) for a, b in
                        zip(self.translations, other.translations))
                and np.array_equal(self.points, other.points))


class ProblemInstance:
    """
    The partitioned collaborative estimation problem.  Immutable after
    construction; every shared block must be observed by at least one
    agent, otherwise its aggregated Jacobi block would be singular.
    """

    def __init__(self, agents: Sequence[AgentData], numPoints: int):
        self.agents: Tuple[AgentData, ...] = tuple(agents)
        self.numPoints: int = int(numPoints)

        if not self.agents:
            raise ValueError('A problem needs at least one agent.')

        coverage = np.zeros(self.numPoints, dtype=np.int64)
        for agent in self.agents:
            if len(agent.observedBlocks) and (
                    agent.observedBlocks[-1] >= self.numPoints):
                raise ValueError(f'Agent {agent.agentId} observes a point '
                                 f'outside [0, {self.numPoints}).')
            coverage[agent.observedBlocks] += 1
        unobserved = np.flatnonzero(coverage == 0)
        if len(unobserved):
            raise ValueError(f'{len(unobserved)} shared block(s) are not '
                             f'observed by any agent, first: '
                             f'{unobserved[:5].tolist()}.')

    @property
    def numAgents(self) -> int:
        return len(self.agents)

    @property
    def numCameras(self) -> int:
        return sum(agent.numPoses for agent in self.agents)

    @classmethod
    def fromObservations(cls, intrinsics: Sequence[Sequence[CameraIntrinsics]],
                         numPoints: int,
                         observations: Sequence[Observation]) -> \
            'ProblemInstance':
        """
        Builds an instance from per-agent pose intrinsics and a flat
        observation list.  Global camera ids are assigned in agent order.
        """
        agents: List[AgentData] = []
        cameraOffset = 0
        for agentId, poseIntrinsics in enumerate(intrinsics):
            own = [o for o in observations if o.agent == agentId]
            own.sort(key=lambda o: o.poseIdx)
            measurements = np.zeros((len(own), 3))
            for row, o in enumerate(own):
                measurements[row, :len(o.measurement)] = o.measurement
            numPoses = len(poseIntrinsics)
            agents.append(AgentData(
                agentId=agentId,
                cameraIds=np.arange(cameraOffset, cameraOffset + numPoses),
                intrinsics=np.array([i.asArray() for i in poseIntrinsics]
                                    ).reshape(numPoses, 6),
                obsPose=np.array([o.poseIdx for o in own], dtype=np.int64),
                obsPoint=np.array([o.pointId for o in own], dtype=np.int64),
                obsKind=np.array([o.kind.value for o in own], dtype=np.int8),
                obsMeasurement=measurements,
                obsWeight=np.array([o.weight for o in own], dtype=float)))
            cameraOffset += numPoses
        unknown = {o.agent for o in observations} - set(range(len(agents)))
        if unknown:
            raise ValueError(f'Observations reference unknown agents '
                             f'{sorted(unknown)}.')
        return cls(agents, numPoints)

    def stateFromGlobal(self, rotations: np.ndarray, translations: np.ndarray,
                        points: np.ndarray) -> State:
        """Splits camera-indexed pose arrays into per-agent arrays."""
        return State(
            [np.array(rotations[a.cameraIds], dtype=float)
             for a in self.agents],
            [np.array(translations[a.cameraIds], dtype=float)
             for a in self.agents],
            np.array(points, dtype=float))

    def globalFromState(self, state: State) -> Tuple[np.ndarray, np.ndarray]:
        """Inverse of `stateFromGlobal` for the pose arrays."""
        rotations = np.zeros((self.numCameras, 4))
        translations = np.zeros((self.numCameras, 3))
        for agent, r, t in zip(self.agents, state.rotations,
                               state.translations):
            rotations[agent.cameraIds] = r
            translations[agent.cameraIds] = t
        return rotations, translations

    def checkState(self, state: State):
        if (len(state.rotations) != self.numAgents or
                state.points.shape != (self.numPoints, 3) or
                any(r.shape != (a.numPoses, 4) or t.shape != (a.numPoses, 3)
                    for a, r, t in zip(self.agents, state.rotations,
                                       state.translations))):
            raise ValueError('State sizes do not match the instance.')


def _observationArrays(agent: AgentData, rotations: np.ndarray,
                       translations: np.ndarray, blockPoints: np.ndarray):
    poseRotations = quaternionsToMatrices(rotations)[agent.obsPose]
    poseTranslations = translations[agent.obsPose]
    points = blockPoints[agent.obsBlock]
    reprojection = agent.obsKind == ObservationKind.REPROJECTION.value
    return poseRotations, poseTranslations, points, reprojection


def evaluateResiduals(agent: AgentData, rotations: np.ndarray,
                      translations: np.ndarray, blockPoints: np.ndarray) -> \
        Tuple[np.ndarray, np.ndarray]:
    """
    Residuals of every observation of `agent` as (k, 3) rows (reprojection
    rows carry a zero third component) and the (k,) validity flags.

    Args:
        blockPoints (np.ndarray): Shared points restricted to
            `agent.observedBlocks`, in that order.
    """
    poseRotations, poseTranslations, points, reprojection = \
        _observationArrays(agent, rotations, translations, blockPoints)
    residuals = np.zeros((agent.numObservations, 3))
    valid = np.ones(agent.numObservations, dtype=bool)

    if np.any(reprojection):
        pixels, projectionValid = projectBatch(
            poseRotations[reprojection], poseTranslations[reprojection],
            agent.intrinsics[agent.obsPose[reprojection]],
            points[reprojection])
        rows = agent.obsMeasurement[reprojection, :2] - pixels
        rows[~projectionValid] = 0.0
        residuals[reprojection, :2] = rows
        valid[reprojection] = projectionValid

    registration = ~reprojection
    if np.any(registration):
        residuals[registration] = (
                points[registration]
                - np.einsum('nij,nj->ni', poseRotations[registration],
                            agent.obsMeasurement[registration])
                - poseTranslations[registration])
    return residuals, valid


def evaluateResidualJacobians(agent: AgentData, rotations: np.ndarray,
                              translations: np.ndarray,
                              blockPoints: np.ndarray) -> \
        Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Residuals plus their (k, 3, 6) pose and (k, 3, 3) point Jacobians.
    Invalid projections have zero residual and zero Jacobians.
    """
    residuals, valid = evaluateResiduals(agent, rotations, translations,
                                         blockPoints)
    poseRotations, poseTranslations, points, reprojection = \
        _observationArrays(agent, rotations, translations, blockPoints)
    jPose = np.zeros((agent.numObservations, 3, 6))
    jPoint = np.zeros((agent.numObservations, 3, 3))

    if np.any(reprojection):
        jp, jy = projectJacobiansBatch(
            poseRotations[reprojection], poseTranslations[reprojection],
            agent.intrinsics[agent.obsPose[reprojection]],
            points[reprojection])
        jPose[reprojection, :2] = jp
        jPoint[reprojection, :2] = jy

    registration = ~reprojection
    if np.any(registration):
        jp, jy = pointResidualJacobiansBatch(
            poseRotations[registration], agent.obsMeasurement[registration])
        jPose[registration] = jp
        jPoint[registration] = jy
    return residuals, jPose, jPoint, valid


def agentCost(agent: AgentData, rotations: np.ndarray,
              translations: np.ndarray, blockPoints: np.ndarray) -> float:
    residuals, _ = evaluateResiduals(agent, rotations, translations,
                                     blockPoints)
    return float(np.sum(agent.obsWeight * np.sum(residuals * residuals,
                                                 axis=1)))


def evaluateCost(instance: ProblemInstance, state: State) -> \
        Tuple[float, List[float]]:
    """
    Global cost `f = Σ f_i` with `f_i = Σ w ‖r‖²`, summed in ascending
    agent order.
    """
    instance.checkState(state)
    perAgent = [agentCost(agent, state.rotations[i], state.translations[i],
                          state.points[agent.observedBlocks])
                for i, agent in enumerate(instance.agents)]
    total = 0.0
    for value in perAgent:
        total += value
    return total, perAgent
