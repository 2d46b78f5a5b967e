import bz2
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Tuple

import numpy as np
from scipy.spatial.transform import Rotation
from tenacity import (retry, stop_after_attempt, before_sleep_log,
                      RetryError, retry_if_exception_type)

from .DataIO import balToBundle, parseBal
from .Geometry import projectBatch, quaternionsToMatrices
from .ProblemInstance import (AgentData, GlobalBundle, ObservationKind,
                              ProblemInstance, State)

logger = logging.getLogger(__name__)


class SyntheticGenerationError(RuntimeError):
    pass


class UnobservedPointError(ValueError):
    pass


class NoiseProfile(Enum):
    """Initialization noise `(rotation deg, position m, point m)`."""
    NONE = (0.0, 0.0, 0.0)
    EUROC = (5.0, 0.1, 0.05)
    KITTI = (5.0, 2.0, 0.1)

    @classmethod
    def _missing_(cls, key):
        if isinstance(key, str):
            value = cls.__members__.get(key.upper())
            if value is not None:
                return value
        raise ValueError(f'Invalid key "{key}" for {cls.__name__}')


@dataclass(frozen=True)
class LoadedProblem:
    instance: ProblemInstance
    groundTruth: State
    initialState: State


def partitionRandom(bundle: GlobalBundle, numAgents: int,
                    seed: int) -> ProblemInstance:
    """
    Assigns cameras to agents uniformly at random; observations follow
    their camera.

    Raises:
        ValueError: If `numAgents` is below 1 or exceeds the camera count.
    """
    if not 1 <= numAgents <= bundle.numCameras:
        raise ValueError(f'Number of agents must be in [1, '
                         f'{bundle.numCameras}], got {numAgents}.')

    rng = np.random.default_rng(seed)
    groups = np.array_split(rng.permutation(bundle.numCameras), numAgents)

    agents = []
    for agentId, group in enumerate(groups):
        cameraIds = np.sort(group)
        localIndex = np.full(bundle.numCameras, -1, dtype=np.int64)
        localIndex[cameraIds] = np.arange(len(cameraIds))
        rows = np.flatnonzero(localIndex[bundle.obsCamera] >= 0)
        # stable: observations of one pose keep their global order
        rows = rows[np.argsort(localIndex[bundle.obsCamera[rows]],
                               kind='stable')]
        agents.append(AgentData(
            agentId=agentId,
            cameraIds=cameraIds,
            intrinsics=bundle.intrinsics[cameraIds],
            obsPose=localIndex[bundle.obsCamera[rows]],
            obsPoint=bundle.obsPoint[rows].astype(np.int64),
            obsKind=bundle.obsKind[rows].astype(np.int8),
            obsMeasurement=bundle.obsMeasurement[rows],
            obsWeight=bundle.obsWeight[rows]))
        logger.debug(f'Agent {agentId}: {len(cameraIds)} camera(s), '
                     f'{len(rows)} observation(s)')
    return ProblemInstance(agents, bundle.numPoints)


def perturbState(state: State, sigmaRotDeg: float, sigmaPosM: float,
                 sigmaPointM: float, seed: int) -> State:
    """
    Perturbs every pose by a right-composed Gaussian axis-angle rotation and
    Gaussian translation noise, and every point by Gaussian noise.  A zero
    sigma leaves that component bitwise untouched.
    """
    if min(sigmaRotDeg, sigmaPosM, sigmaPointM) < 0:
        raise ValueError('Perturbation sigmas must be nonnegative.')

    rng = np.random.default_rng(seed)
    perturbed = state.copy()
    for i, quaternions in enumerate(perturbed.rotations):
        if sigmaRotDeg > 0 and len(quaternions):
            omega = rng.normal(0.0, np.radians(sigmaRotDeg),
                               size=(len(quaternions), 3))
            rotated = (Rotation.from_quat(quaternions, scalar_first=True)
                       * Rotation.from_rotvec(omega)).as_quat(
                scalar_first=True)
            perturbed.rotations[i] = rotated / np.linalg.norm(
                rotated, axis=1, keepdims=True)
        if sigmaPosM > 0:
            perturbed.translations[i] = perturbed.translations[i] + \
                rng.normal(0.0, sigmaPosM, size=perturbed.translations[i].shape)
    if sigmaPointM > 0:
        perturbed.points = perturbed.points + rng.normal(
            0.0, sigmaPointM, size=perturbed.points.shape)
    return perturbed


def perturbWithProfile(state: State, profile: NoiseProfile,
                       seed: int) -> State:
    return perturbState(state, *profile.value, seed=seed)


def lookAt(center: np.ndarray, target: np.ndarray) -> \
        Tuple[np.ndarray, np.ndarray]:
    """
    World-to-camera rotation and translation of a camera at `center` whose
    optical axis passes through `target`, with world +z as up.
    """
    forward = target - center
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    return rotation, -rotation @ center


class SyntheticProblemLoader:
    """
    Generates a ring of cameras looking into a point cloud in the unit box,
    partitions it among agents, and perturbs the ground truth to produce an
    initial state.

    Like the other loaders, all configuration is done via constructor
    parameters; call `load()` to generate.
    """
    NUM_CAMERAS_DEFAULT = 6
    NUM_POINTS_DEFAULT = 30
    NUM_AGENTS_DEFAULT = 3
    OBSERVATION_DENSITY_DEFAULT = 1.0
    NOISE_PX_DEFAULT = 1.0
    FOCAL_DEFAULT = 500.0
    RING_RADIUS = 4.0
    RING_HEIGHT_JITTER = 0.5
    BOX_HALF_WIDTH = 0.5
    MAX_ATTEMPTS = 20

    def __init__(self,
                 numCameras: int = NUM_CAMERAS_DEFAULT,
                 numPoints: int = NUM_POINTS_DEFAULT,
                 numAgents: int = NUM_AGENTS_DEFAULT,
                 observationDensity: float = OBSERVATION_DENSITY_DEFAULT,
                 noisePx: float = NOISE_PX_DEFAULT,
                 seed: int = 0,
                 point3dFraction: float = 0.0,
                 point3dNoiseM: float = 0.0,
                 noise: NoiseProfile | Tuple[float, float, float] =
                 NoiseProfile.EUROC,
                 noiseSeed: int | None = None,
                 partitionSeed: int | None = None,
                 ):
        if numCameras < 1 or numPoints < 1:
            raise ValueError(f'Need at least one camera and one point, got '
                             f'{numCameras} camera(s), {numPoints} point(s).')
        if not 0 < observationDensity <= 1:
            raise ValueError(f'Observation density must be in (0, 1], got '
                             f'{observationDensity}.')
        if not 0 <= point3dFraction <= 1:
            raise ValueError(f'point3dFraction must be in [0, 1], got '
                             f'{point3dFraction}.')
        if noisePx < 0 or point3dNoiseM < 0:
            raise ValueError('Measurement noise must be nonnegative.')

        self.numCameras = int(numCameras)
        self.numPoints = int(numPoints)
        self.numAgents = int(numAgents)
        self.observationDensity = float(observationDensity)
        self.noisePx = float(noisePx)
        self.seed = int(seed)
        self.point3dFraction = float(point3dFraction)
        self.point3dNoiseM = float(point3dNoiseM)
        self.noise = (noise.value if isinstance(noise, NoiseProfile)
                      else tuple(map(float, noise)))
        self.noiseSeed = self.seed if noiseSeed is None else int(noiseSeed)
        self.partitionSeed = (self.seed if partitionSeed is None
                              else int(partitionSeed))

    def load(self) -> LoadedProblem:
        instance, groundTruth = self.generate()
        initialState = perturbState(groundTruth, *self.noise,
                                    seed=self.noiseSeed)
        return LoadedProblem(instance, groundTruth, initialState)

    def generate(self) -> Tuple[ProblemInstance, State]:
        bundle = self.generateBundle()
        instance = partitionRandom(bundle, self.numAgents, self.partitionSeed)
        groundTruth = instance.stateFromGlobal(
            bundle.rotations, bundle.translations, bundle.points)
        return instance, groundTruth

    def generateBundle(self) -> GlobalBundle:
        """
        Raises:
            SyntheticGenerationError: If every attempt left some point
                unobserved.
        """
        rng = np.random.default_rng(self.seed)
        try:
            return self._drawBundle(rng)
        except RetryError as e:
            logger.error(f'Synthetic generation failed after '
                         f'{self.MAX_ATTEMPTS} attempts: {e}')
            raise SyntheticGenerationError(
                f'Could not observe every point with density '
                f'{self.observationDensity} in {self.MAX_ATTEMPTS} '
                f'attempts.') from e

    @retry(before_sleep=before_sleep_log(logger, logging.WARNING),
           retry=retry_if_exception_type(UnobservedPointError),
           stop=stop_after_attempt(MAX_ATTEMPTS))
    def _drawBundle(self, rng: np.random.Generator) -> GlobalBundle:
        angles = (2.0 * np.pi * np.arange(self.numCameras) / self.numCameras
                  + rng.uniform(-0.1, 0.1, self.numCameras))
        heights = rng.uniform(-self.RING_HEIGHT_JITTER,
                              self.RING_HEIGHT_JITTER, self.numCameras)
        centers = np.stack([self.RING_RADIUS * np.cos(angles),
                            self.RING_RADIUS * np.sin(angles), heights],
                           axis=1)
        targets = rng.uniform(-0.1, 0.1, (self.numCameras, 3))
        rotationMatrices = np.zeros((self.numCameras, 3, 3))
        translations = np.zeros((self.numCameras, 3))
        for c in range(self.numCameras):
            rotationMatrices[c], translations[c] = lookAt(centers[c],
                                                          targets[c])
        rotations = Rotation.from_matrix(rotationMatrices).as_quat(
            scalar_first=True)

        points = rng.uniform(-self.BOX_HALF_WIDTH, self.BOX_HALF_WIDTH,
                             (self.numPoints, 3))

        observed = rng.random((self.numCameras, self.numPoints)) < \
            self.observationDensity
        if self.observationDensity >= 1.0:
            observed[:] = True
        unobserved = np.flatnonzero(~observed.any(axis=0))
        if len(unobserved):
            raise UnobservedPointError(
                f'{len(unobserved)} point(s) unobserved')

        obsCamera, obsPoint = np.nonzero(observed)
        numObservations = len(obsCamera)
        intrinsics = np.tile([self.FOCAL_DEFAULT, self.FOCAL_DEFAULT,
                              0.0, 0.0, 0.0, 0.0], (self.numCameras, 1))

        registration = rng.random(numObservations) < self.point3dFraction
        obsKind = np.where(registration, ObservationKind.POINT3D.value,
                           ObservationKind.REPROJECTION.value).astype(np.int8)

        R = quaternionsToMatrices(rotations)
        pixels, valid = projectBatch(R[obsCamera], translations[obsCamera],
                                     intrinsics[obsCamera], points[obsPoint])
        if not np.all(valid[~registration]):
            raise UnobservedPointError('a generated point lies behind a '
                                       'camera')
        localPoints = np.einsum('nji,nj->ni', R[obsCamera],
                                points[obsPoint] - translations[obsCamera])

        measurements = np.zeros((numObservations, 3))
        measurements[~registration, :2] = pixels[~registration]
        measurements[registration] = localPoints[registration]
        pixelNoise = rng.normal(0.0, 1.0, (numObservations, 2))
        pointNoise = rng.normal(0.0, 1.0, (numObservations, 3))
        if self.noisePx > 0:
            measurements[~registration, :2] += \
                self.noisePx * pixelNoise[~registration]
        if self.point3dNoiseM > 0:
            measurements[registration] += \
                self.point3dNoiseM * pointNoise[registration]

        logger.info(f'Generated {self.numCameras} camera(s), '
                    f'{self.numPoints} point(s), {numObservations} '
                    f'observation(s) ({int(registration.sum())} point-cloud)')
        return GlobalBundle(
            rotations=rotations, translations=translations,
            intrinsics=intrinsics, points=points,
            obsCamera=obsCamera.astype(np.int64),
            obsPoint=obsPoint.astype(np.int64), obsKind=obsKind,
            obsMeasurement=measurements,
            obsWeight=np.ones(numObservations))


def synthGenerate(numCameras: int, numPoints: int, numAgents: int,
                  observationDensity: float, noisePx: float, seed: int,
                  point3dFraction: float = 0.0) -> \
        Tuple[ProblemInstance, State]:
    return SyntheticProblemLoader(
        numCameras=numCameras, numPoints=numPoints, numAgents=numAgents,
        observationDensity=observationDensity, noisePx=noisePx, seed=seed,
        point3dFraction=point3dFraction).generate()


class BalProblemLoader:
    """
    Loads a BAL file (optionally bz2-compressed), partitions its cameras
    among agents and perturbs it.  The file's own estimate serves as the
    reference solution for metrics.
    """
    NUM_AGENTS_DEFAULT = 30

    def __init__(self,
                 path: str | Path,
                 numAgents: int = NUM_AGENTS_DEFAULT,
                 seed: int = 0,
                 noise: NoiseProfile | Tuple[float, float, float] =
                 NoiseProfile.NONE,
                 noiseSeed: int | None = None,
                 ):
        if not path:
            raise ValueError('A BAL file path must be specified.')
        self.path = Path(path)
        self.numAgents = int(numAgents)
        self.seed = int(seed)
        self.noise = (noise.value if isinstance(noise, NoiseProfile)
                      else tuple(map(float, noise)))
        self.noiseSeed = self.seed if noiseSeed is None else int(noiseSeed)

    def readDataset(self):
        opener = bz2.open if self.path.suffix == '.bz2' else open
        with opener(self.path, 'rt') as stream:
            return parseBal(stream)

    def load(self) -> LoadedProblem:
        dataset = self.readDataset()
        bundle = balToBundle(dataset)
        logger.info(f'Loaded "{self.path}": {bundle.numCameras} camera(s), '
                    f'{bundle.numPoints} point(s), '
                    f'{bundle.numObservations} observation(s)')
        instance = partitionRandom(bundle, self.numAgents, self.seed)
        groundTruth = instance.stateFromGlobal(
            bundle.rotations, bundle.translations, bundle.points)
        initialState = perturbState(groundTruth, *self.noise,
                                    seed=self.noiseSeed)
        return LoadedProblem(instance, groundTruth, initialState)
