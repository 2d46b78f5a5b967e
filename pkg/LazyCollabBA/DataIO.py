import csv
import json
import logging
from dataclasses import asdict, dataclass
from typing import IO, Dict, List, Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from .Geometry import (CameraIntrinsics, matricesToQuaternions,
                       quaternionsToMatrices)
from .ProblemInstance import (GlobalBundle, ObservationKind,
                              ProblemInstance, State, evaluateResiduals)

logger = logging.getLogger(__name__)

TRACE_HEADER = ('iter', 'f', 'grad_norm', 'what_normsq', 'lyapunov',
                'uploads_cum_bytes', 'broadcast_cum_bytes', 'ate', 'reproj')
_TRACE_ATTRIBUTES = ('iteration', 'cost', 'gradNorm', 'whatNormSq',
                     'lyapunov', 'uploadBytes', 'broadcastBytes', 'ate',
                     'reproj')
_INTEGER_COLUMNS = {'iter', 'uploads_cum_bytes', 'broadcast_cum_bytes'}

# BAL cameras look down -z with image y up; ours look down +z with y down.
_AXIS_FLIP = np.diag([1.0, -1.0, -1.0])


class BalFormatError(ValueError):
    def __init__(self, message: str, lineNumber: Optional[int] = None):
        super().__init__(message if lineNumber is None
                         else f'line {lineNumber}: {message}')
        self.lineNumber = lineNumber


@dataclass
class BalDataset:
    """
    Attributes:
        cameras (np.ndarray): (nc, 9) Rodrigues rotation, translation,
            focal length, k1, k2.
        points (np.ndarray): (np, 3) world points.
        obsCamera (np.ndarray): (no,) camera index of each observation.
        obsPoint (np.ndarray): (no,) point index of each observation.
        obsPixels (np.ndarray): (no, 2) measured `(u, v)`.
    """
    cameras: np.ndarray
    points: np.ndarray
    obsCamera: np.ndarray
    obsPoint: np.ndarray
    obsPixels: np.ndarray

    def equals(self, other: 'BalDataset') -> bool:
        return all(np.array_equal(getattr(self, name), getattr(other, name))
                   for name in ('cameras', 'points', 'obsCamera',
                                'obsPoint', 'obsPixels'))


@dataclass(frozen=True)
class MetricsReport:
    ateRmse: Optional[float]
    meanReproj: float
    totalUploadBytes: int
    totalBroadcastBytes: int

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value is not None and not value >= 0:
                raise ValueError(f'{name} must be nonnegative, got {value}.')

    def asDict(self) -> Dict:
        return {'ate_rmse': self.ateRmse, 'mean_reproj': self.meanReproj,
                'total_upload_bytes': self.totalUploadBytes,
                'total_broadcast_bytes': self.totalBroadcastBytes}


def _nonblankLines(stream: IO[str]):
    for lineNumber, line in enumerate(stream, 1):
        parts = line.split()
        if parts:
            yield lineNumber, parts


def _parseNumber(token: str, kind, lineNumber: int):
    try:
        return kind(token)
    except ValueError as e:
        raise BalFormatError(f'cannot read "{token}" as {kind.__name__}',
                             lineNumber) from e


def parseBal(stream: IO[str]) -> BalDataset:
    """
    Reads the BAL text format: a `cameras points observations` header,
    one `camera point u v` line per observation, then 9 values per camera
    and 3 per point (whitespace separated).

    Raises:
        BalFormatError: On a malformed line, a count mismatch or an
            out-of-range index.
    """
    lines = _nonblankLines(stream)
    try:
        lineNumber, header = next(lines)
    except StopIteration:
        raise BalFormatError('empty file') from None
    if len(header) != 3:
        raise BalFormatError('header must be "cameras points observations"',
                             lineNumber)
    numCameras, numPoints, numObservations = (
        _parseNumber(token, int, lineNumber) for token in header)
    if min(numCameras, numPoints, numObservations) < 0:
        raise BalFormatError('negative count in header', lineNumber)

    obsCamera = np.zeros(numObservations, dtype=np.int64)
    obsPoint = np.zeros(numObservations, dtype=np.int64)
    obsPixels = np.zeros((numObservations, 2))
    for index in range(numObservations):
        try:
            lineNumber, parts = next(lines)
        except StopIteration:
            raise BalFormatError(f'expected {numObservations} observations, '
                                 f'found {index}') from None
        if len(parts) != 4:
            raise BalFormatError('observation must be "camera point u v"',
                                 lineNumber)
        obsCamera[index] = _parseNumber(parts[0], int, lineNumber)
        obsPoint[index] = _parseNumber(parts[1], int, lineNumber)
        obsPixels[index] = [_parseNumber(p, float, lineNumber)
                            for p in parts[2:]]
        if not (0 <= obsCamera[index] < numCameras and
                0 <= obsPoint[index] < numPoints):
            raise BalFormatError(f'observation {index} references camera '
                                 f'{obsCamera[index]} / point '
                                 f'{obsPoint[index]} out of range',
                                 lineNumber)

    expected = 9 * numCameras + 3 * numPoints
    values = []
    for lineNumber, parts in lines:
        values.extend(_parseNumber(p, float, lineNumber) for p in parts)
        if len(values) > expected:
            raise BalFormatError(f'more than the {expected} expected '
                                 f'parameter values', lineNumber)
    if len(values) != expected:
        raise BalFormatError(f'expected {expected} parameter values, found '
                             f'{len(values)}')

    parameters = np.array(values, dtype=float)
    return BalDataset(
        cameras=parameters[:9 * numCameras].reshape(numCameras, 9),
        points=parameters[9 * numCameras:].reshape(numPoints, 3),
        obsCamera=obsCamera, obsPoint=obsPoint, obsPixels=obsPixels)


def writeBal(dataset: BalDataset, stream: IO[str]):
    stream.write(f'{len(dataset.cameras)} {len(dataset.points)} '
                 f'{len(dataset.obsCamera)}\n')
    for camera, point, (u, v) in zip(dataset.obsCamera, dataset.obsPoint,
                                     dataset.obsPixels):
        stream.write(f'{camera} {point} {u:.17g} {v:.17g}\n')
    for value in np.concatenate([dataset.cameras.reshape(-1),
                                 dataset.points.reshape(-1)]):
        stream.write(f'{value:.17g}\n')


def balToBundle(dataset: BalDataset) -> GlobalBundle:
    """
    Converts BAL cameras into this package's frame by a 180° rotation about
    the camera x axis; image `v` changes sign, focal length and
    distortion become fixed intrinsics.
    """
    numCameras = len(dataset.cameras)
    rotations = _AXIS_FLIP @ Rotation.from_rotvec(
        dataset.cameras[:, :3]).as_matrix().reshape(numCameras, 3, 3)
    translations = dataset.cameras[:, 3:6] @ _AXIS_FLIP
    intrinsics = np.zeros((numCameras, 6))
    intrinsics[:, 0] = dataset.cameras[:, 6]
    intrinsics[:, 1] = dataset.cameras[:, 6]
    intrinsics[:, 4:6] = dataset.cameras[:, 7:9]
    if np.any(intrinsics[:, 0] <= 0):
        raise BalFormatError('camera with a non-positive focal length')

    measurements = np.zeros((len(dataset.obsCamera), 3))
    measurements[:, 0] = dataset.obsPixels[:, 0]
    measurements[:, 1] = -dataset.obsPixels[:, 1]
    return GlobalBundle(
        rotations=matricesToQuaternions(rotations),
        translations=translations,
        intrinsics=intrinsics,
        points=np.array(dataset.points, dtype=float),
        obsCamera=np.array(dataset.obsCamera, dtype=np.int64),
        obsPoint=np.array(dataset.obsPoint, dtype=np.int64),
        obsKind=np.full(len(dataset.obsCamera),
                        ObservationKind.REPROJECTION.value, dtype=np.int8),
        obsMeasurement=measurements,
        obsWeight=np.ones(len(dataset.obsCamera)))


def bundleToBal(bundle: GlobalBundle) -> BalDataset:
    """
    Inverse of `balToBundle`.

    Raises:
        ValueError: For point-cloud observations, invalid intrinsics or
            intrinsics BAL cannot express (fx != fy, nonzero principal
            point).
    """
    intrinsics = bundle.intrinsics
    if np.any(bundle.obsKind != ObservationKind.REPROJECTION.value):
        raise ValueError('BAL files hold reprojection observations only.')
    for camera, row in enumerate(intrinsics):
        intr = CameraIntrinsics.fromArray(row)
        if intr.fx != intr.fy or intr.cx != 0 or intr.cy != 0:
            raise ValueError(f'BAL camera {camera} needs fx == fy and a zero '
                             'principal point.')
    if np.any(bundle.obsWeight != 1.0):
        logger.warning('BAL has no observation weights; weights dropped')

    rotations = _AXIS_FLIP @ quaternionsToMatrices(bundle.rotations)
    cameras = np.zeros((bundle.numCameras, 9))
    cameras[:, :3] = Rotation.from_matrix(rotations).as_rotvec()
    cameras[:, 3:6] = bundle.translations @ _AXIS_FLIP
    cameras[:, 6] = intrinsics[:, 0]
    cameras[:, 7:9] = intrinsics[:, 4:6]
    pixels = np.stack([bundle.obsMeasurement[:, 0],
                       -bundle.obsMeasurement[:, 1]], axis=1)
    return BalDataset(cameras=cameras, points=np.array(bundle.points),
                      obsCamera=np.array(bundle.obsCamera),
                      obsPoint=np.array(bundle.obsPoint), obsPixels=pixels)


def umeyamaSim3(est: np.ndarray, gt: np.ndarray) -> \
        Tuple[float, np.ndarray, np.ndarray]:
    """
    Least-squares similarity with `gt ≈ s R est + t`.

    Raises:
        ValueError: For fewer than 3 points or a collinear configuration.
    """
    est = np.asarray(est, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if est.shape != gt.shape or est.ndim != 2 or est.shape[1] != 3:
        raise ValueError(f'Expected two matching (n, 3) arrays, got '
                         f'{est.shape} and {gt.shape}.')
    if len(est) < 3:
        raise ValueError(f'Alignment needs at least 3 points, got '
                         f'{len(est)}.')

    meanGt, meanEst = gt.mean(axis=0), est.mean(axis=0)
    gtCentered, estCentered = gt - meanGt, est - meanEst
    correlation = gtCentered.T @ estCentered / len(est)
    variance = np.sum(estCentered * estCentered) / len(est)
    U, D, Vt = np.linalg.svd(correlation)
    _, spread, _ = np.linalg.svd(estCentered)
    if not spread[1] > 1e-12 * max(spread[0], 1e-300):
        raise ValueError('Degenerate alignment: points are collinear or '
                         'coincident.')

    signs = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        signs[2] = -1.0
    rotation = (U * signs) @ Vt
    scale = float(np.sum(D * signs) / variance)
    translation = meanGt - scale * rotation @ meanEst
    return scale, rotation, translation


def positionRmse(est: np.ndarray, gt: np.ndarray) -> float:
    """RMSE of position residuals after similarity alignment."""
    scale, rotation, translation = umeyamaSim3(est, gt)
    aligned = scale * np.asarray(est) @ rotation.T + translation
    residuals = np.asarray(gt) - aligned
    return float(np.sqrt(np.mean(np.sum(residuals * residuals, axis=1))))


def cameraCenters(instance: ProblemInstance, state: State) -> np.ndarray:
    """Camera centers `−Rᵀt` in global camera order."""
    rotations, translations = instance.globalFromState(state)
    matrices = quaternionsToMatrices(rotations)
    return -np.einsum('nji,nj->ni', matrices, translations)


def ateRmse(instance: ProblemInstance, est: State, gt: State) -> float:
    return positionRmse(cameraCenters(instance, est),
                        cameraCenters(instance, gt))


def meanReproj(instance: ProblemInstance, state: State) -> float:
    """
    Mean unweighted pixel error over valid reprojection observations;
    point-cloud factors are excluded.
    """
    total, count = 0.0, 0
    for i, agent in enumerate(instance.agents):
        residuals, valid = evaluateResiduals(
            agent, state.rotations[i], state.translations[i],
            state.points[agent.observedBlocks])
        rows = valid & (agent.obsKind == ObservationKind.REPROJECTION.value)
        total += float(np.sum(np.linalg.norm(residuals[rows, :2], axis=1)))
        count += int(np.count_nonzero(rows))
    return total / count if count else 0.0


def _formatField(value) -> str:
    if value is None:
        return ''
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f'{float(value):.17g}'


def writeTrace(trace, stream: IO[str]):
    """
    Writes one CSV row per iteration record with 17 significant digits;
    missing values are empty fields.
    """
    writer = csv.writer(stream, lineterminator='\n')
    writer.writerow(TRACE_HEADER)
    for record in trace:
        writer.writerow([_formatField(getattr(record, name))
                         for name in _TRACE_ATTRIBUTES])


def readTrace(stream: IO[str]) -> List[Dict[str, Optional[float]]]:
    reader = csv.reader(stream)
    header = next(reader, None)
    if tuple(header or ()) != TRACE_HEADER:
        raise ValueError(f'Unexpected trace header: {header}')
    rows = []
    for row in reader:
        rows.append({
            name: (None if field == '' else
                   int(field) if name in _INTEGER_COLUMNS else float(field))
            for name, field in zip(TRACE_HEADER, row)})
    return rows


def writeMetrics(report: MetricsReport, stream: IO[str],
                 effectiveConfig: Optional[Dict] = None):
    document = report.asDict()
    if effectiveConfig is not None:
        document['config'] = effectiveConfig
    json.dump(document, stream, indent=2, sort_keys=True)
    stream.write('\n')


def saveState(state: State, path: str):
    arrays = {'points': state.points}
    for i, (r, t) in enumerate(zip(state.rotations, state.translations)):
        arrays[f'rotations_{i}'] = r
        arrays[f'translations_{i}'] = t
    with open(path, 'wb') as stream:
        np.savez(stream, **arrays)


def loadState(path: str) -> State:
    with np.load(path) as arrays:
        numAgents = sum(1 for name in arrays.files
                        if name.startswith('rotations_'))
        return State([arrays[f'rotations_{i}'] for i in range(numAgents)],
                     [arrays[f'translations_{i}'] for i in range(numAgents)],
                     arrays['points'])
