import io
from pathlib import Path
from typing import Tuple

import numpy as np

from LazyCollabBA.DataIO import writeTrace
from LazyCollabBA.ProblemLoader import LoadedProblem, SyntheticProblemLoader

fixturesPath = Path(__file__).parent / 'fixtures'
TINY_BAL = fixturesPath / 'tiny.bal'


def smallProblem(seed: int = 0, numCameras: int = 6, numPoints: int = 30,
                 numAgents: int = 3, noisePx: float = 0.5,
                 noise: Tuple[float, float, float] = (1.0, 0.02, 0.02),
                 point3dFraction: float = 0.0,
                 point3dNoiseM: float = 0.0) -> LoadedProblem:
    return SyntheticProblemLoader(
        numCameras=numCameras, numPoints=numPoints, numAgents=numAgents,
        noisePx=noisePx, seed=seed, noise=noise,
        point3dFraction=point3dFraction,
        point3dNoiseM=point3dNoiseM).load()


def traceText(trace) -> str:
    stream = io.StringIO()
    writeTrace(trace, stream)
    return stream.getvalue()


def relativeError(actual: np.ndarray, expected: np.ndarray) -> float:
    actual = np.asarray(actual, dtype=float).reshape(-1)
    expected = np.asarray(expected, dtype=float).reshape(-1)
    scale = max(np.linalg.norm(expected), 1e-300)
    return float(np.linalg.norm(actual - expected) / scale)
