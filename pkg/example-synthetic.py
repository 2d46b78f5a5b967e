import json
import logging
import os

from dotenv import load_dotenv

from LazyCollabBA import (LazyConfig, NoiseProfile, RunConfig,
                          SyntheticProblemLoader, run, runMonolithic)
from LazyCollabBA.DataIO import ateRmse, meanReproj

logging.basicConfig(level=logging.INFO)


def main() -> dict:
    # Load environment variables from `.env` file
    load_dotenv()

    problem = SyntheticProblemLoader(
        numCameras=int(os.getenv('NUM_CAMERAS')
                       or SyntheticProblemLoader.NUM_CAMERAS_DEFAULT),
        numPoints=int(os.getenv('NUM_POINTS')
                      or SyntheticProblemLoader.NUM_POINTS_DEFAULT),
        numAgents=int(os.getenv('NUM_AGENTS')
                      or SyntheticProblemLoader.NUM_AGENTS_DEFAULT),
        seed=int(os.getenv('SEED') or 0),
        noise=NoiseProfile(os.getenv('NOISE_PROFILE') or 'euroc'),
    ).load()

    lazy = LazyConfig(epsilon=float(os.getenv('EPSILON')
                                    or LazyConfig.EPSILON_DEFAULT))
    config = RunConfig(gamma=float(os.getenv('GAMMA')
                                   or RunConfig.GAMMA_DEFAULT),
                       lazy=lazy,
                       maxIters=int(os.getenv('MAX_ITERS')
                                    or RunConfig.MAX_ITERS_DEFAULT))
    threads = int(os.getenv('LARPG_THREADS') or 1)

    lazyResult = run(problem.instance, problem.initialState, config,
                     threads, problem.groundTruth)
    fullResult = runMonolithic(problem.instance, problem.initialState,
                               config)

    return {
        name: {
            'final_cost': result.finalCost,
            'ate_rmse': ateRmse(problem.instance, result.finalState,
                                problem.groundTruth),
            'mean_reproj': meanReproj(problem.instance, result.finalState),
            'upload_bytes': result.trace.totalUploadBytes,
        } for name, result in (('lazy', lazyResult),
                               ('monolithic', fullResult))}


if '__main__' == __name__:
    print(json.dumps(main(), indent=2, sort_keys=True))
