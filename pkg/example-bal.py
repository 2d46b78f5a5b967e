import logging
import os
import sys

from dotenv import load_dotenv

from LazyCollabBA import (BalProblemLoader, NoiseProfile, RunConfig,
                          admissibleParams, checkDescent, run)
from LazyCollabBA.ConvergenceTheory import estimateInitialSigmaP
from LazyCollabBA.LazyCommunication import LazyConfig

logging.basicConfig(level=logging.INFO)


def main() -> bool:
    # Load environment variables from `.env` file
    load_dotenv()

    path = os.getenv('BAL_PATH')
    if not path:
        sys.exit('Set BAL_PATH to a BAL problem file (.txt or .bz2).')

    problem = BalProblemLoader(
        path,
        numAgents=int(os.getenv('NUM_AGENTS')
                      or BalProblemLoader.NUM_AGENTS_DEFAULT),
        noise=NoiseProfile(os.getenv('NOISE_PROFILE') or 'none'),
    ).load()

    # stepsize and history weights that certify Lyapunov descent
    sigmaP = estimateInitialSigmaP(problem.instance, problem.initialState)
    gamma = 0.5 / sigmaP
    lazy = LazyConfig(deltaP=0.0, epsilon=0.02)
    params = admissibleParams(gamma, sigmaP, lazy.epsilon)

    result = run(problem.instance, problem.initialState,
                 RunConfig(gamma=gamma, lazy=lazy, beta=params.beta,
                           maxIters=int(os.getenv('MAX_ITERS') or 100)),
                 int(os.getenv('LARPG_THREADS') or 1))
    report = checkDescent(result.trace, params.beta)

    for record in result.trace:
        print(f'{record.iteration:4d} f={record.cost:.6e} '
              f'V={record.lyapunov:.6e} uploads={record.uploadBytes}')
    return report.verdict


if '__main__' == __name__:
    print('Lyapunov descent:', 'PASS' if main() else 'FAIL')
