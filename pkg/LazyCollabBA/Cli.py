"""
Command-line entry point: `run`, `sweep`, `check`, `gen` and `metrics`.

Exit status is 0 when every requested output was written, 1 on a config,
IO or solver error (one diagnostic line on stderr) and 3 when `check`
finds inadmissible parameters or a Lyapunov increase.
"""
import argparse
import copy
import csv
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from dotenv import load_dotenv

from .CliConfig import CliConfig, applyOverride, loadConfig
from .ConvergenceTheory import (InadmissibleParametersError,
                                admissibleParams, checkDescent,
                                estimateInitialSigmaP)
from .DataIO import (MetricsReport, ateRmse, bundleToBal, loadState,
                     meanReproj, readTrace, saveState, writeBal, writeMetrics,
                     writeTrace)
from .LarpgRuntime import RunResult, run
from .ProblemLoader import LoadedProblem, SyntheticProblemLoader

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CHECK_FAILED = 3
SWEEP_PARAMETERS = {'epsilon': ('lazy', 'epsilon'),
                    'dbar': ('lazy', 'dbar'),
                    'delta_p': ('lazy', 'delta_p'),
                    'gamma': ('solver', 'gamma'),
                    'max_staleness': ('lazy', 'max_staleness')}
BYTES_PER_MB = 1e6


def buildParser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', metavar='PATH',
                        help='JSON config file (or a metrics file echoing '
                             'one)')
    common.add_argument('--override', metavar='K=V', action='append',
                        default=[], help='set a config value, e.g. '
                                         'lazy.epsilon=0 (repeatable)')
    common.add_argument('--threads', type=int, metavar='N',
                        help='worker threads (default: $LARPG_THREADS or 1)')
    common.add_argument('--seed', type=int, metavar='S',
                        help='override every seed in the config')
    common.add_argument('--verbose', action='store_true',
                        help='debug logging')

    parser = argparse.ArgumentParser(
        prog='larpg',
        description='Lazily aggregated reduced preconditioned gradient '
                    'for collaborative bundle adjustment.')
    commands = parser.add_subparsers(dest='command', required=True)
    commands.add_parser('run', parents=[common],
                        help='solve once, write trace and metrics')
    sweep = commands.add_parser('sweep', parents=[common],
                                help='solve once per parameter value')
    sweep.add_argument('--parameter', required=True,
                       choices=sorted(SWEEP_PARAMETERS))
    sweep.add_argument('--values', required=True,
                       help='comma-separated values')
    commands.add_parser('check', parents=[common],
                        help='certify Lyapunov descent at desk scale with '
                             'check.epsilon and check.delta_p')
    gen = commands.add_parser('gen', parents=[common],
                              help='write a synthetic problem as BAL')
    gen.add_argument('--out', required=True, metavar='PATH')
    metrics = commands.add_parser('metrics', parents=[common],
                                  help='recompute metrics from a saved '
                                       'state')
    metrics.add_argument('--state', metavar='PATH',
                         help='state file (default: output.state_path)')
    return parser


def resolveThreads(threads: Optional[int]) -> int:
    if threads is None:
        threads = int(os.getenv('LARPG_THREADS') or 1)
    if threads < 1:
        raise ValueError(f'Thread count must be at least 1, got {threads}.')
    return threads


def metricsFor(problem: LoadedProblem, result: RunResult) -> MetricsReport:
    instance = problem.instance
    ate = (ateRmse(instance, result.finalState, problem.groundTruth)
           if instance.numCameras >= 3 else None)
    return MetricsReport(
        ateRmse=ate,
        meanReproj=meanReproj(instance, result.finalState),
        totalUploadBytes=result.trace.totalUploadBytes,
        totalBroadcastBytes=result.trace.totalBroadcastBytes)


def writeOutputs(config: CliConfig, result: RunResult,
                 report: MetricsReport, tracePath: Optional[str]):
    if tracePath:
        with open(tracePath, 'w', newline='') as stream:
            writeTrace(result.trace, stream)
    if config.output.metrics_path:
        with open(config.output.metrics_path, 'w') as stream:
            writeMetrics(report, stream, config.effective())
    if config.output.state_path:
        saveState(result.finalState, config.output.state_path)


def summaryLine(result: RunResult) -> str:
    last = result.trace.records[-1]
    return (f'f={result.finalCost:.6g} grad_norm={last.gradNorm:.6g} '
            f'uploads={result.trace.totalUploadBytes / BYTES_PER_MB:.6f} MB')


def solve(config: CliConfig, threads: int,
          problem: Optional[LoadedProblem] = None) -> \
        tuple[LoadedProblem, RunResult]:
    problem = problem or config.loadProblem()
    result = run(problem.instance, problem.initialState,
                 config.toRunConfig(), threads, problem.groundTruth)
    return problem, result


def cmdRun(config: CliConfig, threads: int) -> int:
    problem, result = solve(config, threads)
    writeOutputs(config, result, metricsFor(problem, result),
                 config.output.trace_path)
    print(summaryLine(result))
    return EXIT_OK


def sweepTracePath(tracePath: Optional[str], parameter: str,
                   value: str) -> Optional[str]:
    if not tracePath:
        return None
    path = Path(tracePath)
    return str(path.with_name(f'{path.stem}_{parameter}-{value}'
                              f'{path.suffix}'))


def cmdSweep(config: CliConfig, threads: int, parameter: str,
             values: Sequence[str]) -> int:
    """
    One run per value on a shared problem; traces are named by value and a
    summary CSV lists `value, final_rmse, total_upload_bytes`.
    """
    problem = config.loadProblem()
    base = config.effective()
    rows = []
    for raw in values:
        document = copy.deepcopy(base)
        applyOverride(document, SWEEP_PARAMETERS[parameter],
                      _sweepValue(raw))
        valueConfig = CliConfig.model_validate(document)
        _, result = solve(valueConfig, threads, problem)
        report = metricsFor(problem, result)
        writeOutputs(valueConfig.model_copy(update={
            'output': valueConfig.output.model_copy(
                update={'metrics_path': None, 'state_path': None})}),
            result, report,
            sweepTracePath(config.output.trace_path, parameter, raw))
        rows.append((raw, report.ateRmse, report.totalUploadBytes))
        print(f'{parameter}={raw}: {summaryLine(result)}')

    if config.output.summary_path:
        with open(config.output.summary_path, 'w', newline='') as stream:
            writer = csv.writer(stream, lineterminator='\n')
            writer.writerow(('value', 'final_rmse', 'total_upload_bytes'))
            for raw, rmse, uploads in rows:
                writer.writerow((raw, '' if rmse is None else f'{rmse:.17g}',
                                 uploads))
    return EXIT_OK


def _sweepValue(raw: str):
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw


def cmdCheck(config: CliConfig, threads: int) -> int:
    """
    Estimates `sigma_p` at the initial state, builds admissible descent
    parameters for `gamma = gamma_scale / sigma_p`, reruns with them and
    checks the Lyapunov function never increases.
    """
    problem = config.loadProblem()
    sigmaP = estimateInitialSigmaP(problem.instance, problem.initialState,
                                   config.solver.lambda_)
    gamma = config.check.gamma_scale / sigmaP
    lazy = config.check.toLazyConfig(config.lazy)
    try:
        params = admissibleParams(gamma, sigmaP, lazy.epsilon)
    except InadmissibleParametersError as e:
        print(f'FAIL sigma_p={sigmaP:.6g} gamma={gamma:.6g}: '
              f'{e.inequality.name} violated ({e.inequality.value})')
        return EXIT_CHECK_FAILED

    runConfig = config.toRunConfig(gamma=gamma, lazy=lazy, beta=params.beta,
                                   maxIters=config.check.iters)
    result = run(problem.instance, problem.initialState, runConfig, threads,
                 problem.groundTruth)
    report = checkDescent(result.trace, params.beta)
    writeOutputs(config, result, metricsFor(problem, result),
                 config.output.trace_path)
    if not report.verdict:
        print(f'FAIL sigma_p={sigmaP:.6g} gamma={gamma:.6g}: Lyapunov '
              f'increased at iteration(s) {list(report.violations[:10])}')
        return EXIT_CHECK_FAILED
    print(f'PASS sigma_p={sigmaP:.6g} gamma={gamma:.6g} '
          f'iterations={len(result.trace)}')
    return EXIT_OK


def cmdGen(config: CliConfig, out: str) -> int:
    loader = config.loader()
    if not isinstance(loader, SyntheticProblemLoader):
        raise ValueError('gen needs problem.source = "synth".')
    dataset = bundleToBal(loader.generateBundle())
    with open(out, 'w') as stream:
        writeBal(dataset, stream)
    print(f'wrote {len(dataset.cameras)} camera(s), {len(dataset.points)} '
          f'point(s), {len(dataset.obsCamera)} observation(s) to {out}')
    return EXIT_OK


def cmdMetrics(config: CliConfig, statePath: Optional[str]) -> int:
    statePath = statePath or config.output.state_path
    if not statePath:
        raise ValueError('metrics needs --state or output.state_path.')
    problem = config.loadProblem()
    state = loadState(statePath)
    problem.instance.checkState(state)

    uploads, broadcasts = 0, 0
    if config.output.trace_path and os.path.exists(config.output.trace_path):
        with open(config.output.trace_path, newline='') as stream:
            rows = readTrace(stream)
        if rows:
            uploads = rows[-1]['uploads_cum_bytes']
            broadcasts = rows[-1]['broadcast_cum_bytes']
    report = MetricsReport(
        ateRmse=(ateRmse(problem.instance, state, problem.groundTruth)
                 if problem.instance.numCameras >= 3 else None),
        meanReproj=meanReproj(problem.instance, state),
        totalUploadBytes=uploads, totalBroadcastBytes=broadcasts)
    if config.output.metrics_path:
        with open(config.output.metrics_path, 'w') as stream:
            writeMetrics(report, stream, config.effective())
    else:
        writeMetrics(report, sys.stdout)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = buildParser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING)
    load_dotenv()

    try:
        threads = resolveThreads(args.threads)
        config = loadConfig(args.config, args.override, args.seed)
        if args.command == 'run':
            return cmdRun(config, threads)
        if args.command == 'sweep':
            values = [v.strip() for v in args.values.split(',') if v.strip()]
            return cmdSweep(config, threads, args.parameter, values)
        if args.command == 'check':
            return cmdCheck(config, threads)
        if args.command == 'gen':
            return cmdGen(config, args.out)
        return cmdMetrics(config, args.state)
    except (ValueError, RuntimeError, ArithmeticError, OSError) as e:
        message = ' '.join(str(e).split())
        logger.debug('Command failed', exc_info=True)
        print(f'error: {type(e).__name__}: {message}', file=sys.stderr)
        return EXIT_ERROR


if '__main__' == __name__:
    sys.exit(main())
