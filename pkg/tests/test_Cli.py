import csv
import io
import json
import os
import tempfile
import unittest
from contextlib import redirect_stderr, redirect_stdout
from unittest import mock

from LazyCollabBA.Cli import (EXIT_CHECK_FAILED, EXIT_ERROR, EXIT_OK, main,
                              resolveThreads, sweepTracePath)

# small, close to the optimum, and quick to solve
SMALL_PROBLEM = ['--seed', '0',
                 '--override', 'problem.synth.noise_px=0.5',
                 '--override', 'noise.rot_deg=0.5',
                 '--override', 'noise.pos_m=0.01',
                 '--override', 'noise.point_m=0.01']


class CliTestCase(unittest.TestCase):
    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()
        self.addCleanup(self.directory.cleanup)

    def path(self, name: str) -> str:
        return os.path.join(self.directory.name, name)

    def invoke(self, *argv: str):
        stdout, stderr = io.StringIO(), io.StringIO()
        with redirect_stdout(stdout), redirect_stderr(stderr):
            status = main(list(argv))
        return status, stdout.getvalue(), stderr.getvalue()

    def read(self, name: str) -> str:
        with open(self.path(name)) as stream:
            return stream.read()

    @staticmethod
    def overrides(**values) -> list:
        argv = []
        for key, value in values.items():
            argv += ['--override', f'{key.replace("__", ".")}={value}']
        return argv


class TestRun(CliTestCase):
    def outputs(self, prefix: str) -> list:
        return self.overrides(output__trace_path=self.path(f'{prefix}.csv'),
                              output__metrics_path=self.path(
                                  f'{prefix}.json'),
                              output__state_path=self.path(
                                  f'{prefix}.state'))

    def test_writesEveryOutput(self):
        status, stdout, _ = self.invoke(
            'run', *self.overrides(solver__max_iters=3),
            *self.outputs('first'))
        self.assertEqual(status, EXIT_OK)
        self.assertTrue(stdout.startswith('f='))
        self.assertIn(' MB', stdout)
        self.assertEqual(len(self.read('first.csv').splitlines()), 4)
        metrics = json.loads(self.read('first.json'))
        self.assertEqual(metrics['config']['solver']['max_iters'], 3)
        self.assertGreater(metrics['total_upload_bytes'], 0)
        self.assertTrue(os.path.exists(self.path('first.state')))

    def test_runsAreReproducible(self):
        for prefix in ('first', 'second'):
            self.invoke('run', *self.overrides(solver__max_iters=3),
                        *self.outputs(prefix))
        self.assertEqual(self.read('first.csv'), self.read('second.csv'))

        status, _, _ = self.invoke(
            'run', '--config', self.path('first.json'),
            *self.outputs('echo'))
        self.assertEqual(status, EXIT_OK)
        self.assertEqual(self.read('first.csv'), self.read('echo.csv'))

    def test_metricsFromSavedState(self):
        problem = [*self.overrides(solver__max_iters=3),
                   *self.overrides(output__trace_path=self.path('run.csv'))]
        self.invoke('run', *problem, *self.overrides(
            output__metrics_path=self.path('run.json'),
            output__state_path=self.path('run.state')))
        status, stdout, _ = self.invoke('metrics', *problem, '--state',
                                        self.path('run.state'))
        self.assertEqual(status, EXIT_OK)
        recomputed = json.loads(stdout)
        original = json.loads(self.read('run.json'))
        for key in ('mean_reproj', 'ate_rmse', 'total_upload_bytes',
                    'total_broadcast_bytes'):
            self.assertEqual(recomputed[key], original[key], msg=key)

    def test_metricsNeedsAState(self):
        status, _, stderr = self.invoke('metrics')
        self.assertEqual(status, EXIT_ERROR)
        self.assertIn('--state', stderr)


class TestSweep(CliTestCase):
    def test_summaryAndNamedTraces(self):
        status, stdout, _ = self.invoke(
            'sweep', '--parameter', 'epsilon', '--values', '0,10',
            *self.overrides(solver__max_iters=5,
                            output__trace_path=self.path('trace.csv'),
                            output__summary_path=self.path('summary.csv')))
        self.assertEqual(status, EXIT_OK)
        self.assertEqual(len(stdout.splitlines()), 2)
        for value in ('0', '10'):
            self.assertTrue(os.path.exists(
                self.path(f'trace_epsilon-{value}.csv')))
        with open(self.path('summary.csv')) as stream:
            rows = list(csv.DictReader(stream))
        self.assertEqual([row['value'] for row in rows], ['0', '10'])
        self.assertTrue(all(int(row['total_upload_bytes']) > 0
                            for row in rows))
        self.assertGreater(float(rows[0]['final_rmse']), 0.0)

    def test_tracePathNaming(self):
        self.assertEqual(sweepTracePath('out/trace.csv', 'gamma', '0.5'),
                         os.path.join('out', 'trace_gamma-0.5.csv'))
        self.assertIsNone(sweepTracePath(None, 'gamma', '0.5'))


class TestCheck(CliTestCase):
    def test_defaultsPass(self):
        status, stdout, _ = self.invoke(
            'check', *SMALL_PROBLEM, *self.overrides(check__iters=30))
        self.assertEqual(status, EXIT_OK, msg=stdout)
        self.assertTrue(stdout.startswith('PASS'))

    def test_lazyThresholdsDoNotReachCheck(self):
        status, stdout, _ = self.invoke(
            'check', *SMALL_PROBLEM,
            *self.overrides(lazy__epsilon=100, lazy__delta_p=0.5,
                            check__iters=30))
        self.assertEqual(status, EXIT_OK, msg=stdout)

    def test_largeStepsizeRejected(self):
        status, stdout, _ = self.invoke(
            'check', *SMALL_PROBLEM, *self.overrides(check__gamma_scale=2))
        self.assertEqual(status, EXIT_CHECK_FAILED)
        self.assertIn('STEPSIZE', stdout)

    def test_looseThresholdRejected(self):
        status, stdout, _ = self.invoke(
            'check', *SMALL_PROBLEM, *self.overrides(check__epsilon=10))
        self.assertEqual(status, EXIT_CHECK_FAILED)
        self.assertIn('BETA_LAST', stdout)


class TestGen(CliTestCase):
    def test_generatedFileSolves(self):
        bal = self.path('synthetic.bal')
        status, stdout, _ = self.invoke(
            'gen', '--out', bal,
            *self.overrides(problem__synth__n_cameras=5))
        self.assertEqual(status, EXIT_OK)
        self.assertIn('5 camera(s)', stdout)
        status, stdout, _ = self.invoke(
            'run', *self.overrides(problem__source='bal', problem__path=bal,
                                   partition__n_agents=2,
                                   solver__max_iters=2))
        self.assertEqual(status, EXIT_OK)
        self.assertTrue(stdout.startswith('f='))

    def test_balSourceCannotGenerate(self):
        status, _, stderr = self.invoke(
            'gen', '--out', self.path('x.bal'),
            *self.overrides(problem__source='bal', problem__path='a.bal'))
        self.assertEqual(status, EXIT_ERROR)
        self.assertTrue(stderr.startswith('error: ValueError'))


class TestErrors(CliTestCase):
    def test_invalidConfigValue(self):
        status, _, stderr = self.invoke(
            'run', *self.overrides(solver__gamma=-1))
        self.assertEqual(status, EXIT_ERROR)
        self.assertIn('gamma', stderr)
        self.assertEqual(len(stderr.splitlines()), 1)

    def test_missingBalFile(self):
        status, _, stderr = self.invoke(
            'run', *self.overrides(problem__source='bal',
                                   problem__path=self.path('none.bal')))
        self.assertEqual(status, EXIT_ERROR)
        self.assertIn('FileNotFoundError', stderr)

    def test_threadCount(self):
        status, _, _ = self.invoke('run', '--threads', '0')
        self.assertEqual(status, EXIT_ERROR)
        with mock.patch.dict(os.environ, {'LARPG_THREADS': '4'}):
            self.assertEqual(resolveThreads(None), 4)
            self.assertEqual(resolveThreads(2), 2)
        with mock.patch.dict(os.environ, {'LARPG_THREADS': '0'}):
            with self.assertRaises(ValueError):
                resolveThreads(None)


if __name__ == '__main__':
    unittest.main()
