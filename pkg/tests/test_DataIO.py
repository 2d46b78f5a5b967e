import io
import json
import os
import tempfile
import unittest
from dataclasses import replace

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
from scipy.spatial.transform import Rotation

from LazyCollabBA.DataIO import (TRACE_HEADER, BalFormatError, MetricsReport,
                                 ateRmse, balToBundle, bundleToBal,
                                 loadState, meanReproj, parseBal,
                                 positionRmse, readTrace, saveState,
                                 umeyamaSim3, writeBal, writeMetrics,
                                 writeTrace)
from LazyCollabBA.Geometry import projectBatch, quaternionsToMatrices
from LazyCollabBA.LarpgRuntime import RunConfig, run
from LazyCollabBA.ProblemLoader import SyntheticProblemLoader
from .helpers import TINY_BAL, smallProblem


def readTiny():
    with open(TINY_BAL) as stream:
        return parseBal(stream)


class TestBal(unittest.TestCase):
    def test_parseFixture(self):
        dataset = readTiny()
        self.assertEqual(dataset.cameras.shape, (3, 9))
        self.assertEqual(dataset.points.shape, (4, 3))
        assert_array_equal(dataset.obsCamera, [0, 0, 0, 1, 1, 2, 2, 2])
        assert_array_equal(dataset.obsPixels[4], [15.25, -12.0])
        self.assertEqual(dataset.cameras[1, 6], 520.0)
        assert_array_equal(dataset.points[3], [-0.15, -0.3, 0.2])

    def test_writeThenParseIsIdentity(self):
        dataset = readTiny()
        stream = io.StringIO()
        writeBal(dataset, stream)
        stream.seek(0)
        self.assertTrue(parseBal(stream).equals(dataset))

    def test_malformedFiles(self):
        cases = {
            '': 'empty',
            '1 1\n': 'header',
            '1 1 1\n0 0 1.0\n': 'observation',
            '1 1 1\n0 3 1.0 2.0\n': 'out of range',
            '1 1 1\n0 0 1.0 2.0\n' + '0\n' * 11: 'expected 12',
            '1 1 1\n0 0 1.0 2.0\n' + '0\n' * 13: 'more than',
        }
        for text, message in cases.items():
            with self.assertRaisesRegex(BalFormatError, message, msg=text):
                parseBal(io.StringIO(text))

    def test_badTokenReportsLine(self):
        with self.assertRaises(BalFormatError) as context:
            parseBal(io.StringIO('1 1 1\n0 0 1.0 abc\n'))
        self.assertEqual(context.exception.lineNumber, 2)

    def test_axisFlipPreservesProjection(self):
        dataset = readTiny()
        bundle = balToBundle(dataset)
        cameras = dataset.cameras[dataset.obsCamera]
        points = dataset.points[dataset.obsPoint]
        rotated = Rotation.from_rotvec(cameras[:, :3]).apply(points)
        inCamera = rotated + cameras[:, 3:6]
        normalized = -inCamera[:, :2] / inCamera[:, 2:3]
        r2 = np.sum(normalized * normalized, axis=1)
        distortion = 1.0 + cameras[:, 7] * r2 + cameras[:, 8] * r2 * r2
        expected = (cameras[:, 6] * distortion)[:, None] * normalized

        pixels, valid = projectBatch(
            quaternionsToMatrices(bundle.rotations)[bundle.obsCamera],
            bundle.translations[bundle.obsCamera],
            bundle.intrinsics[bundle.obsCamera],
            bundle.points[bundle.obsPoint])
        self.assertTrue(np.all(valid))
        assert_allclose(pixels[:, 0], expected[:, 0], rtol=1e-12)
        assert_allclose(pixels[:, 1], -expected[:, 1], rtol=1e-12)
        assert_array_equal(bundle.obsMeasurement[:, 1],
                           -dataset.obsPixels[:, 1])

    def test_bundleConversionInverts(self):
        dataset = readTiny()
        back = bundleToBal(balToBundle(dataset))
        assert_allclose(back.cameras, dataset.cameras, atol=1e-14)
        assert_array_equal(back.obsPixels, dataset.obsPixels)
        assert_array_equal(back.points, dataset.points)

    def test_pointCloudBundlesCannotBeWritten(self):
        bundle = SyntheticProblemLoader(point3dFraction=1.0).generateBundle()
        with self.assertRaises(ValueError):
            bundleToBal(bundle)

    def test_inexpressibleIntrinsicsRejected(self):
        bundle = balToBundle(readTiny())
        shifted = bundle.intrinsics.copy()
        shifted[1, 2] = 4.0
        with self.assertRaisesRegex(ValueError, 'camera 1'):
            bundleToBal(replace(bundle, intrinsics=shifted))
        negative = bundle.intrinsics.copy()
        negative[2, :2] = -500.0
        with self.assertRaisesRegex(ValueError, 'Focal lengths'):
            bundleToBal(replace(bundle, intrinsics=negative))


class TestAlignment(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(12)
        self.points = self.rng.normal(size=(25, 3))

    def test_recoversPlantedSimilarity(self):
        rotation = Rotation.random(random_state=self.rng).as_matrix()
        translation = self.rng.normal(size=3)
        transformed = 1.7 * self.points @ rotation.T + translation
        scale, R, t = umeyamaSim3(self.points, transformed)
        self.assertAlmostEqual(scale, 1.7, places=12)
        assert_allclose(R, rotation, atol=1e-12)
        assert_allclose(t, translation, atol=1e-12)
        self.assertLess(positionRmse(self.points, transformed), 1e-12)

    def test_errorIgnoresSimilarityOfEstimate(self):
        gt = self.points + 0.05 * self.rng.normal(size=self.points.shape)
        rotation = Rotation.random(random_state=self.rng).as_matrix()
        moved = 3.0 * self.points @ rotation.T + np.array([1.0, -2.0, 0.5])
        self.assertAlmostEqual(positionRmse(moved, gt),
                               positionRmse(self.points, gt), places=12)

    def test_reflectionIsNotAllowed(self):
        mirrored = self.points * np.array([1.0, 1.0, -1.0])
        _, R, _ = umeyamaSim3(self.points, mirrored)
        self.assertAlmostEqual(np.linalg.det(R), 1.0, places=12)
        self.assertGreater(positionRmse(self.points, mirrored), 0.1)

    def test_degenerateInputs(self):
        line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
        with self.assertRaises(ValueError):
            umeyamaSim3(line, line)
        with self.assertRaises(ValueError):
            umeyamaSim3(self.points[:2], self.points[:2])
        with self.assertRaises(ValueError):
            umeyamaSim3(self.points, self.points[:-1])

    def test_ateOfGroundTruthIsZero(self):
        problem = smallProblem()
        self.assertLess(ateRmse(problem.instance, problem.groundTruth,
                                problem.groundTruth), 1e-12)
        self.assertGreater(ateRmse(problem.instance, problem.initialState,
                                   problem.groundTruth), 1e-4)

    def test_meanReprojOfNoiselessProblem(self):
        problem = smallProblem(noisePx=0.0, point3dFraction=0.3)
        self.assertLess(meanReproj(problem.instance, problem.groundTruth),
                        1e-9)
        self.assertGreater(meanReproj(problem.instance, problem.initialState),
                           0.1)


class TestTraceAndMetrics(unittest.TestCase):
    def setUp(self):
        problem = smallProblem()
        self.result = run(problem.instance, problem.initialState,
                          RunConfig(maxIters=4), 1, problem.groundTruth)

    def test_traceColumns(self):
        stream = io.StringIO()
        writeTrace(self.result.trace, stream)
        lines = stream.getvalue().splitlines()
        self.assertEqual(lines[0], ','.join(TRACE_HEADER))
        self.assertEqual(len(lines), 5)

        stream.seek(0)
        rows = readTrace(stream)
        self.assertEqual([row['iter'] for row in rows], [0, 1, 2, 3])
        self.assertIsNone(rows[0]['lyapunov'])
        self.assertEqual(rows[-1]['uploads_cum_bytes'],
                         self.result.trace.totalUploadBytes)
        self.assertEqual(rows[2]['f'], self.result.trace.records[2].cost)

    def test_unexpectedHeader(self):
        with self.assertRaises(ValueError):
            readTrace(io.StringIO('iter,f\n0,1.0\n'))

    def test_metricsEchoConfig(self):
        report = MetricsReport(0.5, 1.25, 100, 40)
        stream = io.StringIO()
        writeMetrics(report, stream, {'solver': {'gamma': 1.0}})
        document = json.loads(stream.getvalue())
        self.assertEqual(document['mean_reproj'], 1.25)
        self.assertEqual(document['total_upload_bytes'], 100)
        self.assertEqual(document['config'], {'solver': {'gamma': 1.0}})
        with self.assertRaises(ValueError):
            MetricsReport(None, -1.0, 0, 0)

    def test_stateFile(self):
        with tempfile.TemporaryDirectory() as directory:
            path = os.path.join(directory, 'final.state')
            saveState(self.result.finalState, path)
            self.assertTrue(loadState(path).equals(self.result.finalState))


if __name__ == '__main__':
    unittest.main()
