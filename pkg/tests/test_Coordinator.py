import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from LazyCollabBA.Coordinator import (PreconditionerError, aggregatePrecond,
                                      applySharedStep, computeStep)


def spdBlocks(rng: np.random.Generator, count: int) -> np.ndarray:
    factors = rng.normal(size=(count, 3, 3))
    return factors @ np.swapaxes(factors, 1, 2) + np.eye(3)


class TestAggregatePrecond(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(2)

    def test_invertsSummedBlocks(self):
        first, second = spdBlocks(self.rng, 3), spdBlocks(self.rng, 2)
        precond = aggregatePrecond([(np.array([0, 1, 3]), first),
                                    (np.array([1, 2]), second)], 4)
        total = np.zeros((4, 3, 3))
        total[[0, 1, 3]] += first
        total[[1, 2]] += second
        assert_allclose(precond.blocks @ total,
                        np.broadcast_to(np.eye(3), (4, 3, 3)), atol=1e-12)
        self.assertEqual(len(precond.jittered), 0)
        assert_array_equal(precond.blocks,
                           np.swapaxes(precond.blocks, 1, 2))

    def test_singularBlockIsJittered(self):
        singular = np.diag([1.0, 1.0, 0.0])[None]
        precond = aggregatePrecond([(np.array([0]), singular),
                                    (np.array([1]), np.eye(3)[None])], 2)
        assert_array_equal(precond.jittered, [0])
        self.assertTrue(np.all(np.isfinite(precond.blocks)))
        assert_allclose(precond.blocks[1], np.eye(3))

    def test_indefiniteBlockFails(self):
        with self.assertRaisesRegex(PreconditionerError, 'block 1'):
            aggregatePrecond([(np.array([0, 1]),
                               np.stack([np.eye(3), -np.eye(3)]))], 2)

    def test_uncoveredBlockFails(self):
        with self.assertRaises(PreconditionerError):
            aggregatePrecond([(np.array([0]), np.eye(3)[None])], 2)


class TestSharedStep(unittest.TestCase):
    def test_preconditionedStep(self):
        rng = np.random.default_rng(4)
        precond = aggregatePrecond([(np.arange(5), spdBlocks(rng, 5))], 5)
        wHat = rng.normal(size=(5, 3))
        step = computeStep(wHat, precond, 0.5)
        expected = np.einsum('mij,mj->mi', precond.blocks, wHat)
        assert_allclose(step.v, -0.5 * expected, rtol=1e-15)
        self.assertAlmostEqual(step.gradsq, float(np.sum(wHat * expected)),
                               places=12)
        self.assertGreater(step.gradsq, 0.0)

        points = rng.normal(size=(5, 3))
        assert_array_equal(applySharedStep(points, step.v), points + step.v)

    def test_stepsizeMustBePositive(self):
        precond = aggregatePrecond([(np.arange(1), np.eye(3)[None])], 1)
        with self.assertRaises(ValueError):
            computeStep(np.zeros((1, 3)), precond, 0.0)


if __name__ == '__main__':
    unittest.main()
