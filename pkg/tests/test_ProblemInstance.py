import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from LazyCollabBA.Geometry import CameraIntrinsics
from LazyCollabBA.ProblemInstance import (Observation, ObservationKind,
                                          ProblemInstance, State,
                                          agentCost, evaluateCost,
                                          evaluateResiduals)
from .helpers import smallProblem

INTRINSICS = CameraIntrinsics(500.0, 500.0)


def handmadeInstance() -> ProblemInstance:
    observations = [
        Observation(0, 1, 2, ObservationKind.REPROJECTION,
                    np.array([10.0, -4.0])),
        Observation(0, 0, 0, ObservationKind.REPROJECTION,
                    np.array([1.0, 2.0]), weight=2.0),
        Observation(0, 0, 1, ObservationKind.POINT3D,
                    np.array([0.0, 0.0, 3.0])),
        Observation(1, 0, 1, ObservationKind.REPROJECTION,
                    np.array([-3.0, 5.0])),
    ]
    return ProblemInstance.fromObservations(
        [[INTRINSICS, INTRINSICS], [INTRINSICS]], 3, observations)


def identityState(instance: ProblemInstance, points: np.ndarray) -> State:
    return State(
        [np.tile([1.0, 0.0, 0.0, 0.0], (a.numPoses, 1))
         for a in instance.agents],
        [np.zeros((a.numPoses, 3)) for a in instance.agents],
        points)


class TestObservation(unittest.TestCase):
    def test_weightMustBePositive(self):
        with self.assertRaises(ValueError):
            Observation(0, 0, 0, ObservationKind.REPROJECTION,
                        np.zeros(2), weight=0.0)

    def test_measurementShapeFollowsKind(self):
        with self.assertRaises(ValueError):
            Observation(0, 0, 0, ObservationKind.POINT3D, np.zeros(2))

    def test_kindFromName(self):
        self.assertIs(ObservationKind('point3d'), ObservationKind.POINT3D)
        self.assertIs(ObservationKind(0), ObservationKind.REPROJECTION)
        with self.assertRaises(ValueError):
            ObservationKind('lidar')


class TestProblemInstance(unittest.TestCase):
    def test_fromObservationsOrdersByPose(self):
        instance = handmadeInstance()
        agent = instance.agents[0]
        assert_array_equal(agent.obsPose, [0, 0, 1])
        assert_array_equal(agent.observedBlocks, [0, 1, 2])
        assert_array_equal(agent.cameraIds, [0, 1])
        assert_array_equal(instance.agents[1].cameraIds, [2])
        self.assertEqual(instance.numCameras, 3)
        self.assertEqual(instance.agents[1].numBlocks, 1)

    def test_unobservedBlockRejected(self):
        observations = [Observation(0, 0, 0, ObservationKind.REPROJECTION,
                                    np.zeros(2))]
        with self.assertRaisesRegex(ValueError, 'not observed'):
            ProblemInstance.fromObservations([[INTRINSICS]], 2, observations)

    def test_unknownAgentRejected(self):
        observations = [Observation(0, 0, 0, ObservationKind.REPROJECTION,
                                    np.zeros(2)),
                        Observation(3, 0, 0, ObservationKind.REPROJECTION,
                                    np.zeros(2))]
        with self.assertRaises(ValueError):
            ProblemInstance.fromObservations([[INTRINSICS]], 1, observations)

    def test_globalStateConversion(self):
        problem = smallProblem()
        instance, state = problem.instance, problem.initialState
        rotations, translations = instance.globalFromState(state)
        back = instance.stateFromGlobal(rotations, translations,
                                        state.points)
        self.assertTrue(back.equals(state))

    def test_checkStateRejectsWrongSizes(self):
        problem = smallProblem()
        state = problem.initialState.copy()
        state.points = state.points[:-1]
        with self.assertRaises(ValueError):
            evaluateCost(problem.instance, state)


class TestResiduals(unittest.TestCase):
    def test_handmadeResiduals(self):
        instance = handmadeInstance()
        points = np.array([[0.0, 0.0, 2.0], [0.5, -0.5, 4.0],
                           [0.2, 0.1, 1.0]])
        state = identityState(instance, points)
        agent = instance.agents[0]
        residuals, valid = evaluateResiduals(
            agent, state.rotations[0], state.translations[0], points)
        self.assertTrue(np.all(valid))
        # pose 0 sees point 0 at the principal point
        assert_allclose(residuals[0], [1.0, 2.0, 0.0])
        # point-cloud row: y - R q - t
        assert_allclose(residuals[1], [0.5, -0.5, 1.0])
        assert_allclose(residuals[2], [10.0 - 100.0, -4.0 - 50.0, 0.0])

        expected = (2.0 * 5.0 + (0.25 + 0.25 + 1.0)
                    + (90.0 ** 2 + 54.0 ** 2))
        self.assertAlmostEqual(agentCost(agent, state.rotations[0],
                                         state.translations[0], points),
                               expected, places=9)

    def test_behindCameraContributesNothing(self):
        instance = handmadeInstance()
        points = np.array([[0.0, 0.0, -2.0], [0.5, -0.5, 4.0],
                           [0.2, 0.1, 1.0]])
        state = identityState(instance, points)
        residuals, valid = evaluateResiduals(
            instance.agents[0], state.rotations[0], state.translations[0],
            points)
        self.assertFalse(valid[0])
        assert_array_equal(residuals[0], 0.0)

    def test_costSumsAgentsInOrder(self):
        problem = smallProblem(point3dFraction=0.3)
        total, perAgent = evaluateCost(problem.instance, problem.initialState)
        expected = 0.0
        for value in perAgent:
            expected += value
        self.assertEqual(total, expected)
        self.assertEqual(len(perAgent), problem.instance.numAgents)

    def test_noiselessGroundTruthHasZeroCost(self):
        problem = smallProblem(noisePx=0.0, point3dFraction=0.5)
        total, _ = evaluateCost(problem.instance, problem.groundTruth)
        self.assertLess(total, 1e-18)


if __name__ == '__main__':
    unittest.main()
