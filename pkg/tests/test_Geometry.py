import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
from scipy.linalg import expm
from scipy.spatial.transform import Rotation

from LazyCollabBA.Geometry import (CameraIntrinsics, Pose, PoseTangent,
                                   matricesToQuaternions,
                                   pointResidualJacobiansBatch, project,
                                   projectJacobians, quaternionsToMatrices,
                                   se3Retract, se3RetractBatch, skew)
from .helpers import relativeError


def twistMatrix(xi: np.ndarray) -> np.ndarray:
    hat = np.zeros((4, 4))
    hat[:3, :3] = skew(xi[:3])
    hat[:3, 3] = xi[3:]
    return hat


def randomPose(rng: np.random.Generator) -> Pose:
    quaternion = Rotation.random(random_state=rng).as_quat(scalar_first=True)
    return Pose(quaternion, rng.normal(size=3))


class TestRetraction(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(7)

    def assertMatchesMatrixExponential(self, pose: Pose, xi: np.ndarray):
        moved = se3Retract(pose, PoseTangent.fromVector(xi))
        transform = np.eye(4)
        transform[:3, :3] = pose.rotationMatrix()
        transform[:3, 3] = pose.translation
        expected = transform @ expm(twistMatrix(xi))
        assert_allclose(moved.rotationMatrix(), expected[:3, :3], atol=1e-12)
        assert_allclose(moved.translation, expected[:3, 3], atol=1e-12)

    def test_matchesMatrixExponential(self):
        for _ in range(10):
            xi = self.rng.normal(scale=0.5, size=6)
            self.assertMatchesMatrixExponential(randomPose(self.rng), xi)

    def test_smallAngleSeries(self):
        xi = np.concatenate([self.rng.normal(scale=1e-6, size=3),
                             self.rng.normal(size=3)])
        self.assertMatchesMatrixExponential(randomPose(self.rng), xi)

    def test_zeroTangentLeavesPoseUntouched(self):
        quaternions = Rotation.random(4, random_state=self.rng).as_quat(
            scalar_first=True)
        translations = self.rng.normal(size=(4, 3))
        xi = np.zeros((4, 6))
        xi[1] = [0.1, 0.0, 0.0, 0.0, 0.2, 0.0]
        moved, shifted = se3RetractBatch(quaternions, translations, xi)
        for row in (0, 2, 3):
            assert_array_equal(moved[row], quaternions[row])
            assert_array_equal(shifted[row], translations[row])
        self.assertFalse(np.array_equal(moved[1], quaternions[1]))

    def test_quaternionsStayUnit(self):
        quaternions = Rotation.random(5, random_state=self.rng).as_quat(
            scalar_first=True)
        moved, _ = se3RetractBatch(quaternions, np.zeros((5, 3)),
                                   self.rng.normal(scale=2.0, size=(5, 6)))
        assert_allclose(np.linalg.norm(moved, axis=1), 1.0, atol=1e-15)

    def test_nonFiniteTangentRejected(self):
        with self.assertRaises(ValueError):
            se3Retract(Pose.identity(),
                       PoseTangent.fromVector([np.nan, 0, 0, 0, 0, 0]))


class TestProjection(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(11)
        self.intrinsics = CameraIntrinsics(500.0, 480.0, 3.0, -2.0,
                                           0.01, 0.001)

    def test_pinholeValues(self):
        pixels, valid = project(Pose.identity(), CameraIntrinsics(500, 500),
                                np.array([0.1, 0.2, 2.0]))
        self.assertTrue(valid)
        assert_allclose(pixels, [25.0, 50.0], rtol=1e-15)

    def test_behindCameraIsInvalid(self):
        pixels, valid = project(Pose.identity(), self.intrinsics,
                                np.array([0.1, 0.2, -1.0]))
        self.assertFalse(valid)
        assert_array_equal(pixels, [0.0, 0.0])

    def test_intrinsicsValidated(self):
        with self.assertRaises(ValueError):
            CameraIntrinsics(0.0, 500.0)

    def test_jacobiansMatchFiniteDifferences(self):
        step = 1e-6
        for _ in range(20):
            pose = randomPose(self.rng)
            direction = pose.rotationMatrix()[2]
            point = (pose.center() + 3.0 * direction
                     + self.rng.normal(scale=0.3, size=3))
            jPose, jPoint = projectJacobians(pose, self.intrinsics, point)

            numericPose = np.zeros((2, 6))
            for k in range(6):
                xi = np.zeros(6)
                xi[k] = step
                plus, _ = project(se3Retract(pose, PoseTangent.fromVector(xi)),
                                  self.intrinsics, point)
                minus, _ = project(
                    se3Retract(pose, PoseTangent.fromVector(-xi)),
                    self.intrinsics, point)
                numericPose[:, k] = -(plus - minus) / (2 * step)
            numericPoint = np.zeros((2, 3))
            for k in range(3):
                delta = np.zeros(3)
                delta[k] = step
                plus, _ = project(pose, self.intrinsics, point + delta)
                minus, _ = project(pose, self.intrinsics, point - delta)
                numericPoint[:, k] = -(plus - minus) / (2 * step)

            self.assertLess(relativeError(jPose, numericPose), 1e-5)
            self.assertLess(relativeError(jPoint, numericPoint), 1e-5)

    def test_pointResidualJacobians(self):
        pose = randomPose(self.rng)
        measurement = self.rng.normal(size=3)
        point = self.rng.normal(size=3)
        jPose, jPoint = pointResidualJacobiansBatch(
            pose.rotationMatrix()[None], measurement[None])

        def residual(p: Pose) -> np.ndarray:
            return point - p.rotationMatrix() @ measurement - p.translation

        step = 1e-6
        numeric = np.zeros((3, 6))
        for k in range(6):
            xi = np.zeros(6)
            xi[k] = step
            numeric[:, k] = (
                residual(se3Retract(pose, PoseTangent.fromVector(xi)))
                - residual(se3Retract(pose, PoseTangent.fromVector(-xi)))
            ) / (2 * step)
        self.assertLess(relativeError(jPose[0], numeric), 1e-6)
        assert_array_equal(jPoint[0], np.eye(3))


class TestRotationHelpers(unittest.TestCase):
    def test_skewIsCrossProduct(self):
        rng = np.random.default_rng(3)
        v, u = rng.normal(size=3), rng.normal(size=3)
        assert_allclose(skew(v) @ u, np.cross(v, u), atol=1e-15)

    def test_quaternionsAreScalarFirst(self):
        matrix = quaternionsToMatrices(np.array([[1.0, 0.0, 0.0, 0.0]]))
        assert_array_equal(matrix[0], np.eye(3))
        quaternion = matricesToQuaternions(
            Rotation.from_rotvec([0.0, 0.0, np.pi / 2]).as_matrix())
        assert_allclose(np.abs(quaternion[0]),
                        [np.sqrt(0.5), 0.0, 0.0, np.sqrt(0.5)], atol=1e-15)

    def test_emptyStacks(self):
        self.assertEqual(quaternionsToMatrices(np.zeros((0, 4))).shape,
                         (0, 3, 3))
        self.assertEqual(matricesToQuaternions(np.zeros((0, 3, 3))).shape,
                         (0, 4))


if __name__ == '__main__':
    unittest.main()
