from abc import ABC, abstractmethod

import numpy as np


class AbstractSharedManifold(ABC):
    """
    Geometry of the shared blocks `y_l`: how a step is retracted onto the
    blocks and how stale tangent data is carried to the current tangent
    spaces.  Points are Euclidean; SE(3)-valued shared blocks would be a
    second implementation.
    """

    @abstractmethod
    def retract(self, blocks: np.ndarray, steps: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def transportVector(self, fromBase: np.ndarray, toBase: np.ndarray,
                        tangent: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def transportOperator(self, fromBase: np.ndarray, toBase: np.ndarray,
                          operator: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def inner(self, base: np.ndarray, u: np.ndarray,
              v: np.ndarray) -> np.ndarray:
        pass


class EuclideanPointManifold(AbstractSharedManifold):
    """
    Map points in R^3.  Retraction is addition; every transporter is the
    identity, so cached uploads are reused bit for bit.
    """

    def retract(self, blocks: np.ndarray, steps: np.ndarray) -> np.ndarray:
        return blocks + steps

    def transportVector(self, fromBase: np.ndarray, toBase: np.ndarray,
                        tangent: np.ndarray) -> np.ndarray:
        return tangent

    def transportOperator(self, fromBase: np.ndarray, toBase: np.ndarray,
                          operator: np.ndarray) -> np.ndarray:
        # T(k', k) ∘ S ∘ T(k, k') with both transporters the identity
        return operator

    def inner(self, base: np.ndarray, u: np.ndarray,
              v: np.ndarray) -> np.ndarray:
        return np.sum(u * v, axis=-1)


EUCLIDEAN_POINTS = EuclideanPointManifold()


def transporterApply(fromBase: np.ndarray, toBase: np.ndarray,
                     tangent: np.ndarray,
                     manifold: AbstractSharedManifold = EUCLIDEAN_POINTS) -> \
        np.ndarray:
    return manifold.transportVector(fromBase, toBase, tangent)
