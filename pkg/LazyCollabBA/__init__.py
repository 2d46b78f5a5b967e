from .ConvergenceTheory import (DescentParams, InadmissibleParametersError,
                                DescentInequality, admissibleParams,
                                checkDescent, estimateSigmaP)
from .Coordinator import Preconditioner, PreconditionerError
from .DataIO import BalDataset, BalFormatError, MetricsReport, parseBal
from .LarpgRuntime import LarpgRunner, RunConfig, run, runMonolithic
from .LazyCommunication import LazyConfig, MScaling, ProtocolViolationError
from .ProblemInstance import Observation, ObservationKind, ProblemInstance
from .ProblemLoader import (BalProblemLoader, NoiseProfile,
                            SyntheticProblemLoader, synthGenerate)
