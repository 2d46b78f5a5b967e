import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .ConvergenceTheory import lyapunov
from .Coordinator import (Preconditioner, SharedStep, aggregatePrecond,
                          applySharedStep, computeStep)
from .DataIO import ateRmse, meanReproj
from .Geometry import se3RetractBatch
from .LazyCommunication import (BlockCache, GradNormHistory, LazyConfig,
                                ProtocolViolationError, aggregateWhat,
                                approxGradBlocks, approxPrecondBlocks,
                                assembleDhat, assembleWhat, gradTrigger,
                                mScale, precondTrigger, staleGradBlocks)
from .LocalModel import (LAMBDA_DEFAULT, LocalBlocks, jacobiBlocks,
                         linearize, privateUpdate, reducedGradient)
from .ProblemInstance import AgentData, ProblemInstance, State, evaluateCost
from .SharedManifold import AbstractSharedManifold, EUCLIDEAN_POINTS

logger = logging.getLogger(__name__)

PRECOND_RECORD = np.dtype([('block', '<u4'), ('values', '<f8', (6,))])
GRAD_RECORD = np.dtype([('block', '<u4'), ('values', '<f8', (3,))])
GRADSQ_FIELD = np.dtype('<f8')
_UPPER = np.triu_indices(3)


class MessageKind(Enum):
    PRECOND_UPLOAD = 'precond_upload'
    GRAD_UPLOAD = 'grad_upload'
    PRECOND_DELTA = 'precond_delta'
    STEP_BROADCAST = 'step_broadcast'

    @property
    def isUpload(self) -> bool:
        return self in (MessageKind.PRECOND_UPLOAD, MessageKind.GRAD_UPLOAD)

    @property
    def record(self) -> np.dtype:
        return (PRECOND_RECORD if self in (MessageKind.PRECOND_UPLOAD,
                                           MessageKind.PRECOND_DELTA)
                else GRAD_RECORD)


@dataclass(frozen=True)
class Message:
    """
    A batch of fixed-size block records of one kind, little-endian: a
    4-byte block index followed by 6 (symmetric 3×3, upper triangle) or 3
    float64 values.  Step broadcasts lead with the float64 `gradsq`.
    """
    kind: MessageKind
    payload: bytes
    agent: Optional[int] = None

    def records(self) -> np.ndarray:
        offset = (GRADSQ_FIELD.itemsize
                  if self.kind is MessageKind.STEP_BROADCAST else 0)
        return np.frombuffer(self.payload, dtype=self.kind.record,
                             offset=offset)

    @property
    def numBlocks(self) -> int:
        return len(self.records())


def packSymmetric(blocks: np.ndarray) -> np.ndarray:
    return blocks[:, _UPPER[0], _UPPER[1]]


def unpackSymmetric(values: np.ndarray) -> np.ndarray:
    blocks = np.zeros((len(values), 3, 3))
    blocks[:, _UPPER[0], _UPPER[1]] = values
    blocks[:, _UPPER[1], _UPPER[0]] = values
    return blocks


def _encode(kind: MessageKind, blockIds: np.ndarray,
            values: np.ndarray) -> bytes:
    records = np.zeros(len(blockIds), dtype=kind.record)
    records['block'] = blockIds
    records['values'] = (packSymmetric(values) if values.ndim == 3
                         else values)
    return records.tobytes()


def encodePrecondUpload(agent: int, blockIds: np.ndarray,
                        blocks: np.ndarray) -> Message:
    return Message(MessageKind.PRECOND_UPLOAD,
                   _encode(MessageKind.PRECOND_UPLOAD, blockIds, blocks),
                   agent)


def encodeGradUpload(agent: int, blockIds: np.ndarray,
                     values: np.ndarray) -> Message:
    return Message(MessageKind.GRAD_UPLOAD,
                   _encode(MessageKind.GRAD_UPLOAD, blockIds, values), agent)


def encodePrecondDelta(blockIds: np.ndarray, blocks: np.ndarray) -> Message:
    return Message(MessageKind.PRECOND_DELTA,
                   _encode(MessageKind.PRECOND_DELTA, blockIds, blocks))


def encodeStepBroadcast(v: np.ndarray, gradsq: float) -> Message:
    header = np.array([gradsq], dtype=GRADSQ_FIELD).tobytes()
    return Message(MessageKind.STEP_BROADCAST,
                   header + _encode(MessageKind.STEP_BROADCAST,
                                    np.arange(len(v)), v))


def decodeBlocks(message: Message) -> Tuple[np.ndarray, np.ndarray]:
    """
    Returns:
        Tuple[np.ndarray, np.ndarray]: Block ids and their values, 3×3
            blocks for preconditioner messages and 3-vectors otherwise.
    """
    records = message.records()
    blockIds = records['block'].astype(np.int64)
    values = np.array(records['values'], dtype=float)
    if message.kind.record is PRECOND_RECORD:
        values = unpackSymmetric(values)
    return blockIds, values


def decodeStepBroadcast(message: Message, numPoints: int) -> \
        Tuple[np.ndarray, float]:
    if message.kind is not MessageKind.STEP_BROADCAST:
        raise ProtocolViolationError(f'Expected a step broadcast, got '
                                     f'{message.kind.name}.')
    gradsq = float(np.frombuffer(message.payload, dtype=GRADSQ_FIELD,
                                 count=1)[0])
    blockIds, values = decodeBlocks(message)
    v = np.zeros((numPoints, 3))
    v[blockIds] = values
    return v, gradsq


def byteAccount(message: Message) -> int:
    return len(message.payload)


@dataclass(frozen=True)
class RunConfig:
    """
    Solver parameters.  `beta`, when given, enables the Lyapunov column of
    the trace.  The iteration draws no random numbers; `seed` is carried
    with the run for reproducibility records.
    """
    GAMMA_DEFAULT = 1.0
    LAMBDA_DEFAULT = LAMBDA_DEFAULT
    MAX_ITERS_DEFAULT = 50

    gamma: float = GAMMA_DEFAULT
    lam: float = LAMBDA_DEFAULT
    lazy: LazyConfig = field(default_factory=LazyConfig)
    maxIters: int = MAX_ITERS_DEFAULT
    seed: int = 0
    beta: Optional[Tuple[float, ...]] = None
    recordMetrics: bool = True
    keepStates: bool = False

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f'gamma must be positive, got {self.gamma}.')
        if not self.lam > 0:
            raise ValueError(f'lambda must be positive, got {self.lam}.')
        if self.maxIters < 1:
            raise ValueError(f'max_iters must be at least 1, got '
                             f'{self.maxIters}.')
        if self.beta is not None:
            beta = tuple(map(float, self.beta))
            if len(beta) != self.lazy.dbar:
                raise ValueError(f'beta needs {self.lazy.dbar} entries, got '
                                 f'{len(beta)}.')
            object.__setattr__(self, 'beta', beta)


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    cost: float
    gradNorm: float
    whatNormSq: float
    lyapunov: Optional[float]
    precondUploads: Tuple[int, ...]
    gradUploads: Tuple[int, ...]
    gradUploadFraction: float
    uploadBytes: int
    broadcastBytes: int
    stepNormShared: float
    stepNormPrivate: float
    ate: Optional[float]
    reproj: Optional[float]
    wallTime: float


@dataclass
class IterationTrace:
    records: List[IterationRecord] = field(default_factory=list)

    def append(self, record: IterationRecord):
        if self.records and (
                record.uploadBytes < self.records[-1].uploadBytes or
                record.broadcastBytes < self.records[-1].broadcastBytes):
            raise ValueError('Cumulative byte counters must not decrease.')
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    @property
    def totalUploadBytes(self) -> int:
        return self.records[-1].uploadBytes if self.records else 0

    @property
    def totalBroadcastBytes(self) -> int:
        return self.records[-1].broadcastBytes if self.records else 0


@dataclass
class RunResult:
    trace: IterationTrace
    finalState: State
    finalCost: float
    states: List[State] = field(default_factory=list)


class AgentNode:
    """
    One agent: owns its poses, a copy of its observed shared blocks, its
    half of the mirrored block cache and the broadcast preconditioner
    blocks for `L_i`.  Never sees another agent's data.
    """

    def __init__(self, agent: AgentData, rotations: np.ndarray,
                 translations: np.ndarray, points: np.ndarray,
                 config: RunConfig, numAgents: int, numPoints: int,
                 manifold: AbstractSharedManifold = EUCLIDEAN_POINTS):
        self.agent = agent
        self.config = config
        self.numAgents = numAgents
        self.numPoints = numPoints
        self.manifold = manifold
        self.rotations = np.array(rotations, dtype=float)
        self.translations = np.array(translations, dtype=float)
        self.points = np.array(points[agent.observedBlocks], dtype=float)
        self.cache = BlockCache(agent.observedBlocks)
        self.precond = np.zeros((agent.numBlocks, 3, 3))
        self.history = GradNormHistory(config.lazy.dbar)
        self.scale = mScale(agent.numBlocks, numPoints, config.lazy)
        self.localBlocks: Optional[LocalBlocks] = None
        self.jacobi: Optional[np.ndarray] = None
        self.reduced: Optional[np.ndarray] = None

    def linearizeStage(self, iteration: int) -> Message:
        """Linearizes, then uploads the Jacobi blocks that trigger."""
        self.localBlocks = linearize(self.agent, self.rotations,
                                     self.translations, self.points,
                                     self.config.lam)
        self.jacobi = jacobiBlocks(self.localBlocks).values
        self.reduced = reducedGradient(self.localBlocks).values

        sTilde, present = approxPrecondBlocks(self.cache, self.points,
                                              self.manifold)
        upload = ~present | precondTrigger(self.jacobi, sTilde,
                                           self.config.lazy.deltaP)
        index = np.flatnonzero(upload)
        self.cache.commitS(index, self.jacobi[index], iteration,
                           self.points[index])
        return encodePrecondUpload(self.agent.agentId,
                                   self.agent.observedBlocks[index],
                                   self.jacobi[index])

    def receivePreconditioner(self, message: Message):
        blockIds, blocks = decodeBlocks(message)
        mine = np.isin(blockIds, self.agent.observedBlocks)
        self.precond[self.cache.localIndex(blockIds[mine])] = blocks[mine]

    def gradientStage(self, iteration: int) -> Message:
        """Uploads the reduced-gradient blocks that trigger or went stale."""
        wTilde, present = approxGradBlocks(self.cache, self.points,
                                           self.manifold)
        upload = ~present | gradTrigger(
            self.reduced, wTilde, self.precond, self.history,
            self.config.lazy, self.scale, self.numAgents)
        upload |= staleGradBlocks(self.cache, iteration,
                                  self.config.lazy.maxStaleness)
        index = np.flatnonzero(upload)
        self.cache.commitW(index, self.reduced[index], iteration,
                           self.points[index])
        return encodeGradUpload(self.agent.agentId,
                                self.agent.observedBlocks[index],
                                self.reduced[index])

    def applyStep(self, message: Message) -> np.ndarray:
        """Eliminated pose update for the broadcast step, then retraction."""
        v, gradsq = decodeStepBroadcast(message, self.numPoints)
        vLocal = v[self.agent.observedBlocks]
        u = privateUpdate(self.localBlocks, vLocal)
        self.rotations, self.translations = se3RetractBatch(
            self.rotations, self.translations, u)
        self.points = self.manifold.retract(self.points, vLocal)
        self.history.push(gradsq)
        return u


class ServerNode:
    """
    The coordinator: the shared blocks, the server half of every agent's
    block cache, the current preconditioner and the gradient-norm history.
    """

    def __init__(self, instance: ProblemInstance, points: np.ndarray,
                 config: RunConfig,
                 manifold: AbstractSharedManifold = EUCLIDEAN_POINTS):
        self.instance = instance
        self.config = config
        self.manifold = manifold
        self.points = np.array(points, dtype=float)
        self.caches = [BlockCache(a.observedBlocks) for a in instance.agents]
        self.precond: Optional[Preconditioner] = None
        self.history = GradNormHistory(config.lazy.dbar)

    def _receive(self, message: Message, agent: AgentData, kind: MessageKind,
                 cache: BlockCache) -> Tuple[np.ndarray, np.ndarray]:
        if message.kind is not kind or message.agent != agent.agentId:
            raise ProtocolViolationError(
                f'Expected {kind.name} from agent {agent.agentId}, got '
                f'{message.kind.name} from agent {message.agent}.')
        blockIds, values = decodeBlocks(message)
        if len(np.unique(blockIds)) != len(blockIds):
            raise ProtocolViolationError(f'Agent {agent.agentId} uploaded a '
                                         f'block twice.')
        return cache.localIndex(blockIds), values

    def aggregatePreconditioner(self, uploads: Sequence[Message],
                                iteration: int) -> Message:
        """Builds `P^k` from the lazy blocks; broadcasts changed blocks."""
        dHats = []
        for agent, cache, message in zip(self.instance.agents, self.caches,
                                         uploads):
            index, blocks = self._receive(
                message, agent, MessageKind.PRECOND_UPLOAD, cache)
            dHats.append((agent.observedBlocks, assembleDhat(
                cache, index, blocks, self.points[agent.observedBlocks],
                iteration, self.manifold)))
        precond = aggregatePrecond(dHats, self.instance.numPoints)

        if self.precond is None:
            changed = np.ones(precond.numBlocks, dtype=bool)
        else:
            changed = np.any(precond.blocks != self.precond.blocks,
                             axis=(1, 2))
        self.precond = precond
        return encodePrecondDelta(np.flatnonzero(changed),
                                  precond.blocks[changed])

    def aggregateGradient(self, uploads: Sequence[Message],
                          iteration: int) -> \
            Tuple[Message, SharedStep, np.ndarray]:
        """Assembles `ŵ`, takes the shared step and broadcasts it."""
        wHats = []
        for agent, cache, message in zip(self.instance.agents, self.caches,
                                         uploads):
            index, values = self._receive(
                message, agent, MessageKind.GRAD_UPLOAD, cache)
            wHats.append((agent.observedBlocks, assembleWhat(
                cache, index, values, self.points[agent.observedBlocks],
                iteration, self.manifold)))
        wHat = aggregateWhat(wHats, self.instance.numPoints)
        step = computeStep(wHat, self.precond, self.config.gamma)
        self.points = applySharedStep(self.points, step.v, self.manifold)
        self.history.push(step.gradsq)
        return encodeStepBroadcast(step.v, step.gradsq), step, wHat


def fullGradientNorm(localBlocks: Sequence[LocalBlocks],
                     numPoints: int) -> float:
    """`‖∇f‖` from the agents' unreduced gradients."""
    poseSq = 0.0
    for lb in localBlocks:
        poseSq += float(np.sum(lb.gX * lb.gX))
    gY = aggregateWhat([(lb.blockIds, lb.gY) for lb in localBlocks],
                       numPoints)
    return float(np.sqrt(poseSq + np.sum(gY * gY)))


class LarpgRunner:
    """
    Bulk-synchronous execution of the lazily aggregated reduced
    preconditioned gradient method.  Agent stages run on a thread pool;
    the server stages and every reduction run in ascending agent order, so
    the trace does not depend on the thread count.
    """

    def __init__(self, instance: ProblemInstance, initialState: State,
                 config: RunConfig, threads: int = 1,
                 groundTruth: Optional[State] = None,
                 manifold: AbstractSharedManifold = EUCLIDEAN_POINTS):
        instance.checkState(initialState)
        if threads < 1:
            raise ValueError(f'threads must be at least 1, got {threads}.')
        self.instance = instance
        self.config = config
        self.threads = int(threads)
        self.groundTruth = groundTruth
        self.agents = [
            AgentNode(agent, initialState.rotations[i],
                      initialState.translations[i], initialState.points,
                      config, instance.numAgents, instance.numPoints,
                      manifold)
            for i, agent in enumerate(instance.agents)]
        self.server = ServerNode(instance, initialState.points, config,
                                 manifold)
        self.uploadBytes = 0
        self.broadcastBytes = 0

    def currentState(self) -> State:
        return State([a.rotations.copy() for a in self.agents],
                     [a.translations.copy() for a in self.agents],
                     self.server.points.copy())

    def cachesCoherent(self) -> bool:
        return all(a.cache.equals(c)
                   for a, c in zip(self.agents, self.server.caches))

    def run(self) -> RunResult:
        logger.info(f'Running {self.config.maxIters} iteration(s) on '
                    f'{self.instance.numAgents} agent(s), '
                    f'{self.instance.numPoints} shared block(s), '
                    f'{self.threads} thread(s)')
        trace = IterationTrace()
        states: List[State] = []
        with ThreadPoolExecutor(max_workers=self.threads) as executor:
            for iteration in range(self.config.maxIters):
                if self.config.keepStates:
                    states.append(self.currentState())
                trace.append(self.step(iteration, executor))

        finalState = self.currentState()
        if self.config.keepStates:
            states.append(finalState.copy())
        finalCost, _ = evaluateCost(self.instance, finalState)
        logger.info(f'Finished: f={finalCost:.6g}, uploads='
                    f'{trace.totalUploadBytes} B, broadcasts='
                    f'{trace.totalBroadcastBytes} B')
        return RunResult(trace, finalState, finalCost, states)

    def step(self, iteration: int,
             executor: ThreadPoolExecutor) -> IterationRecord:
        started = time.perf_counter()
        ate, reproj = _metrics(self.instance, self.currentState(),
                               self.groundTruth, self.config)

        # stage 1: Jacobi blocks and the preconditioner
        precondUploads = list(executor.map(
            lambda a: a.linearizeStage(iteration), self.agents))
        localBlocks = [a.localBlocks for a in self.agents]
        cost = 0.0
        for lb in localBlocks:
            cost += lb.cost
        lyapunovValue = (None if self.config.beta is None else
                         lyapunov(cost, self.server.history,
                                  self.config.beta))
        delta = self.server.aggregatePreconditioner(precondUploads,
                                                    iteration)
        list(executor.map(lambda a: a.receivePreconditioner(delta),
                          self.agents))

        # stage 2: reduced gradients, using this iteration's preconditioner
        gradUploads = list(executor.map(
            lambda a: a.gradientStage(iteration), self.agents))
        broadcast, step, _ = self.server.aggregateGradient(gradUploads,
                                                           iteration)

        # stage 3: private updates and retraction
        privateSteps = list(executor.map(lambda a: a.applyStep(broadcast),
                                         self.agents))

        self.uploadBytes += sum(map(byteAccount,
                                    precondUploads + gradUploads))
        self.broadcastBytes += byteAccount(delta) + byteAccount(broadcast)
        gradCounts = tuple(m.numBlocks for m in gradUploads)
        observed = sum(a.agent.numBlocks for a in self.agents)
        record = IterationRecord(
            iteration=iteration,
            cost=cost,
            gradNorm=fullGradientNorm(localBlocks, self.instance.numPoints),
            whatNormSq=step.gradsq,
            lyapunov=lyapunovValue,
            precondUploads=tuple(m.numBlocks for m in precondUploads),
            gradUploads=gradCounts,
            gradUploadFraction=(sum(gradCounts) / observed if observed
                                else 0.0),
            uploadBytes=self.uploadBytes,
            broadcastBytes=self.broadcastBytes,
            stepNormShared=float(np.linalg.norm(step.v)),
            stepNormPrivate=_stackedNorm(privateSteps),
            ate=ate,
            reproj=reproj,
            wallTime=time.perf_counter() - started)
        logger.debug(f'Iteration {iteration}: f={cost:.6g} '
                     f'gradsq={step.gradsq:.3g} S uploads='
                     f'{record.precondUploads} w uploads={gradCounts}')
        return record


def _stackedNorm(arrays: Sequence[np.ndarray]) -> float:
    total = 0.0
    for array in arrays:
        total += float(np.sum(array * array))
    return float(np.sqrt(total))


def _metrics(instance: ProblemInstance, state: State,
             groundTruth: Optional[State], config: RunConfig) -> \
        Tuple[Optional[float], Optional[float]]:
    if not config.recordMetrics:
        return None, None
    reproj = meanReproj(instance, state)
    ate = None
    if groundTruth is not None and instance.numCameras >= 3:
        ate = ateRmse(instance, state, groundTruth)
    return ate, reproj


def run(instance: ProblemInstance, initialState: State, config: RunConfig,
        threads: int = 1, groundTruth: Optional[State] = None) -> RunResult:
    return LarpgRunner(instance, initialState, config, threads,
                       groundTruth).run()


def runMonolithic(instance: ProblemInstance, initialState: State,
                  config: RunConfig,
                  groundTruth: Optional[State] = None) -> RunResult:
    """
    Reference implementation of the same iteration with every block fresh
    and no messaging.  Byte counters stay at zero.
    """
    instance.checkState(initialState)
    state = initialState.copy()
    history = GradNormHistory(config.lazy.dbar)
    trace = IterationTrace()
    states: List[State] = []
    for iteration in range(config.maxIters):
        started = time.perf_counter()
        if config.keepStates:
            states.append(state.copy())
        ate, reproj = _metrics(instance, state, groundTruth, config)

        localBlocks = [
            linearize(agent, state.rotations[i], state.translations[i],
                      state.points[agent.observedBlocks], config.lam)
            for i, agent in enumerate(instance.agents)]
        cost = 0.0
        for lb in localBlocks:
            cost += lb.cost
        lyapunovValue = (None if config.beta is None else
                         lyapunov(cost, history, config.beta))
        precond = aggregatePrecond(
            [(lb.blockIds, jacobiBlocks(lb).values) for lb in localBlocks],
            instance.numPoints)
        wHat = aggregateWhat(
            [(lb.blockIds, reducedGradient(lb).values)
             for lb in localBlocks], instance.numPoints)
        step = computeStep(wHat, precond, config.gamma)

        privateSteps = []
        for i, lb in enumerate(localBlocks):
            u = privateUpdate(lb, step.v[lb.blockIds])
            state.rotations[i], state.translations[i] = se3RetractBatch(
                state.rotations[i], state.translations[i], u)
            privateSteps.append(u)
        state.points = applySharedStep(state.points, step.v)
        history.push(step.gradsq)

        counts = tuple(lb.numBlocks for lb in localBlocks)
        trace.append(IterationRecord(
            iteration=iteration, cost=cost,
            gradNorm=fullGradientNorm(localBlocks, instance.numPoints),
            whatNormSq=step.gradsq, lyapunov=lyapunovValue,
            precondUploads=counts, gradUploads=counts,
            gradUploadFraction=1.0, uploadBytes=0, broadcastBytes=0,
            stepNormShared=float(np.linalg.norm(step.v)),
            stepNormPrivate=_stackedNorm(privateSteps),
            ate=ate, reproj=reproj,
            wallTime=time.perf_counter() - started))

    if config.keepStates:
        states.append(state.copy())
    finalCost, _ = evaluateCost(instance, state)
    return RunResult(trace, state, finalCost, states)
