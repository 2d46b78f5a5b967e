import json
import logging
import math
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Union

from pydantic import (BaseModel, ConfigDict, Field, field_serializer,
                      field_validator, model_validator)

from .LazyCommunication import LazyConfig, MScaling
from .LarpgRuntime import RunConfig
from .ProblemLoader import (BalProblemLoader, LoadedProblem, NoiseProfile,
                            SyntheticProblemLoader)

logger = logging.getLogger(__name__)


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid', populate_by_name=True)


class SynthSection(_Section):
    n_cameras: int = Field(SyntheticProblemLoader.NUM_CAMERAS_DEFAULT, ge=1)
    n_points: int = Field(SyntheticProblemLoader.NUM_POINTS_DEFAULT, ge=1)
    density: float = Field(
        SyntheticProblemLoader.OBSERVATION_DENSITY_DEFAULT, gt=0, le=1)
    noise_px: float = Field(SyntheticProblemLoader.NOISE_PX_DEFAULT, ge=0)
    point3d_fraction: float = Field(0.0, ge=0, le=1)
    seed: int = 0


class ProblemSection(_Section):
    source: Literal['synth', 'bal'] = 'synth'
    path: Optional[str] = None
    synth: SynthSection = Field(default_factory=SynthSection)

    @model_validator(mode='after')
    def checkPath(self):
        if self.source == 'bal' and not self.path:
            raise ValueError('problem.path is required for a BAL problem')
        return self


class PartitionSection(_Section):
    n_agents: int = Field(SyntheticProblemLoader.NUM_AGENTS_DEFAULT, ge=1)
    seed: int = 0


class NoiseSection(_Section):
    """Initial-state perturbation; `profile` replaces the three sigmas."""
    profile: Optional[str] = None
    rot_deg: float = Field(NoiseProfile.EUROC.value[0], ge=0)
    pos_m: float = Field(NoiseProfile.EUROC.value[1], ge=0)
    point_m: float = Field(NoiseProfile.EUROC.value[2], ge=0)
    seed: int = 1

    @field_validator('profile')
    @classmethod
    def checkProfile(cls, value):
        if value is not None:
            NoiseProfile(value)
        return value

    def sigmas(self):
        if self.profile is not None:
            return NoiseProfile(self.profile).value
        return self.rot_deg, self.pos_m, self.point_m


class SolverSection(_Section):
    gamma: float = Field(RunConfig.GAMMA_DEFAULT, gt=0)
    lambda_: float = Field(RunConfig.LAMBDA_DEFAULT, gt=0, alias='lambda')
    max_iters: int = Field(RunConfig.MAX_ITERS_DEFAULT, ge=1)


class LazySection(_Section):
    delta_p: float = LazyConfig.DELTA_P_DEFAULT
    epsilon: Union[float, List[float]] = LazyConfig.EPSILON_DEFAULT
    dbar: int = Field(LazyConfig.DBAR_DEFAULT, ge=1)
    m_scaling: Literal['global_m', 'per_agent_observed'] = \
        MScaling.PER_AGENT_OBSERVED.value
    max_staleness: Optional[int] = Field(LazyConfig.MAX_STALENESS_DEFAULT,
                                         ge=1)

    @field_validator('delta_p', mode='before')
    @classmethod
    def parseDeltaP(cls, value):
        if isinstance(value, str) and value.strip().lower() in {
                'inf', 'infinity'}:
            return math.inf
        return value

    @field_validator('delta_p')
    @classmethod
    def checkDeltaP(cls, value):
        if not value >= 0:
            raise ValueError(f'delta_p must be nonnegative, got {value}')
        return value

    @field_serializer('delta_p')
    def dumpDeltaP(self, value):
        return 'inf' if math.isinf(value) else value

    @model_validator(mode='after')
    def checkEpsilon(self):
        values = (self.epsilon if isinstance(self.epsilon, list)
                  else [self.epsilon])
        if isinstance(self.epsilon, list) and len(values) != self.dbar:
            raise ValueError(f'lazy.epsilon has {len(values)} entries, '
                             f'expected dbar={self.dbar}')
        if any(v < 0 for v in values):
            raise ValueError('lazy.epsilon entries must be nonnegative')
        return self

    def toLazyConfig(self) -> LazyConfig:
        return LazyConfig(deltaP=self.delta_p, epsilon=self.epsilon,
                          dbar=self.dbar, mScaling=MScaling(self.m_scaling),
                          maxStaleness=self.max_staleness)


class CheckSection(_Section):
    """
    `gamma_scale` is the stepsize in units of `1/sigma_p`.  The check runs
    with its own `epsilon` and `delta_p` in place of the `lazy` ones.
    """
    gamma_scale: float = Field(0.5, gt=0)
    iters: int = Field(200, ge=1)
    epsilon: float = Field(0.02, ge=0)
    delta_p: float = Field(0.0, ge=0)

    def toLazyConfig(self, lazy: LazySection) -> LazyConfig:
        return replace(lazy.toLazyConfig(), epsilon=self.epsilon,
                       deltaP=self.delta_p)


class OutputSection(_Section):
    trace_path: Optional[str] = None
    metrics_path: Optional[str] = None
    state_path: Optional[str] = None
    summary_path: Optional[str] = None


class CliConfig(_Section):
    problem: ProblemSection = Field(default_factory=ProblemSection)
    partition: PartitionSection = Field(default_factory=PartitionSection)
    noise: NoiseSection = Field(default_factory=NoiseSection)
    solver: SolverSection = Field(default_factory=SolverSection)
    lazy: LazySection = Field(default_factory=LazySection)
    check: CheckSection = Field(default_factory=CheckSection)
    output: OutputSection = Field(default_factory=OutputSection)

    def toRunConfig(self, **changes) -> RunConfig:
        settings = dict(gamma=self.solver.gamma, lam=self.solver.lambda_,
                        lazy=self.lazy.toLazyConfig(),
                        maxIters=self.solver.max_iters,
                        seed=self.partition.seed)
        settings.update(changes)
        return RunConfig(**settings)

    def loader(self) -> SyntheticProblemLoader | BalProblemLoader:
        if self.problem.source == 'bal':
            return BalProblemLoader(
                path=self.problem.path, numAgents=self.partition.n_agents,
                seed=self.partition.seed, noise=self.noise.sigmas(),
                noiseSeed=self.noise.seed)
        synth = self.problem.synth
        return SyntheticProblemLoader(
            numCameras=synth.n_cameras, numPoints=synth.n_points,
            numAgents=self.partition.n_agents,
            observationDensity=synth.density, noisePx=synth.noise_px,
            seed=synth.seed, point3dFraction=synth.point3d_fraction,
            noise=self.noise.sigmas(), noiseSeed=self.noise.seed,
            partitionSeed=self.partition.seed)

    def loadProblem(self) -> LoadedProblem:
        return self.loader().load()

    def effective(self) -> Dict[str, Any]:
        """The validated config as JSON-ready data, accepted by `loadConfig`."""
        return self.model_dump(mode='json', by_alias=True)


def parseOverride(override: str) -> tuple[List[str], Any]:
    """
    `section.key=value`; the value is read as JSON when possible, else kept
    as a string.
    """
    key, separator, raw = override.partition('=')
    if not separator or not key.strip():
        raise ValueError(f'Override "{override}" is not of the form K=V.')
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split('.'), value


def applyOverride(document: Dict[str, Any], path: Sequence[str], value: Any):
    node = document
    for name in path[:-1]:
        child = node.setdefault(name, {})
        if not isinstance(child, dict):
            raise ValueError(f'Override path "{".".join(path)}" crosses a '
                             f'non-section value.')
        node = child
    node[path[-1]] = value


def loadConfig(path: Optional[str | Path] = None,
               overrides: Sequence[str] = (),
               seed: Optional[int] = None) -> CliConfig:
    """
    Reads a JSON config (or a metrics file echoing one), applies
    `--override` values and the global `--seed`, then validates.

    Raises:
        pydantic.ValidationError: On schema violations or unknown keys.
    """
    document: Dict[str, Any] = {}
    if path:
        with open(path) as stream:
            document = json.load(stream)
        if not isinstance(document, dict):
            raise ValueError(f'Config "{path}" must hold a JSON object.')
        if 'config' in document and 'mean_reproj' in document:
            document = document['config']

    for override in overrides:
        applyOverride(document, *parseOverride(override))
    if seed is not None:
        for seedPath in (('problem', 'synth', 'seed'), ('partition', 'seed'),
                         ('noise', 'seed')):
            applyOverride(document, seedPath, int(seed))

    config = CliConfig.model_validate(document)
    logger.debug(f'Effective config: {config.effective()}')
    return config
