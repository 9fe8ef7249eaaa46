"""Multi-timescale pyramid flow matching for probabilistic climate-field emulation.

The generative trajectory is split into stages of increasing spatial and
temporal resolution. Training regresses a single conditional velocity field
against coupled noisy endpoints of each stage; inference runs the stages
coarse to fine, with an exact rescale-renoise correction at every jump,
optional funneling into a time window of interest, and direct clean output
at any timescale of the cascade.
"""

from .errors import (
    CascadeflowError,
    ConfigError,
    ContainerError,
    GridError,
    ModelError,
    PathError,
    SamplingError,
    ScheduleError,
    TrainingDiverged,
    TrainingError,
    TransitionError,
)
from .grids import FieldGrid, ResampleFactors, area_weights, downsample, slice_time, upsample
from .metrics import bias, crps, evaluate_ensemble, rmse
from .model import ModelConfig, VelocityModel, load_checkpoint, save_checkpoint
from .oracle import OracleVelocity
from .paths import (
    ConditioningBundle,
    DeltaPath,
    PathSample,
    build_conditioning,
    interpolate,
    make_training_sample,
    sample_delta_path,
    sample_endpoints,
)
from .sampling import LatentCache, SampleRequest, euler_stage, sample, sample_long_sequence
from .schedule import (
    PyramidSchedule,
    StageSpec,
    build_schedule,
    default_schedule,
    gamma_min,
    jump_rollback,
)
from .synth import (
    ScenarioDataset,
    ScenarioSpec,
    climatology_ensemble,
    default_dataset,
    generate,
    read_container,
    read_samples,
    write_container,
    write_samples,
)
from .training import TrainConfig, TrainReport, loss_on_batch, train
from .transitions import JumpPlan, apply_jump, plan_jumps, sample_block_noise

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
