"""Continual video prediction with a mixture world model and predictive replay."""

from .data import (
    Batch,
    DatasetSplit,
    SyntheticTaskConfig,
    VideoSequence,
    collate,
    default_benchmark,
    generate_shapeworld_task,
    load_frame_directory,
    sample_batch,
    save_frame_directory,
    simulate_dynamics,
    validate_benchmark,
)
from .errors import (
    ConfigurationError,
    IngestionError,
    NumericalError,
    ReplayWMError,
    TaskLabelError,
    TrainingDivergedError,
)
from .frame_generator import FrameGenerator, FrameGeneratorConfig
from .metrics import (
    EvalMatrix,
    EvalResult,
    TaskScore,
    derive_seed,
    evaluate_task,
    forgetting_gap,
    psnr,
    ssim,
)
from .replay import (
    ActionBuffer,
    ReplayDataset,
    RunResult,
    TrainSchedule,
    freeze_snapshot,
    mixed_elbo_loss,
    plan_replay_counts,
    run_sequence,
    store_actions,
    synthesize_replay,
    train_first_task,
    train_task,
)
from .task_inference import InferenceReport, adapt, deploy_predict, infer_task
from .world_model import (
    GaussianParams,
    RecurrentState,
    STLSTMCell,
    WorldModel,
    WorldModelConfig,
    gaussian_kl,
    reparam_sample,
)

__version__ = "0.1.0"
