"""Action-conditioned denoising diffusion for 3D skeleton motion, in numpy."""

__version__ = "0.1.0"

from .motion_data import (  # noqa: E402
    DEFAULT_SKELETON,
    ActionLabel,
    LabeledDataset,
    MotionSequence,
    NormStats,
    SkeletonSpec,
    denormalize,
    from_image,
    load_dataset,
    normalize,
    save_dataset,
    synth_dataset,
    synth_generate,
    to_image,
)
from .schedule import NoiseSchedule, build_schedule, cosine_alpha_bar  # noqa: E402
from .diffusion import (  # noqa: E402
    TrainConfig,
    p_sample_step,
    predict_mu,
    q_sample,
    q_step,
    sample,
    sample_images,
    train,
    training_loss,
)
from .denoiser import Denoiser, DenoiserConfig, load_checkpoint, save_checkpoint  # noqa: E402
from .metrics import (  # noqa: E402
    ClassifierExtractor,
    FeatureSet,
    FlattenExtractor,
    GaussianStats,
    diversity,
    fit_gaussian,
    frechet_distance,
    multimodality,
)
