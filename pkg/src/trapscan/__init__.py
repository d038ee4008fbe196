"""Weight-only overfitting diagnostics based on correlation traps in shuffled layer spectra."""

from .ablation import (
    AblationResult,
    Classification,
    ProbeConfig,
    ablate,
    classify_trap,
    jsd_score,
    map_trap_to_layer,
    remove_trap,
)
from .errors import *  # noqa: F401,F403
from .nn import (
    AdamW,
    Dataset,
    MlpModel,
    TrainConfig,
    evaluate,
    forward,
    init_mlp,
    inject_trap,
    load_model,
    make_gaussian_clusters,
    save_model,
    train,
)
from .rmt import Esd, EdgeThreshold, MPFit, covariance_spectrum, fit_mp, mp_cdf, mp_density, mp_edges, tw_delta
from .self_averaging import (
    MeanInstabilityReport,
    constant_overlap,
    exact_sampled_mean_variance,
    sampled_mean_variance,
    theorem2_bound,
)
from .tensor_store import CheckpointManifest, WeightMatrix, load_checkpoint, save_checkpoint
from .traps import (
    LayerTrapReport,
    ShuffleSeed,
    TrapRecord,
    condensation_ratio,
    detect_traps,
    localization_metrics,
    scale_perturbation_check,
    shuffle_entries,
)

__version__ = "0.1.0"
