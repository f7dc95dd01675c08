"""Wideband hybrid-array channel estimation with unfolded sparse Bayesian solvers."""

from .config import (
    SystemConfig,
    default_config,
    desk_config,
    noise_var_from_snr_db,
    spawn_rng,
    subcarrier_freq,
    subcarrier_freqs,
)
from .channel import (
    ChannelRealization,
    Dataset,
    PathSet,
    build_channel,
    channel_matrix_form,
    draw_paths,
    generate_dataset,
    load_dataset,
    save_dataset,
    steering_vector,
)
from .dictionaries import (
    FREQUENCY_DEPENDENT,
    FREQUENCY_INDEPENDENT,
    DictionarySet,
    build_dictionaries,
    reconstruct_channel,
    sparsity_score,
)
from .measurement import (
    MeasurementOperator,
    Observation,
    PilotCombiner,
    assemble_operator,
    draw_combiner,
    load_operator,
    observe_and_transform,
    operator_from_matrix,
    save_operator,
    simulate_observation,
    unitary_transform,
)
from .sbl import (
    DivergenceError,
    EstimatorSpec,
    SblState,
    amp_e_step,
    classic_m_step,
    exact_e_step,
    init_state,
    run_estimator,
)
from .mstep import MStepNet, adam_update, build_features, load_checkpoint, mstep_forward, save_checkpoint
from .training import (
    TrainConfig,
    TrainingDivergence,
    TrainReport,
    generate_splits,
    train_layerwise,
    unroll_forward,
    write_report_csv,
)
from .evaluation import (
    FlopsModel,
    SweepResult,
    average_nmse_db,
    flops_per_iteration,
    nmse,
    reconstruction_flops,
    run_sweep,
    run_tradeoff,
    standard_operator,
)

__version__ = "0.1.0"
