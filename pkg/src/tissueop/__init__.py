"""tissueop: operator learning for soft-tissue displacement fields.

Learns the map from boundary displacement loading to the full in-plane
displacement field with an implicit Fourier neural operator (two
independent sub-networks for the x/y components, shared iterative
spectral layers, depth continuation), optionally guided by a penalty
that pins the zero-loading fixed point. A Fung-type constitutive
baseline (differential-evolution fit plus a plane-stress membrane FEM)
serves as the reference method. Includes a DIC-style tracked-node
ingestion pipeline, a seeded synthetic-operator dataset generator, and
a CLI for study scenarios.
"""

from .errors import (
    ConfigError,
    DataFormatError,
    EnergyOverflowError,
    MlsSingularityError,
    NewtonDivergenceError,
    NumericalError,
    TrainingDivergedError,
)
from .grid import (
    BoundaryLoading,
    GridField,
    GridSpec,
    Sample,
    boundary_indices,
    build_input_features,
    extract_boundary,
    mean_relative_error,
    node_coordinates,
    relative_l2_error,
    zero_pad_embed,
)
from .ifno import (
    IfnoParams,
    ModelConfig,
    SubNetParams,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    shallow_to_deep,
)
from .spectral import (
    SpectralWeights,
    dft2,
    idft2,
    pad_modes,
    set_fft_workers,
    spectral_conv,
    truncate_modes,
)
from .training import (
    AdamState,
    TrainConfig,
    TrainHistory,
    adam_step,
    data_loss,
    fd_gradient_check,
    grad,
    hybrid_loss,
    physics_loss,
    train,
)
from .fung import (
    DeConfig,
    FungParams,
    StressStretchRecord,
    fem_solve_fung,
    fit_fung_de,
    pk_stress,
    strain_energy,
)
from .pipeline import (
    Dataset,
    MlsConfig,
    PROTOCOLS,
    ProtocolSpec,
    TrackedFrames,
    frames_to_samples,
    generate_synthetic,
    ingest_tracked_csv,
    load_dataset,
    mls_smooth,
    save_dataset,
    spline_resample,
    split_study,
)
from .study import StudyConfig, StudyReport, emit_report, run_study

__version__ = "0.1.0"
