"""Reference-value explanations for dense ReLU regression networks."""
from .attribution import (
    AlphaBeta,
    Epsilon,
    Explanation,
    Gamma,
    LrpConfig,
    clip_negative,
    clip_positive,
    gradient_x_input,
    integrated_gradients,
    lrp,
    shapley_exact,
    shapley_sampled,
)
from .datasets import TabularDataset, get_dataset, load_csv, prepare_split
from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    EnumerationLimitError,
    InputShapeError,
    NoSolutionError,
    PreconditionError,
    RefxplainError,
    StructureError,
    UndefinedMetricError,
)
from .evaluation import BenchmarkConfig, BenchmarkReport, normalized_mse, run_benchmark
from .network import (
    DenseLayer,
    DenseNetwork,
    TrainConfig,
    build_max_network,
    init_network,
    load_network,
    save_network,
    train,
)
from .refvalue import (
    RetrainConfig,
    baseline_scale,
    baseline_shift,
    flood_reference,
    restructure,
    retrain,
    shift_output,
    triplicate_relu,
)

__version__ = "0.1.0"

__all__ = [
    "AlphaBeta",
    "BenchmarkConfig",
    "BenchmarkReport",
    "ConfigError",
    "DataError",
    "DenseLayer",
    "DenseNetwork",
    "DivergenceError",
    "EnumerationLimitError",
    "Epsilon",
    "Explanation",
    "Gamma",
    "InputShapeError",
    "LrpConfig",
    "NoSolutionError",
    "PreconditionError",
    "RefxplainError",
    "RetrainConfig",
    "StructureError",
    "TabularDataset",
    "TrainConfig",
    "UndefinedMetricError",
    "baseline_scale",
    "baseline_shift",
    "build_max_network",
    "clip_negative",
    "clip_positive",
    "flood_reference",
    "get_dataset",
    "gradient_x_input",
    "init_network",
    "integrated_gradients",
    "load_csv",
    "load_network",
    "lrp",
    "normalized_mse",
    "prepare_split",
    "restructure",
    "retrain",
    "run_benchmark",
    "save_network",
    "shapley_exact",
    "shapley_sampled",
    "shift_output",
    "train",
    "triplicate_relu",
]
