"""Sum-product-transform networks: probabilistic circuits with invertible
transformation nodes, trained by maximum likelihood.

The public surface re-exports the pieces most callers need; the modules
(unitary, affine, circuit, ginfer, train, data, metrics, model_io, cli)
carry the full API.
"""

__version__ = "0.1.0"

from . import affine, circuit, data, ginfer, metrics, model_io, train, unitary
from .affine import Nonlinearity, SvdAffine, identity_layer, random_layer
from .circuit import (
    Circuit,
    CircuitBuilder,
    GaussianComponent,
    LeafNode,
    ProductNode,
    SumNode,
    TransformNode,
    count_induced_trees,
    to_gmm,
)
from .data import Dataset, SplitSpec, Standardization, load_csv, make_flower, save_csv, split
from .errors import (
    CircuitInvalidError,
    CsvFormatError,
    DegenerateReflectionError,
    DimensionMismatchError,
    ExpansionCapError,
    ModelFormatError,
    NonFiniteGradientError,
    NonInvertibleError,
    NotOrthogonalError,
    NotTractableError,
    NullEvidenceError,
    OutsideRangeError,
    SptnError,
    TrainingDivergedError,
)
from .ginfer import EvidenceQuery, Tractability, conditional_logpdf, is_tractable, marginal_logpdf
from .metrics import auc, mean_loglik
from .model_io import ModelBundle, load_model, save_model
from .train import (
    AdamState,
    ArchSpec,
    SearchResult,
    TrainConfig,
    adam_step,
    build_architecture,
    build_gmm,
    build_gsptn,
    build_spn,
    nll_loss,
    random_search,
    sample_architecture,
)
from .unitary import GivensParam, HouseholderParam, givens_decompose

# `sptn.train` stays the module; the training entry point is sptn.train.train.

__all__ = [
    "__version__",
    "affine", "circuit", "data", "ginfer", "metrics",
    "model_io", "train", "unitary",
    "Nonlinearity", "SvdAffine", "identity_layer", "random_layer",
    "Circuit", "CircuitBuilder", "GaussianComponent",
    "LeafNode", "SumNode", "ProductNode", "TransformNode",
    "count_induced_trees", "to_gmm",
    "Dataset", "SplitSpec", "Standardization",
    "load_csv", "save_csv", "split", "make_flower",
    "EvidenceQuery", "Tractability",
    "marginal_logpdf", "conditional_logpdf", "is_tractable",
    "auc", "mean_loglik",
    "ModelBundle", "load_model", "save_model",
    "TrainConfig", "AdamState", "ArchSpec", "SearchResult",
    "adam_step", "nll_loss",
    "sample_architecture", "build_architecture",
    "build_gmm", "build_spn", "build_gsptn", "random_search",
    "GivensParam", "HouseholderParam", "givens_decompose",
    "SptnError", "DimensionMismatchError", "NotOrthogonalError",
    "DegenerateReflectionError", "NonInvertibleError", "OutsideRangeError",
    "CircuitInvalidError", "ExpansionCapError", "NotTractableError",
    "NullEvidenceError", "TrainingDivergedError", "NonFiniteGradientError",
    "CsvFormatError", "ModelFormatError",
]
