"""Quality-diversity generative sampling.

Searches a generative model's latent space for solutions that score well on
a quality objective while covering user-defined measure dimensions, then
exports the archive as a balanced synthetic dataset and measures its effect
on downstream classifiers.
"""

from .archive import Archive, ArchiveStats, Elite, MeasureSpec, cell_index, merge
from .emitter import CoeffDistribution, GradientEmitter, branch, truncation_weights
from .errors import ConfigurationError, CovarianceError, EvaluationRejected, QdgsError
from .pipeline import (
    QdgsConfig,
    QdgsResult,
    QdgsSampler,
    RandomSampler,
    assign_identity_labels,
    augment_variants,
    density_map,
    export_dataset,
    kmeans,
    multi_trial,
    run_qdgs,
    run_random,
)
from .scoring import (
    CompositeScorer,
    Evaluation,
    MarginMemory,
    ObjectiveWeights,
    ProbePair,
    RegularizerSpec,
    calibrate_regularizer,
    composite_objective,
    contrastive_score,
    fd_gradient,
    margin,
    normalize_grads,
    reg_penalty,
    update_memory,
)
from .shapes import (
    ShapeParams,
    ShapesGenerator,
    decode,
    label_from_m2,
    probe_quality,
    probe_redness,
    probe_squareness,
    render,
    sample_real,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
