"""Urban flow generation with knowledge-graph-guided diffusion models."""

from .config import RunConfig
from .data import Dataset, ingest, make_synthetic
from .diffusion import (NoiseSchedule, diffusion_loss, forward_marginal,
                        make_linear_schedule, posterior_mean, predict_x0,
                        sample, true_volume, volume_loss)
from .kge import KGEConfig, KGEmbeddingSet, train_kg_embeddings, tucker_score
from .metrics import EvalReport, evaluate, mmd_per_region, point_metrics
from .trainer import (TrainConfig, TrainedModel, generate_for_regions, train,
                      train_predictive)
from .ukg import UrbanKG, RegionSubgraph, build_urban_kg, extract_region_subgraph

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "Dataset", "ingest", "make_synthetic",
    "NoiseSchedule", "make_linear_schedule", "forward_marginal", "predict_x0",
    "posterior_mean", "sample", "diffusion_loss", "volume_loss", "true_volume",
    "KGEConfig", "KGEmbeddingSet", "train_kg_embeddings", "tucker_score",
    "EvalReport", "evaluate", "point_metrics", "mmd_per_region",
    "TrainConfig", "TrainedModel", "train", "train_predictive",
    "generate_for_regions",
    "UrbanKG", "RegionSubgraph", "build_urban_kg", "extract_region_subgraph",
    "__version__",
]
