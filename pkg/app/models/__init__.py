from .malaria_models import (
    AggregateReport,
    AugmentParams,
    AugmentPolicy,
    BasicMetrics,
    ConfusionMatrix,
    CvPlan,
    EpochRecord,
    ExperimentConfig,
    GradcheckRow,
    LayerSpec,
    MetricsReport,
    PredictionRecord,
    SplitPlan,
    StandardizeStats,
    TrainConfig,
)

__all__ = [
    "AggregateReport",
    "AugmentParams",
    "AugmentPolicy",
    "BasicMetrics",
    "ConfusionMatrix",
    "CvPlan",
    "EpochRecord",
    "ExperimentConfig",
    "GradcheckRow",
    "LayerSpec",
    "MetricsReport",
    "PredictionRecord",
    "SplitPlan",
    "StandardizeStats",
    "TrainConfig",
]
