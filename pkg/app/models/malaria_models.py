"""
Pydantic models for the records exchanged between pipeline stages:
layer specs, training logs, augmentation policies, metrics and plans.
"""
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

LayerKind = Literal["conv2d", "maxpool2d", "relu", "dense", "dropout", "flatten", "softmax"]
Range = Tuple[float, float]


class LayerSpec(BaseModel):
    """One layer of a ModelGraph as stored in checkpoint topologies."""
    kind: LayerKind = Field(..., description="Layer type")
    name: str = Field(..., description="Unique layer name inside the graph")
    hyperparams: Dict[str, object] = Field(default_factory=dict, description="Kernel, widths, rate, activation")


class TrainConfig(BaseModel):
    """Optimisation regime for one training run."""
    epochs: int = Field(30, ge=1, description="Number of passes over the training data")
    batch_size: int = Field(64, ge=1, description="Samples per update")
    lr: float = Field(1.0, gt=0, description="Global Adadelta multiplier")
    rho: float = Field(0.95, gt=0, lt=1, description="Adadelta decay")
    eps: float = Field(1e-6, gt=0, description="Adadelta stabilizer")
    shuffle_seed: int = Field(0, ge=0, description="Seed for shuffles and dropout masks")
    loss: Literal["binary_crossentropy"] = Field("binary_crossentropy", description="Training loss")
    checkpoint_policy: Literal["best_val_accuracy"] = Field(
        "best_val_accuracy", description="Which epoch's weights fit() returns"
    )

    @classmethod
    def custom_preset(cls, **overrides) -> "TrainConfig":
        """Custom network regime: 30 epochs, batch 64."""
        return cls(**{"epochs": 30, "batch_size": 64, "lr": 1.0, **overrides})

    @classmethod
    def baseline_preset(cls, **overrides) -> "TrainConfig":
        """VGG baseline regime: 50 epochs, batch 64, learning rate 0.01."""
        return cls(**{"epochs": 50, "batch_size": 64, "lr": 0.01, **overrides})


class EpochRecord(BaseModel):
    """One row of the training log."""
    epoch: int = Field(..., ge=1)
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


class StandardizeStats(BaseModel):
    """Per-channel statistics computed over the training split."""
    mu: List[float] = Field(..., description="Per-channel mean (R, G, B)")
    sigma: List[float] = Field(..., description="Per-channel standard deviation (R, G, B)")


class AugmentPolicy(BaseModel):
    """Parameter ranges for training-time and test-time augmentation."""
    contrast: Range = Field((0.5, 1.5), description="Contrast factor around mid-grey")
    crop: Range = Field((0.0, 0.2), description="Fraction cropped from each side")
    rotate: Range = Field((-25.0, 25.0), description="Rotation in degrees")
    translate: Range = Field((-0.2, 0.2), description="Shift as a fraction of extent, per axis")
    shear: Range = Field((-25.0, 25.0), description="Shear angle in degrees")
    hue_shift: Range = Field((-0.05, 0.05), description="Hue offset on the unit hue circle")
    saturation: Range = Field((0.8, 1.2), description="Saturation factor in HSV")
    noise_sigma: Range = Field((0.0, 0.05 * 255), description="Gaussian noise std, once per pixel")
    blur_sigma: Range = Field((0.0, 1.0), description="Gaussian blur sigma in pixels")
    flip_lr_p: float = Field(0.5, ge=0, le=1)
    flip_ud_p: float = Field(0.5, ge=0, le=1)
    blur_p: float = Field(0.5, ge=0, le=1)
    color_p: float = Field(0.5, ge=0, le=1)
    random_order: bool = Field(True, description="Shuffle the order of the ordered transforms")
    featurewise_standardization: bool = Field(False)
    zca_whitening: bool = Field(False)

    @field_validator(
        "contrast", "crop", "rotate", "translate", "shear",
        "hue_shift", "saturation", "noise_sigma", "blur_sigma",
    )
    @classmethod
    def _ordered(cls, value: Range) -> Range:
        lo, hi = value
        if lo > hi:
            raise ValueError(f"range lower bound {lo} exceeds upper bound {hi}")
        return value

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        """Policy whose every transform is a no-op."""
        return cls(
            contrast=(1.0, 1.0), crop=(0.0, 0.0), rotate=(0.0, 0.0), translate=(0.0, 0.0),
            shear=(0.0, 0.0), hue_shift=(0.0, 0.0), saturation=(1.0, 1.0),
            noise_sigma=(0.0, 0.0), blur_sigma=(0.0, 0.0),
            flip_lr_p=0.0, flip_ud_p=0.0, blur_p=0.0, color_p=0.0,
        )

    @classmethod
    def flips_only(cls) -> "AugmentPolicy":
        return cls.identity().model_copy(update={"flip_lr_p": 0.5, "flip_ud_p": 0.5})


class AugmentParams(BaseModel):
    """Concrete transform parameters sampled from an AugmentPolicy."""
    flip_lr: bool = False
    flip_ud: bool = False
    contrast: float = 1.0
    crop: Tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    rotate: float = 0.0
    translate_x: float = 0.0
    translate_y: float = 0.0
    shear: float = 0.0
    noise_sigma: float = 0.0
    blur_sigma: Optional[float] = None
    hue_shift: Optional[float] = None
    saturation: Optional[float] = None
    order: List[str] = Field(default_factory=list, description="Application order of the ordered transforms")


class PredictionRecord(BaseModel):
    """Prediction for one evaluated sample."""
    sample_id: str
    y: int = Field(..., ge=0, le=1, description="True label, parasitized = 1")
    p: float = Field(..., ge=0.0, le=1.0, description="Predicted probability of the positive class")
    predicted: int = Field(0, ge=0, le=1, description="Predicted label, [p >= 0.5]")

    @model_validator(mode="after")
    def _threshold(self) -> "PredictionRecord":
        self.predicted = int(self.p >= 0.5)
        return self


class ConfusionMatrix(BaseModel):
    """Binary confusion counts, positive class = parasitized."""
    tp: int = Field(..., ge=0)
    fp: int = Field(..., ge=0)
    fn: int = Field(..., ge=0)
    tn: int = Field(..., ge=0)

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


class BasicMetrics(BaseModel):
    accuracy: float
    precision: float
    recall: float
    f1: float
    degenerate: List[str] = Field(default_factory=list, description="Metrics whose denominator was zero")


class MetricsReport(BaseModel):
    """Everything reported for one evaluated prediction set."""
    accuracy: float
    precision: float
    recall: float
    f1: float
    mcc: float
    auc: Optional[float] = Field(None, description="None when only one class is present")
    loss: Optional[float] = None
    n: int
    confusion: ConfusionMatrix
    degenerate: List[str] = Field(default_factory=list)


class SplitPlan(BaseModel):
    """Train/validation/test index sets of one seeded split."""
    seed: int
    train: List[int]
    val: List[int]
    test: List[int]

    def sizes(self) -> Tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


class CvPlan(BaseModel):
    """Cross-validation folds over a pool of row indices."""
    seed: int
    k: int
    validation: List[List[int]] = Field(..., description="Held-out indices per fold")
    train: List[List[int]] = Field(..., description="Training indices per fold")
    validation_fraction: Optional[float] = Field(None, description="Set when held-out blocks have a fixed size")


class AggregateReport(BaseModel):
    """Mean and sample standard deviation over repeated runs."""
    metric: str
    values: List[float]
    mean: float
    std: Optional[float] = Field(None, description="Omitted for a single run")


class GradcheckRow(BaseModel):
    kind: str
    instances: int
    worst_rel_error: float
    passed: bool


class ExperimentConfig(BaseModel):
    """Everything one train-and-evaluate run needs, independent of the CLI."""
    model: Literal["custom", "vgg-baseline"] = Field("custom", description="Network preset")
    input_size: int = Field(200, ge=2, description="Square model input side in pixels")
    width_divisor: int = Field(1, ge=1, description="Divide every layer width (desk-scale runs)")
    train: TrainConfig = Field(default_factory=TrainConfig.custom_preset)
    preprocess: Literal["rescale", "standardize", "mean_normalize"] = Field("rescale")
    stain_normalize: bool = Field(False, description="Opponent-space stain normalization before the mode transform")
    augment: Literal["none", "online", "offline"] = Field("none", description="Augmentation mode for the training split")
    augment_copies: int = Field(4, ge=1, description="Augmented variants per training row in offline mode")
    policy: AugmentPolicy = Field(default_factory=AugmentPolicy)
    freeze: Optional[str] = Field(None, description="Frozen stage range: none, all or L<a>-L<b>")
    pretrained: Optional[str] = Field(None, description="Checkpoint whose parameters initialise the model")
    head: Literal["softmax", "svm"] = Field("softmax", description="Classifier on top of the network")
    svm_c: float = Field(1.0, gt=0)
    svm_gamma: float = Field(0.1, gt=0)
    svm_tol: float = Field(1e-3, gt=0)
    dropout: bool = Field(True, description="Train-mode dropout")
    seed: int = Field(0, ge=0, description="Initialisation seed")
