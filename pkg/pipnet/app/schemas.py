from enum import Enum
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# --- Enumerations ---

class HeadKind(str, Enum):
    PIP = "PIP"
    PIP_NRM = "PIP_NRM"
    MAP = "MAP"
    COORD = "COORD"


class TaskId(str, Enum):
    """Curriculum tasks: T1/T2 are score-only on the coarse/middle aux taps, T3 the full loss."""
    T1 = "T1"
    T2 = "T2"
    T3 = "T3"


class NormKind(str, Enum):
    INTER_OCULAR = "INTER_OCULAR"
    IMAGE_SIZE = "IMAGE_SIZE"
    DIAGONAL = "DIAGONAL"


class DomainStyle(str, Enum):
    A = "A"  # clean background, mild pose
    B = "B"  # textured background, strong pose, occluders
    C = "C"  # gradient background, moderate pose; unlabeled pool for GSSL


class Paradigm(str, Enum):
    GSL = "GSL"
    UDA = "UDA"
    GSSL = "GSSL"


class PriorMode(str, Enum):
    BLACK_TRAIN = "BLACK_TRAIN"
    NONFACE_TEST = "NONFACE_TEST"


class SweepKind(str, Enum):
    STRIDE = "stride"
    NEIGHBORS = "neighbors"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


# --- Model / codec configuration ---

class HeadConfig(_Strict):
    """
    Everything the label encoding, losses and decoders need: landmark count N,
    neighbor count C, stride S, input size and the loss coefficients.
    """
    num_landmarks: int = Field(..., ge=1, description="N")
    num_neighbors: int = Field(0, ge=0, description="C; 0 means no neighbor maps")
    stride: int = Field(..., ge=1, description="S, input pixels per grid cell")
    input_height: int = Field(64, ge=1)
    input_width: int = Field(64, ge=1)
    alpha: float = Field(0.1, gt=0)
    beta: float = Field(0.1, gt=0)

    @model_validator(mode="after")
    def _check_geometry(self) -> "HeadConfig":
        if self.input_height % self.stride or self.input_width % self.stride:
            raise ValueError(
                f"input {self.input_height}x{self.input_width} is not divisible by stride {self.stride}"
            )
        if self.num_neighbors >= self.num_landmarks:
            raise ValueError(f"C={self.num_neighbors} must be smaller than N={self.num_landmarks}")
        return self

    @property
    def map_height(self) -> int:
        return self.input_height // self.stride

    @property
    def map_width(self) -> int:
        return self.input_width // self.stride


class BackboneConfig(_Strict):
    """Toy conv backbone: one stride-2 block per stage width, plus optional stride modifiers."""
    input_size: int = Field(64, ge=8)
    in_channels: int = Field(1, ge=1)
    widths: List[int] = Field(default_factory=lambda: [16, 32, 64])
    extend_layers: int = Field(0, ge=0, description="extra stride-2 conv blocks")
    reduce_layers: int = Field(0, ge=0, description="stride-2 deconv blocks")
    modifier_width: int = Field(64, ge=1)
    affine_norm: bool = Field(False, description="per-channel affine after each conv")

    @model_validator(mode="after")
    def _check_stride(self) -> "BackboneConfig":
        if not self.widths:
            raise ValueError("at least one stage width is required")
        if self.reduce_layers > len(self.widths) + self.extend_layers:
            raise ValueError("more reduce-stride layers than stride-2 stages")
        if self.input_size % (2 ** (len(self.widths) + self.extend_layers)):
            raise ValueError(
                f"input size {self.input_size} is not divisible by 2^{len(self.widths) + self.extend_layers}"
            )
        return self

    @property
    def stride(self) -> int:
        return 2 ** (len(self.widths) + self.extend_layers - self.reduce_layers)


class HeadSettings(_Strict):
    kind: HeadKind = HeadKind.PIP_NRM
    num_neighbors: int = Field(10, ge=0)
    map_stride: int = Field(2, ge=1, description="heatmap stride of the MAP head")
    alpha: Optional[float] = Field(None, gt=0, description="None: take from the coefficient table")
    beta: Optional[float] = Field(None, gt=0)
    with_aux: bool = False


# --- Data ---

class AugmentConfig(_Strict):
    """Augmentation magnitudes in crop pixels (64x64 scale) and their probabilities."""
    translate_px: float = Field(8.0, ge=0)
    translate_prob: float = Field(0.5, ge=0, le=1)
    occlusion_max_px: float = Field(25.0, ge=0)
    occlusion_prob: float = Field(0.5, ge=0, le=1)
    flip_prob: float = Field(0.5, ge=0, le=1)
    rotate_deg: float = Field(30.0, ge=0)
    rotate_prob: float = Field(0.5, ge=0, le=1)
    blur_max_radius: float = Field(1.25, ge=0)
    blur_prob: float = Field(0.3, ge=0, le=1)

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(translate_prob=0, occlusion_prob=0, flip_prob=0, rotate_prob=0, blur_prob=0)


class SynthConfig(_Strict):
    num_landmarks: int = Field(16, ge=2)
    style: DomainStyle = DomainStyle.A
    template_file: str = "synth_template.json"
    canvas_size: int = Field(96, ge=16)
    face_size: float = Field(48.0, gt=0, description="template unit square edge in pixels")
    pose_range_deg: Optional[float] = Field(None, ge=0, description="None: style default")
    scale_range: Tuple[float, float] = (0.8, 1.2)
    translate_px: float = Field(6.0, ge=0)
    jitter_sigma: Optional[float] = Field(None, ge=0, description="template units; None: style default")
    bbox_margin_pct: float = Field(10.0, ge=0)

    @field_validator("scale_range")
    @classmethod
    def _ordered(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        if not 0 < v[0] <= v[1]:
            raise ValueError(f"scale_range must satisfy 0 < low <= high, got {v}")
        return v


class DataSettings(_Strict):
    train_manifest: Optional[str] = None
    test_manifest: Optional[str] = None
    unlabeled_manifest: Optional[str] = None
    train_count: int = Field(200, ge=1)
    test_count: int = Field(100, ge=1)
    unlabeled_count: int = Field(200, ge=0)
    train_style: DomainStyle = DomainStyle.A
    test_style: DomainStyle = DomainStyle.A
    crop_size: int = Field(64, ge=8)
    enlarge_pct: float = Field(10.0, ge=0)
    top_reduce_pct: float = Field(0.0, ge=0, lt=100)


# --- Training ---

class TrainSchedule(_Strict):
    epochs: int = Field(30, ge=1)
    lr: float = Field(1e-4, ge=0)
    decay_epochs: List[int] = Field(default_factory=lambda: [15, 25])
    decay_factor: float = Field(10.0, gt=0)
    batch_size: int = Field(16, ge=1)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check_decays(self) -> "TrainSchedule":
        if any(e >= self.epochs for e in self.decay_epochs):
            raise ValueError(f"decay epochs {self.decay_epochs} must be < total epochs {self.epochs}")
        return self

    @classmethod
    def full_length(cls, seed: int = 0) -> "TrainSchedule":
        return cls(epochs=60, decay_epochs=[30, 50], seed=seed)


class CurriculumSchedule(_Strict):
    tasks: List[TaskId] = Field(default_factory=lambda: [TaskId.T1, TaskId.T2, TaskId.T3, TaskId.T3, TaskId.T3])
    epochs_per_round: Optional[int] = Field(None, ge=1, description="None: the supervised schedule's epochs")
    refresh: Literal["every_round"] = "every_round"

    @field_validator("tasks")
    @classmethod
    def _ends_with_t3(cls, v: List[TaskId]) -> List[TaskId]:
        if not v or v[-1] != TaskId.T3:
            raise ValueError("the task list must be non-empty and end with T3")
        return v

    @classmethod
    def self_training(cls, rounds: int = 3) -> "CurriculumSchedule":
        return cls(tasks=[TaskId.T3] * rounds)


class EpochRecord(BaseModel):
    epoch: int
    loss: float
    loss_score: float
    loss_offset: float
    loss_neighbor: float
    val_nme: Optional[float] = None
    seconds: float = 0.0
    round: int = 0
    task: TaskId = TaskId.T3


class TrainReport(BaseModel):
    head_kind: HeadKind
    records: List[EpochRecord] = Field(default_factory=list)

    def losses(self) -> List[float]:
        return [r.loss for r in self.records]


# --- Evaluation ---

class EvalSettings(_Strict):
    norm: NormKind = NormKind.INTER_OCULAR
    left_eye: int = Field(6, ge=0)
    right_eye: int = Field(9, ge=0)
    overlays: int = Field(0, ge=0, description="number of overlay PNGs to write")


class EvalReport(BaseModel):
    """NME in percent; Point-Var absolute, with the x1e-4 display value alongside."""
    nme: float = Field(..., ge=0)
    point_var: float
    point_var_e4: float
    grid_accuracy: Optional[float] = None
    per_landmark: List[float]
    sample_count: int
    norm: NormKind
    subsets: Dict[str, float] = Field(default_factory=dict)


# --- Tooling ---

class BenchSettings(_Strict):
    head_kinds: List[HeadKind] = Field(default_factory=lambda: [HeadKind.PIP, HeadKind.PIP_NRM, HeadKind.MAP, HeadKind.COORD])
    n_warmup: int = Field(3, ge=0)
    n_runs: int = Field(20, ge=1)


class SweepSettings(_Strict):
    kind: SweepKind = SweepKind.STRIDE
    strides: List[int] = Field(default_factory=lambda: [4, 8, 16, 32])
    neighbor_counts: List[int] = Field(default_factory=lambda: [0, 1, 2, 4, 8, 10])


class PriorSettings(_Strict):
    mode: PriorMode = PriorMode.BLACK_TRAIN
    head_kinds: List[HeadKind] = Field(default_factory=lambda: [HeadKind.COORD, HeadKind.MAP, HeadKind.PIP_NRM])
    num_test_images: int = Field(3, ge=1)


class RunConfig(_Strict):
    """One document configuring any CLI command."""
    seed: int = Field(0, ge=0)
    output_dir: Optional[str] = None
    paradigm: Paradigm = Paradigm.UDA
    head: HeadSettings = Field(default_factory=HeadSettings)
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    data: DataSettings = Field(default_factory=DataSettings)
    schedule: TrainSchedule = Field(default_factory=TrainSchedule)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    curriculum: CurriculumSchedule = Field(default_factory=CurriculumSchedule)
    eval: EvalSettings = Field(default_factory=EvalSettings)
    bench: BenchSettings = Field(default_factory=BenchSettings)
    sweep: SweepSettings = Field(default_factory=SweepSettings)
    prior: PriorSettings = Field(default_factory=PriorSettings)
    checkpoint: Optional[str] = Field(None, description="checkpoint prefix for eval")


class LayerFlops(BaseModel):
    name: str
    group: str
    kind: str
    output_shape: List[int]
    macs: int


class FlopReport(BaseModel):
    """Multiply-accumulate counts; FLOPs = 2 x MACs."""
    layers: List[LayerFlops]
    total_macs: int
    group_macs: Dict[str, int]

    @property
    def total_flops(self) -> int:
        return 2 * self.total_macs


class LatencyReport(BaseModel):
    mean_ms: float
    median_ms: float
    p95_ms: float
    fps: float
    n_runs: int
    n_warmup: int
    input_shape: List[int]
    thread_limit: Optional[int] = Field(None, description="threads of the native pools while timing; None when none were found")
    environment: Dict[str, str]


# --- Persistence ---

class TensorEntry(BaseModel):
    name: str
    shape: List[int]
    dtype: Literal["<f4"] = "<f4"
    offset: int
    nbytes: int


class CheckpointManifest(BaseModel):
    format_version: int = 1
    backbone: BackboneConfig
    head_kind: HeadKind
    head: HeadConfig
    map_stride: Optional[int] = None
    with_aux: bool = False
    neighbor_table: Optional[List[List[int]]] = None
    tensors: List[TensorEntry]


class ManifestRecord(BaseModel):
    image: str
    bbox: Tuple[float, float, float, float]
    points: str
    domain_tag: str
    is_labeled: bool = True
    attributes: List[str] = Field(default_factory=list)


class DatasetManifest(BaseModel):
    version: int = 1
    records: List[ManifestRecord]


class RunManifest(BaseModel):
    command: str
    seed: int
    config_hash: str
    version: str
    config: RunConfig


# --- Experiment reports ---

class PriorHeadResult(BaseModel):
    head_kind: HeadKind
    nme_to_mean_shape: float = Field(..., description="image-size NME (%) between the prediction and the training mean shape")
    identical_predictions: bool
    predictions: List[List[Tuple[float, float]]]
    overlays: List[str] = Field(default_factory=list)


class PriorReport(BaseModel):
    mode: PriorMode
    heads: List[PriorHeadResult]


class SweepRow(BaseModel):
    kind: SweepKind
    value: int
    nme: float
    point_var: float
    grid_accuracy: Optional[float] = None


class SweepReport(BaseModel):
    kind: SweepKind
    rows: List[SweepRow]


class StcRoundSummary(BaseModel):
    round: int
    task: TaskId
    pseudo_labels: int
    skipped: int
    final_loss: float


class StcReport(BaseModel):
    paradigm: Paradigm
    rounds: List[StcRoundSummary]
    test: Optional[EvalReport] = None
