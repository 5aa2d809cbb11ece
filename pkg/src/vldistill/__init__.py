"""Visual-linguistic knowledge distillation at desk scale.

A small numpy transformer stack, a synthetic region-token pipeline, the
distillation losses (attention MSE, hidden MSE / contrastive with a sample
queue, soft labels) and the training harness tying them together.
"""

from .autograd import EvaluationError, ShapeError, Tensor, grad_check, no_grad
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    CorruptHeaderError,
    TruncatedPayloadError,
    UnsupportedVersionError,
    load_checkpoint,
    save_checkpoint,
)
from .harness import (
    ALIGNED_TEACHER_VIEW,
    STUDENT_VIEW,
    TEACHER_VIEW,
    DataLeakError,
    MetricsLog,
    TrainConfig,
    TrainingDiverged,
    adapt_teacher,
    attention_distance,
    distill_pretrain,
    evaluate,
    finetune,
    train_teacher,
    train_vlp,
)
from .losses import DistillConfig, IncompatibleError, QueueStateError, SampleQueue
from .rng import Rng
from .tokens import ConfigError, Limits, Record, generate_corpus, read_corpus, write_corpus
from .transformer import CapacityError, Transformer, TransformerConfig

__version__ = "0.1.0"
