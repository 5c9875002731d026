"""Dense multi-head audio-visual grounding, trained and scored on synthetic data."""

from . import errors, tensor
from .evaluation import (
    EvalReport,
    act_dis,
    average_precision,
    evaluate,
    iou,
    miou_sweep,
    minmax_scale,
    pred_dis,
    prompted_segmentation_eval,
    retrieval_accuracy,
    retrieval_eval,
)
from .featurizers import (
    ModelConfig,
    ModelParams,
    audio_forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    visual_forward,
)
from .losses import LAMBDAS, info_nce, l_cal, l_dis, l_nonneg, l_splice, l_tv, total_loss
from .similarity import aggregate, batch_score_matrix, pairwise_volumes, prompt_heatmap, similarity_volume
from .synth import Corpus, GeneratorConfig, SamplePair, generate_corpus, pad_or_trim, splice_negative
from .training import TrainConfig, make_batch, train, train_full, train_warmup

__version__ = "0.1.0"
