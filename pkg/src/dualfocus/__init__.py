"""Desk-scale cross-modal retrieval with dual attribute prompt learning."""

from .attributes import (
    AttributeAnnotation,
    AttributeTable,
    PromptSet,
    default_attribute_table,
    extract_attributes,
    gamma,
    load_attribute_table,
    render_prompts,
)
from .datagen import (
    DatasetManifest,
    SynthConfig,
    generate_dataset,
    load_manifest,
    make_batches,
    save_manifest,
)
from .encoders import (
    ModelConfig,
    ModelParams,
    TokenEmbeddingSequence,
    cross_encode,
    encode_image,
    encode_text,
    init_params,
)
from .gradcheck import finite_diff_grad
from .losses import (
    Batch,
    GradResult,
    LossToggles,
    LossWeights,
    batch_match_probabilities,
    dapl_loss,
    diac_loss,
    dts_loss,
    id_loss,
    mapm_loss,
    mlm_loss,
    siam_loss,
    tokenwise_max_similarity,
    total_loss,
)
from .metrics import (
    MetricsReport,
    RankingResult,
    evaluate,
    mean_average_precision,
    mean_inp,
    rank_at_k,
    rank_gallery,
)
from .tensor import Tensor, cosine_similarity, softmax
from .trainer import (
    AdamState,
    TrainConfig,
    adam_step,
    lr_at,
    run_ablation,
    run_negative_descriptor_probe,
    train,
)
from .verification import run_gradcheck

__version__ = "0.1.0"
