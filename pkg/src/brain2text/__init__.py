"""Brain-to-text decoding: neural signal in, sentence out.

The stack is a frame-stacked, session-adapted GRU feature extractor
(CTC-pretrained), a linear bridge into a causal transformer's embedding
space, and the transformer itself decoding token-by-token. Training runs in
three stages with bitwise freeze contracts, every random draw is derived from
named seed streams, and checkpoints restore exactly.
"""

from .bridge import Bridge, BridgeError
from .checkpoint import (
    CheckpointError,
    group_hashes,
    load_arrays,
    read_extra,
    read_manifest,
    save_arrays,
)
from .config import ConfigError, DecoderDims, RunConfig, load_config, parse_config
from .dataset import (
    DatasetError,
    DatasetManifest,
    Trial,
    ValidationReport,
    load_manifest,
    load_trial_signal,
    subset,
    validate_dataset,
    write_dataset,
)
from .decoder_lm import (
    DecoderConfig,
    DecoderError,
    DecoderLM,
    GenerationConfig,
    GenerationResult,
)
from .evaluation import (
    ErrorCounts,
    EvalReport,
    EvaluationError,
    TrialResult,
    corpus_wer,
    edit_distance,
    evaluate,
    phoneme_error_rate,
    sentence_counts,
)
from .feature_extractor import (
    CtcError,
    FeatureExtractor,
    FeatureExtractorConfig,
    FeatureExtractorError,
    ctc_greedy_decode,
    ctc_loss,
    ctc_loss_batch,
    ctc_loss_grad,
    stack_frames,
    stacked_length,
)
from .preprocessing import (
    AugmentationConfig,
    BlockStats,
    PreprocessingError,
    compute_block_stats,
    eval_view,
    gaussian_smooth,
    normalize,
    training_view,
)
from .seeding import AUG, INIT, SHUFFLE, SYNTH, rng_for
from .synthgen import SynthConfig, SynthError, generate_dataset
from .system import (
    AssemblyError,
    Pipeline,
    SystemSpec,
    build_models,
    load_system,
    make_ctc_target_fn,
    make_decoder_target_fn,
    system_extras,
    train_ctc_bpe,
    train_decoder_bpe,
)
from .textproc import (
    BpeModel,
    Lexicon,
    PhonemeInventory,
    TextProcError,
    build_ctc_target,
    default_inventory,
    grapheme_to_phoneme,
    normalize_for_eval,
    train_bpe,
)
from .training import (
    AdamW,
    Schedule,
    StageConfig,
    TrainingError,
    grad_check,
    load_training_checkpoint,
    run_alignment_stage,
    run_finetune_stage,
    run_pretrain_fe,
    save_training_checkpoint,
)
from .verification import run_all as verify_gradients

__version__ = "0.1.0"
