"""Bottleneck adapters, AdapterFusion and two-phase AdvFusion on a small
numpy transformer with its own reverse-mode autodiff."""

from .adapters import (Adapter, AdapterStack, BottleneckAdapter, FusionBlock, LoraDelta, adapter_forward, attach,
                       detach, fusion_forward, lora_forward)
from .analysis import AttentionTrace, ContributionReport, contributions, heatmap_export
from .autodiff import Tensor, backward, finite_diff_check, finite_diff_report, no_grad
from .checkpoint import load_adapter, load_checkpoint, load_into, save_checkpoint
from .corpus import Corpus, Example, gen_synthetic, load_jsonl, mask_method_name, split, subtokenize
from .errors import (AdvFusionError, ConfigError, DataError, DimensionError, IntegrityError, MissingGroupError,
                     NumericError, UsageError, VersionError)
from .metrics import BleuReport, PrfReport, corpus_eval, smoothed_bleu4, token_prf
from .model import ModelConfig, TransformerModel, count_parameters
from .tokenizer import Vocabulary, train_bpe
from .trainer import (OptimizerState, PhaseSchedule, TrainablePartition, TrainConfig, adam_step, finetune, mlm_mask,
                      pretrain_backbone, train_advfusion, train_fusion, train_language_adapter)

__version__ = "0.1.0"
