"""Class-incremental weakly supervised object localization.

A config-driven framework that trains a WSOL network task by task with
distillation losses, herding-based exemplar replay, a cosine-normalized
classifier head, and drift-compensation modules that correct old-class
scores and localization maps at inference time.
"""

from .compensation import (CompensationPair, CompensationTargets,
                           compensation_targets, fuse_outputs, loss_dc,
                           train_compensation)
from .config import Config, load_config, parse_config
from .data import (ArrayDataset, BatchStream, DatasetManifest, EvalBatch,
                   ManifestEntry, eval_batches, load_images, load_manifest,
                   save_manifest)
from .distill_losses import (KdLossWeights, loss_ci_total, loss_kd_cls,
                             loss_kd_feat, loss_kd_loc)
from .engine import (RunState, TaskSchedule, build_schedule,
                     evaluate_checkpoint, run_experiment, run_task)
from .errors import ValidationError
from .evaluation import (IncrementalReport, LocBox, aggregate, eval_task, iou,
                         mask_to_box)
from .exemplars import (ExemplarStore, compute_embeddings, herding_select,
                        rebalance)
from .model import (ImageBatch, ModelConfig, ModelOutputs, WsolNetwork,
                    cosine_class_scores, expand_heads, forward_full, freeze,
                    masked_background_forward)
from .synth import synth_generate
from .wsol_losses import (WsolLossWeights, loss_ac, loss_bas, loss_cls,
                          loss_cls_fg, loss_wsol_total)

__version__ = "0.1.0"
