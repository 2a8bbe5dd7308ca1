"""voxelfm: intra-sample contrastive pre-training and embedding analytics
for volumetric CT-like data."""

from .augment import TransformPipeline, TransformSpec, default_pipeline
from .embeddings import (EmbeddingRecord, EmbeddingStore, RetrievalScores,
                         aggregate, load_store, retrieval_metrics, save_store,
                         sliding_window_embed, topk_search)
from .encoder import EncoderConfig, EncoderState, embed, forward_features, init
from .estimator import ContrastiveVolumeEmbedder, check_volume
from .evalmetrics import asd, auc_roc, dice, dice_aggregate, f1_binary
from .objectives import (LossReport, ObjectiveConfig, batch_loss, cosine_sim,
                         loss_gradients, ntxent_intra, simsiam_intra,
                         vicreg_intra)
from .sampler import (BatchComposition, Patch, PatchSet, PatchSize,
                      compose_batch, redundancy_ratio, sample_patches,
                      valid_positions)
from .semantics import (HeatmapResult, SaliencyMap, StabilityReport, ocd,
                        ofd_saliency, pca3, pca_cielab_map, semantic_search,
                        test_retest)
from .trainer import (ProbeReport, TrainConfig, ablate, lr_schedule,
                      optimizer_step, pretrain, probe_evaluate,
                      select_checkpoint)
from .volume import (PhantomSpec, SegmentationMask, Volume, WindowSpec,
                     generate_phantom, load_volume, normalize_hu, resample,
                     save_volume, window, window_concat)

__version__ = "0.1.0"
