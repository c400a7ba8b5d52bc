"""Temporally-sensitive clip-encoder pretraining sandbox.

CPU-only and numpy-backed: synthetic untrimmed-video corpora, a tiny
autodiff engine and clip encoder, two-head pretraining with a frozen global
video feature, dense feature extraction, temporal-localization metrics, and
feature-similarity analysis.
"""

from .analysis import (AggregateStat, ContrastStats, SimilarityMatrix, aggregate_runs,
                       contrast_stats, cosine_matrix, export_pgm)
from .autodiff import GradCheckResult, ShapeError, Tape, Tensor, gradient_check
from .bench import BenchConfig, run_bench
from .corpus import (AnnotationInstance, Corpus, GenerationError, ManifestError,
                     RegionSegment, SynthConfig, VideoRecord, derive_segments,
                     generate_synthetic, load_manifest, save_manifest)
from .encoder import EncoderConfig, EncoderParams, init_params, param_count
from .evalkit import (DetectionPrediction, GroundTruthInstance, LocalizerParams,
                      ProposalPrediction, TIOU_GRID, ar_at_an, auc_100, average_map,
                      average_precision, baseline_localize, detad_bucket, detad_report,
                      ground_truth_from_corpus, map_at, tiou)
from .extract import FeatureTrack, extract_track, read_track, write_track
from .pretrain import (Checkpoint, GlobalFeatureTable, HeadParams, LossWeights,
                       TrainConfig, clip_loss, load_checkpoint, lr_at,
                       precompute_global_features, save_checkpoint, train, validate)
from .sampler import (ClipLabels, ClipSpec, build_epoch, clip_frame_indices, clip_span,
                      sample_segment_clips, spatial_transform)

__version__ = "0.1.0"
