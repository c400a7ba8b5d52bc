"""Two-head clip pretraining: global features, loss, schedule, trainer.

Three training modes share one loop:

* ``tsp``        - action head on foreground clips plus a temporal-region head
                   fed the clip feature concatenated with a frozen, precomputed
                   global video feature.
* ``tsp_nogvf``  - same, but the region head sees the clip feature alone.
* ``tac``        - action head only, trained on foreground clips.

The per-clip loss is the weighted sum of the two head cross-entropies for
foreground clips and the region term alone for background clips. Optimization
is SGD with momentum, two learning-rate groups (encoder vs heads), a linear
warmup and stepwise decay, and a grid search over head learning rates with
model selection on mean validation accuracy of the heads.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from types import SimpleNamespace

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from .corpus import Corpus
from .sampler import (ClipLabels, ClipSpec, build_epoch, clip_span, flatten_clip,
                      load_clip, test_clip_set, transformed_shape)
from .seeding import rng_for

CHECKPOINT_SCHEMA_VERSION = 1
MODES = ("tsp", "tsp_nogvf", "tac")


class CheckpointError(ValueError):
    """Checkpoint file is unreadable or structurally inconsistent."""


@dataclass
class HeadParams:
    action_weight: np.ndarray  # (F, C)
    action_bias: np.ndarray  # (C,)
    region_weight: np.ndarray  # (2F, 2) or (F, 2) without the global feature
    region_bias: np.ndarray  # (2,)

    def arrays(self) -> list[np.ndarray]:
        return [self.action_weight, self.action_bias, self.region_weight, self.region_bias]

    def copy(self) -> "HeadParams":
        return HeadParams(*[a.copy() for a in self.arrays()])


@dataclass(frozen=True)
class LossWeights:
    action: float = 1.0
    region: float = 1.0

    def validate(self) -> None:
        if self.action < 0 or self.region < 0 or (self.action == 0 and self.region == 0):
            raise ValueError("loss weights must be nonnegative and not both zero")


@dataclass
class GlobalFeatureTable:
    """Frozen per-video pooled features; never updated by training."""

    features: dict[str, np.ndarray]
    pool: str  # "max" | "avg"
    source: str  # identifier of the encoder initialization that produced it

    def __post_init__(self):
        for arr in self.features.values():
            arr.setflags(write=False)


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "tsp"
    global_pool: str = "max"
    encoder_lr: float = 1e-4
    head_lr_grid: tuple[float, ...] = (0.002, 0.004, 0.006, 0.008, 0.01)
    epochs: int = 8
    warmup_epochs: int = 2
    decay_epochs: tuple[int, ...] = (4, 6)
    decay_gamma: float = 0.01
    batch_size: int = 32
    momentum: float = 0.9
    seed: int = 0
    init: str = "tac"  # "tac": warm-start from a classification-only run; "random"
    clips_per_segment: int = 5
    clip_len: int = 16
    frame_stride: int = 2
    embed_dim: int = 64
    blocks: int = 2
    action_loss_weight: float = 1.0
    region_loss_weight: float = 1.0
    resample_each_epoch: bool = True
    gvf_dense_hop: int | None = None

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.global_pool not in ("max", "avg"):
            raise ValueError(f"unknown pool {self.global_pool!r}")
        if self.init not in ("tac", "random"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.epochs < 0 or self.batch_size < 1 or not self.head_lr_grid:
            raise ValueError("bad optimization config")
        if self.epochs > 0:
            if not 0 <= self.warmup_epochs < self.epochs:
                raise ValueError("warmup_epochs must be < epochs")
            if any(not 0 <= d < self.epochs for d in self.decay_epochs):
                raise ValueError("decay epochs out of range")
        LossWeights(self.action_loss_weight, self.region_loss_weight).validate()

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.action_loss_weight, self.region_loss_weight)


@dataclass
class TrainLogRow:
    epoch: int
    head_lr: float
    mean_train_loss: float
    action_acc: float
    region_acc: float | None
    lr_multiplier: float
    diverged: bool = False


@dataclass
class SelectionRecord:
    head_lr: float
    epoch: int  # -1 means "initialization" (epochs == 0)
    score: float
    rows: list[TrainLogRow] = field(default_factory=list)


@dataclass
class Checkpoint:
    mode: str
    config: TrainConfig
    encoder: enc.EncoderParams
    heads: HeadParams
    init_encoder: enc.EncoderParams
    global_features: GlobalFeatureTable | None
    selection: SelectionRecord
    seed: int
    schema_version: int = CHECKPOINT_SCHEMA_VERSION

    @property
    def checkpoint_id(self) -> str:
        digest = hashlib.sha256()
        digest.update(self.mode.encode())
        digest.update(str(self.seed).encode())
        for arr in self.encoder.arrays() + self.heads.arrays():
            digest.update(arr.tobytes())
        return digest.hexdigest()[:12]


def params_hash(params: enc.EncoderParams) -> str:
    digest = hashlib.sha256()
    for arr in params.arrays():
        digest.update(arr.tobytes())
    return digest.hexdigest()[:12]


def encoder_config_for(corpus: Corpus, cfg: TrainConfig) -> enc.EncoderConfig:
    if corpus.synth is None:
        raise ValueError("training needs a corpus with procedural frames")
    h, w = transformed_shape(corpus.synth.height, corpus.synth.width)
    return enc.EncoderConfig(channels_in=corpus.synth.channels, height=h, width=w,
                             embed_dim=cfg.embed_dim, blocks=cfg.blocks)


def init_heads(feature_dim: int, num_classes: int, mode: str, seed: int) -> HeadParams:
    region_in = feature_dim if mode == "tsp_nogvf" else 2 * feature_dim
    rng = rng_for(seed, "head-init", mode)
    return HeadParams(
        action_weight=rng.standard_normal((feature_dim, num_classes)) / math.sqrt(feature_dim),
        action_bias=np.zeros(num_classes),
        region_weight=rng.standard_normal((region_in, 2)) / math.sqrt(region_in),
        region_bias=np.zeros(2),
    )


# ---------------------------------------------------------------------------
# global video features


def video_clip_specs(corpus: Corpus, video_id: str, *, clips_per_segment: int,
                     clip_len: int, frame_stride: int,
                     dense_hop: int | None = None) -> list[ClipSpec]:
    """Deterministic clip set covering one video (test-mode sampling, or a
    dense regular grid when dense_hop is given)."""
    video = corpus.videos[video_id]
    if dense_hop is not None:
        centers = range(0, video.num_frames, dense_hop)
        return [ClipSpec(video_id, c, clip_len, frame_stride, "background") for c in centers]
    from .sampler import sample_segment_clips

    specs: list[ClipSpec] = []
    for segment in corpus.segments(video_id):
        class_index = (corpus.class_index(segment.class_label)
                       if segment.kind == "foreground" else None)
        specs.extend(sample_segment_clips(
            segment, video, mode="test", n=clips_per_segment, rng=None,
            clip_len=clip_len, frame_stride=frame_stride, class_index=class_index))
    return specs


def pool_features(features: list[np.ndarray], pool: str) -> np.ndarray:
    """Max or mean over feature rows; exactly order-invariant either way."""
    stacked = np.stack(features)
    if pool == "max":
        return stacked.max(axis=0)
    if pool == "avg":
        return np.add.reduce(np.sort(stacked, axis=0), axis=0) / len(features)
    raise ValueError(f"unknown pool {pool!r}")


def precompute_global_features(corpus: Corpus, init_params: enc.EncoderParams,
                               pool: str = "max", *, clips_per_segment: int = 5,
                               clip_len: int = 16, frame_stride: int = 2,
                               dense_hop: int | None = None) -> GlobalFeatureTable:
    """Pool encoder features over each video's deterministic clip set."""
    table: dict[str, np.ndarray] = {}
    for video_id in corpus.videos:
        specs = video_clip_specs(corpus, video_id, clips_per_segment=clips_per_segment,
                                 clip_len=clip_len, frame_stride=frame_stride,
                                 dense_hop=dense_hop)
        if not specs:
            raise ValueError(f"video {video_id!r} has no sampleable clips")
        stacked = np.stack([flatten_clip(load_clip(corpus, s, "test")) for s in specs])
        feats = enc.forward_np_batch(init_params, stacked)
        table[video_id] = pool_features(list(feats), pool)
    return GlobalFeatureTable(table, pool, params_hash(init_params))


# ---------------------------------------------------------------------------
# loss


class HeadLeaves:
    """Head parameters registered on a tape."""

    def __init__(self, tape: ad.Tape, params: HeadParams, requires_grad: bool = True):
        self.action_weight = tape.tensor(params.action_weight, requires_grad)
        self.action_bias = tape.tensor(params.action_bias, requires_grad)
        self.region_weight = tape.tensor(params.region_weight, requires_grad)
        self.region_bias = tape.tensor(params.region_bias, requires_grad)

    def tensors(self) -> list[ad.Tensor]:
        return [self.action_weight, self.action_bias, self.region_weight, self.region_bias]


def clip_loss(feat: ad.Tensor, global_feat: ad.Tensor | None, labels: ClipLabels,
              heads: HeadLeaves, weights: LossWeights, mode: str) -> ad.Tensor:
    """Two-branch per-clip loss.

    Foreground: region term (label 1) plus action term; background: region
    term alone (label 0). In tac mode only the action term exists and the
    caller must supply foreground clips.
    """
    if mode == "tac":
        if labels.action is None:
            raise ValueError("tac mode trains on foreground clips only")
        logits = ad.add(ad.vecmat(feat, heads.action_weight), heads.action_bias)
        return ad.scale(ad.softmax_cross_entropy(logits, labels.action), weights.action)

    if mode == "tsp":
        if global_feat is None:
            raise ValueError("tsp mode needs a global feature for the region head")
        region_in = ad.concat(feat, global_feat)
    elif mode == "tsp_nogvf":
        region_in = feat
    else:
        raise ValueError(f"unknown mode {mode!r}")

    region_logits = ad.add(ad.vecmat(region_in, heads.region_weight), heads.region_bias)
    loss = ad.scale(ad.softmax_cross_entropy(region_logits, labels.region), weights.region)
    if labels.region == 1:
        action_logits = ad.add(ad.vecmat(feat, heads.action_weight), heads.action_bias)
        action_term = ad.scale(ad.softmax_cross_entropy(action_logits, labels.action),
                               weights.action)
        loss = ad.add(loss, action_term)
    return loss


def logits_np(feat: np.ndarray, global_feat: np.ndarray | None, head_params: HeadParams,
              mode: str) -> tuple[np.ndarray, np.ndarray | None]:
    """(action_logits, region_logits) without a tape; region is None for tac."""
    action = feat @ head_params.action_weight + head_params.action_bias
    if mode == "tac":
        return action, None
    region_in = feat if mode == "tsp_nogvf" else np.concatenate([feat, global_feat])
    region = region_in @ head_params.region_weight + head_params.region_bias
    return action, region


def batch_loss_tensor(tape: ad.Tape, enc_leaves: enc.EncoderLeaves,
                      head_leaves: "HeadLeaves", frames: np.ndarray,
                      region_labels: np.ndarray, action_labels: np.ndarray,
                      global_feats: np.ndarray | None, weights: LossWeights,
                      mode: str) -> ad.Tensor:
    """Mean of the per-clip two-branch losses over one batch, on the tape.

    frames is (B, frame_dim, L); action_labels holds the class index for
    foreground rows (ignored elsewhere); global_feats is (B, F) rows aligned
    with the batch (tsp mode only).
    """
    batch = frames.shape[0]
    feats = enc.forward_batch(tape, enc_leaves, frames)
    terms: list[ad.Tensor] = []
    if mode == "tac":
        logits = ad.linear_rows(feats, head_leaves.action_weight, head_leaves.action_bias)
        terms.append(ad.scale(ad.cross_entropy_sum(logits, action_labels), weights.action))
    else:
        if mode == "tsp":
            region_in = ad.hstack_rows(feats, tape.tensor(global_feats))
        else:
            region_in = feats
        region_logits = ad.linear_rows(region_in, head_leaves.region_weight,
                                       head_leaves.region_bias)
        terms.append(ad.scale(ad.cross_entropy_sum(region_logits, region_labels),
                              weights.region))
        fg_rows = np.flatnonzero(region_labels == 1)
        if len(fg_rows):
            fg_feats = ad.take_rows(feats, fg_rows)
            fg_logits = ad.linear_rows(fg_feats, head_leaves.action_weight,
                                       head_leaves.action_bias)
            terms.append(ad.scale(ad.cross_entropy_sum(fg_logits, action_labels[fg_rows]),
                                  weights.action))
    total = terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])
    return ad.scale(total, 1.0 / batch)


# ---------------------------------------------------------------------------
# schedule


def lr_at(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Learning-rate multiplier: linear ramp over the warmup steps, then a
    cumulative gamma factor from the start of each decay epoch."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    warm = cfg.warmup_epochs * steps_per_epoch
    mult = min(1.0, (step + 1) / warm) if warm > 0 else 1.0
    epoch = step // steps_per_epoch
    for d in cfg.decay_epochs:
        if epoch >= d:
            mult *= cfg.decay_gamma
    return mult


# ---------------------------------------------------------------------------
# validation


@dataclass
class _EvalSet:
    frames: np.ndarray  # (B, frame_dim, L)
    region_labels: np.ndarray  # (B,)
    action_labels: np.ndarray  # (B,), -1 on background rows
    video_ids: list[str]


def _eval_clips(corpus: Corpus, split: str, cfg: TrainConfig) -> _EvalSet:
    items = test_clip_set(corpus, split, clips_per_segment=cfg.clips_per_segment,
                          clip_len=cfg.clip_len, frame_stride=cfg.frame_stride)
    if not items:
        raise ValueError(f"split {split!r} has no clips")
    frames = np.stack([flatten_clip(load_clip(corpus, spec, "test")) for spec, _ in items])
    region = np.array([labels.region for _, labels in items])
    action = np.array([labels.action if labels.action is not None else -1
                       for _, labels in items])
    return _EvalSet(frames, region, action, [spec.video_id for spec, _ in items])


def _accuracy(enc_params: enc.EncoderParams, head_params: HeadParams, mode: str,
              table: GlobalFeatureTable | None,
              clips: _EvalSet) -> tuple[float, float | None]:
    feats = enc.forward_np_batch(enc_params, clips.frames)
    action_logits = feats @ head_params.action_weight + head_params.action_bias
    fg = clips.region_labels == 1
    if fg.any():
        action_acc = float(np.mean(np.argmax(action_logits[fg], axis=1)
                                   == clips.action_labels[fg]))
    else:
        action_acc = 0.0
    if mode == "tac":
        return action_acc, None
    if mode == "tsp":
        gfeats = np.stack([table.features[vid] for vid in clips.video_ids])
        region_in = np.concatenate([feats, gfeats], axis=1)
    else:
        region_in = feats
    region_logits = region_in @ head_params.region_weight + head_params.region_bias
    region_acc = float(np.mean(np.argmax(region_logits, axis=1) == clips.region_labels))
    return action_acc, region_acc


def validate(checkpoint: "Checkpoint", corpus: Corpus, split: str) -> dict:
    """Clip accuracies of a checkpoint on a split; region_acc is None for tac."""
    clips = _eval_clips(corpus, split, checkpoint.config)
    action_acc, region_acc = _accuracy(checkpoint.encoder, checkpoint.heads,
                                       checkpoint.mode, checkpoint.global_features, clips)
    if checkpoint.mode == "tac":
        region_acc = None
    return {"action_acc": action_acc, "region_acc": region_acc}


# ---------------------------------------------------------------------------
# training


def _selection_score(action_acc: float, region_acc: float | None, mode: str) -> float:
    if mode == "tac" or region_acc is None:
        return action_acc
    return 0.5 * (action_acc + region_acc)


def train(corpus: Corpus, cfg: TrainConfig,
          init_encoder: enc.EncoderParams | None = None
          ) -> tuple[Checkpoint, list[TrainLogRow]]:
    """Full grid-searched training run; deterministic given (corpus, cfg).

    ``init_encoder`` short-circuits the warm-start stage so several runs can
    share one base encoder (the classification-only pretraining that stands in
    for a large-scale pretrained initialization).
    """
    cfg.validate()
    enc_cfg = encoder_config_for(corpus, cfg)

    if init_encoder is not None:
        init_enc = init_encoder.copy()
    elif cfg.init == "random":
        init_enc = enc.init_params(enc_cfg, cfg.seed)
    else:  # "tac": classification-only warm start trained from random init
        base_cfg = replace(cfg, mode="tac", init="random")
        base_ckpt, _ = train(corpus, base_cfg)
        init_enc = base_ckpt.encoder.copy()

    table = None
    if cfg.mode == "tsp":
        table = precompute_global_features(
            corpus, init_enc, cfg.global_pool, clips_per_segment=cfg.clips_per_segment,
            clip_len=cfg.clip_len, frame_stride=cfg.frame_stride,
            dense_hop=cfg.gvf_dense_hop)

    num_classes = len(corpus.classes)
    weights = cfg.loss_weights
    valid_clips = _eval_clips(corpus, "valid", cfg)

    def build_batches(epoch: int):
        items = build_epoch(
            corpus, "train", epoch, cfg.seed,
            clips_per_segment=cfg.clips_per_segment, clip_len=cfg.clip_len,
            frame_stride=cfg.frame_stride, fg_only=(cfg.mode == "tac"),
            resample_each_epoch=cfg.resample_each_epoch)
        aug_rng = rng_for(cfg.seed, "augment", epoch)
        batches = []
        for start in range(0, len(items), cfg.batch_size):
            chunk = items[start:start + cfg.batch_size]
            frames = np.stack([flatten_clip(load_clip(corpus, spec, "train", aug_rng))
                               for spec, _ in chunk])
            region_labels = np.array([labels.region for _, labels in chunk])
            action_labels = np.array([labels.action if labels.action is not None else -1
                                      for _, labels in chunk])
            gfeats = None
            if cfg.mode == "tsp":
                gfeats = np.stack([table.features[spec.video_id] for spec, _ in chunk])
            batches.append((frames, region_labels, action_labels, gfeats))
        return batches

    # epochs are identical across grid cells (same seed), so cache the
    # assembled batches up to a memory budget
    batch_cache: dict[int, list] = {}
    cache_bytes = 0

    def epoch_batches(epoch: int):
        nonlocal cache_bytes
        if epoch in batch_cache:
            return batch_cache[epoch]
        batches = build_batches(epoch)
        if cache_bytes < 200 * 1024 * 1024:
            batch_cache[epoch] = batches
            cache_bytes += sum(b[0].nbytes for b in batches)
        return batches

    rows: list[TrainLogRow] = []
    candidates = []  # (score, head_lr, epoch, encoder snapshot, heads snapshot)

    for head_lr in cfg.head_lr_grid:
        enc_params = init_enc.copy()
        head_params = init_heads(enc_cfg.feature_dim, num_classes, cfg.mode, cfg.seed)
        group_arrays = (enc_params.arrays(), head_params.arrays())
        velocity = tuple([np.zeros_like(a) for a in group] for group in group_arrays)
        group_lrs = (cfg.encoder_lr, head_lr)

        if cfg.epochs == 0:
            action_acc, region_acc = _accuracy(enc_params, head_params, cfg.mode,
                                               table, valid_clips)
            score = _selection_score(action_acc, region_acc, cfg.mode)
            candidates.append((score, head_lr, -1, enc_params.copy(), head_params.copy()))
            continue

        step = 0
        steps_per_epoch = None
        diverged = False
        for epoch in range(cfg.epochs):
            batches = epoch_batches(epoch)
            if steps_per_epoch is None:
                steps_per_epoch = len(batches)
            epoch_losses = []
            mult = 1.0
            for frames, region_labels, action_labels, gfeats in batches:
                mult = lr_at(step, steps_per_epoch, cfg)

                tape = ad.Tape()
                enc_leaves = enc.EncoderLeaves(tape, enc_params)
                head_leaves = HeadLeaves(tape, head_params)
                batch_loss = batch_loss_tensor(tape, enc_leaves, head_leaves, frames,
                                               region_labels, action_labels, gfeats,
                                               weights, cfg.mode)
                loss_value = batch_loss.item()
                if not math.isfinite(loss_value):
                    diverged = True
                    break
                epoch_losses.append(loss_value)
                grads = tape.backward(batch_loss)

                leaf_groups = (enc_leaves.tensors(), head_leaves.tensors())
                for arrays, leaves, vels, lr in zip(group_arrays, leaf_groups,
                                                    velocity, group_lrs):
                    eff = lr * mult
                    for arr, leaf, vel in zip(arrays, leaves, vels):
                        vel *= cfg.momentum
                        vel += grads[leaf.node_id]
                        arr -= eff * vel
                step += 1

            if diverged:
                rows.append(TrainLogRow(epoch, head_lr, float("nan"), float("nan"),
                                        None, mult, diverged=True))
                break

            action_acc, region_acc = _accuracy(enc_params, head_params, cfg.mode,
                                               table, valid_clips)
            rows.append(TrainLogRow(epoch, head_lr, float(np.mean(epoch_losses)),
                                    action_acc, region_acc, mult))
            score = _selection_score(action_acc, region_acc, cfg.mode)
            candidates.append((score, head_lr, epoch, enc_params.copy(),
                               head_params.copy()))

    if not candidates:
        raise RuntimeError("every grid cell diverged; nothing to select")

    # ties resolve to the smaller head lr, then the earlier epoch
    candidates.sort(key=lambda c: (c[1], c[2]))
    best = None
    for cand in candidates:
        if best is None or cand[0] > best[0]:
            best = cand
    score, head_lr, epoch, enc_snap, head_snap = best

    selection = SelectionRecord(head_lr=head_lr, epoch=epoch, score=score, rows=rows)
    ckpt = Checkpoint(mode=cfg.mode, config=cfg, encoder=enc_snap, heads=head_snap,
                      init_encoder=init_enc, global_features=table, selection=selection,
                      seed=cfg.seed)
    return ckpt, rows


# ---------------------------------------------------------------------------
# parameter vector packing (used by gradient checks)


def flatten_params(enc_params: enc.EncoderParams, head_params: HeadParams) -> np.ndarray:
    return np.concatenate([a.ravel() for a in enc_params.arrays() + head_params.arrays()])


def two_head_loss_builder(enc_cfg: enc.EncoderConfig, num_classes: int, mode: str,
                          clips: list[tuple[np.ndarray, ClipLabels]],
                          global_feat: np.ndarray | None,
                          weights: LossWeights = LossWeights()):
    """A ``build(vec) -> (loss, leaf)`` closure over flattened parameters.

    ``clips`` holds (frame_dim, L) arrays with their labels; the loss is the
    mean of their per-clip losses, matching one training batch.
    """
    d = enc_cfg.embed_dim
    region_in = d if mode == "tsp_nogvf" else 2 * d
    shapes = [(d, enc_cfg.frame_dim), (d,)]
    for _ in range(enc_cfg.blocks):
        shapes += [(d, d, 3), (d,), (d, d, 3), (d,)]
    shapes += [(d, num_classes), (num_classes,), (region_in, 2), (2,)]

    def build(vec: np.ndarray):
        tape = ad.Tape()
        leaf = tape.tensor(vec, requires_grad=True)
        parts = []
        offset = 0
        for shape in shapes:
            size = int(np.prod(shape))
            parts.append(ad.reshape_slice(leaf, offset, shape))
            offset += size
        if offset != vec.size:
            raise ValueError(f"parameter vector has {vec.size} entries, expected {offset}")

        enc_view = SimpleNamespace(
            config=enc_cfg, stem_weight=parts[0], stem_bias=parts[1],
            blocks=[tuple(parts[2 + 4 * i: 6 + 4 * i]) for i in range(enc_cfg.blocks)])
        head_view = SimpleNamespace(
            action_weight=parts[-4], action_bias=parts[-3],
            region_weight=parts[-2], region_bias=parts[-1])

        gfeat = tape.tensor(global_feat) if (mode == "tsp" and global_feat is not None) else None
        terms = []
        for frames, labels in clips:
            feat = enc.forward(tape, enc_view, frames)
            terms.append(clip_loss(feat, gfeat, labels, head_view, weights, mode))
        loss = ad.scale(ad.add_n(terms), 1.0 / len(terms))
        return loss, leaf

    return build


# ---------------------------------------------------------------------------
# checkpoint IO


def _array_to_json(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "data": arr.ravel().tolist()}


def _array_from_json(doc: dict) -> np.ndarray:
    arr = np.asarray(doc["data"], dtype=np.float64).reshape(doc["shape"])
    return arr


def _encoder_to_json(params: enc.EncoderParams) -> dict:
    cfg = params.config
    return {
        "config": {"channels_in": cfg.channels_in, "height": cfg.height, "width": cfg.width,
                   "embed_dim": cfg.embed_dim, "blocks": cfg.blocks},
        "stem_weight": _array_to_json(params.stem_weight),
        "stem_bias": _array_to_json(params.stem_bias),
        "blocks": [
            {"conv1_kernel": _array_to_json(b.conv1_kernel),
             "conv1_bias": _array_to_json(b.conv1_bias),
             "conv2_kernel": _array_to_json(b.conv2_kernel),
             "conv2_bias": _array_to_json(b.conv2_bias)}
            for b in params.blocks
        ],
    }


def _encoder_from_json(doc: dict) -> enc.EncoderParams:
    cfg = enc.EncoderConfig(**doc["config"])
    return enc.EncoderParams(
        cfg,
        _array_from_json(doc["stem_weight"]),
        _array_from_json(doc["stem_bias"]),
        [enc.BlockParams(_array_from_json(b["conv1_kernel"]), _array_from_json(b["conv1_bias"]),
                         _array_from_json(b["conv2_kernel"]), _array_from_json(b["conv2_bias"]))
         for b in doc["blocks"]],
    )


def config_to_dict(cfg: TrainConfig) -> dict:
    return {
        "mode": cfg.mode, "global_pool": cfg.global_pool, "encoder_lr": cfg.encoder_lr,
        "head_lr_grid": list(cfg.head_lr_grid), "epochs": cfg.epochs,
        "warmup_epochs": cfg.warmup_epochs, "decay_epochs": list(cfg.decay_epochs),
        "decay_gamma": cfg.decay_gamma, "batch_size": cfg.batch_size,
        "momentum": cfg.momentum, "seed": cfg.seed, "init": cfg.init,
        "clips_per_segment": cfg.clips_per_segment, "clip_len": cfg.clip_len,
        "frame_stride": cfg.frame_stride, "embed_dim": cfg.embed_dim,
        "blocks": cfg.blocks, "action_loss_weight": cfg.action_loss_weight,
        "region_loss_weight": cfg.region_loss_weight,
        "resample_each_epoch": cfg.resample_each_epoch,
        "gvf_dense_hop": cfg.gvf_dense_hop,
    }


def config_from_dict(doc: dict) -> TrainConfig:
    doc = dict(doc)
    doc["head_lr_grid"] = tuple(doc["head_lr_grid"])
    doc["decay_epochs"] = tuple(doc["decay_epochs"])
    return TrainConfig(**doc)


def checkpoint_to_dict(ckpt: Checkpoint) -> dict:
    return {
        "schema_version": ckpt.schema_version,
        "mode": ckpt.mode,
        "seed": ckpt.seed,
        "config": config_to_dict(ckpt.config),
        "encoder": _encoder_to_json(ckpt.encoder),
        "heads": {name: _array_to_json(arr) for name, arr in
                  zip(("action_weight", "action_bias", "region_weight", "region_bias"),
                      ckpt.heads.arrays())},
        "init_encoder": _encoder_to_json(ckpt.init_encoder),
        "global_features": None if ckpt.global_features is None else {
            "pool": ckpt.global_features.pool,
            "source": ckpt.global_features.source,
            "features": {vid: arr.tolist() for vid, arr in
                         sorted(ckpt.global_features.features.items())},
        },
        "selection": {
            "head_lr": ckpt.selection.head_lr,
            "epoch": ckpt.selection.epoch,
            "score": ckpt.selection.score,
            "rows": [
                {"epoch": r.epoch, "head_lr": r.head_lr,
                 "mean_train_loss": r.mean_train_loss, "action_acc": r.action_acc,
                 "region_acc": r.region_acc, "lr_multiplier": r.lr_multiplier,
                 "diverged": r.diverged}
                for r in ckpt.selection.rows
            ],
        },
        "checkpoint_id": ckpt.checkpoint_id,
    }


def checkpoint_from_dict(doc: dict) -> Checkpoint:
    if not isinstance(doc, dict) or doc.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint schema_version {doc.get('schema_version')!r}")
    try:
        heads = HeadParams(*[_array_from_json(doc["heads"][k]) for k in
                             ("action_weight", "action_bias", "region_weight", "region_bias")])
        gf = doc["global_features"]
        table = None
        if gf is not None:
            table = GlobalFeatureTable(
                {vid: np.asarray(v, dtype=np.float64) for vid, v in gf["features"].items()},
                gf["pool"], gf["source"])
        sel = doc["selection"]
        selection = SelectionRecord(
            head_lr=sel["head_lr"], epoch=sel["epoch"], score=sel["score"],
            rows=[TrainLogRow(**r) for r in sel["rows"]])
        ckpt = Checkpoint(
            mode=doc["mode"],
            config=config_from_dict(doc["config"]),
            encoder=_encoder_from_json(doc["encoder"]),
            heads=heads,
            init_encoder=_encoder_from_json(doc["init_encoder"]),
            global_features=table,
            selection=selection,
            seed=doc["seed"],
            schema_version=doc["schema_version"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if doc.get("checkpoint_id") != ckpt.checkpoint_id:
        raise CheckpointError("checkpoint_id mismatch (file corrupt or edited)")
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_to_dict(ckpt), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from exc
    return checkpoint_from_dict(doc)


def write_train_log(rows: list[TrainLogRow], path, header_comment: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        fh.write("epoch\thead_lr\tmean_train_loss\taction_acc\tregion_acc\tlr_multiplier\n")
        for r in rows:
            region = "n/a" if r.region_acc is None else repr(r.region_acc)
            fh.write(f"{r.epoch}\t{r.head_lr!r}\t{r.mean_train_loss!r}\t{r.action_acc!r}\t"
                     f"{region}\t{r.lr_multiplier!r}\n")
