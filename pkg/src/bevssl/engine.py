"""Teacher-student training: EMA weights, pseudo-map pipeline, temporal
teacher fusion, and the per-step training transaction.

The teacher never touches a tape: its forwards are plain numeric evaluation
and its weights move only through the EMA update.  Every random draw comes
from a stream keyed by (seed, step, role), so disabling one branch cannot
perturb another and fixed seeds give bit-identical trajectories.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .augment import AugmentConfig, strong_augment
from .autograd import ParamSet, Tape, backward, optimizer_step
from .errors import ConfigurationError, ContractError
from .geometry import Pose2, Raster, relative_pose, warp_raster
from .losses import (LossMask, LossWeights, feature_similarity_loss,
                     focal_loss, rampup_weight, total_loss)
from .model import ForwardTrace, ModelConfig, forward, init_params
from .rng import Stream
from .world import Dataset, Sample

_IDENTITY = Pose2(0.0, 0.0, 0.0)


def _trace_view(trace: ForwardTrace, k: int) -> ForwardTrace:
    """Single-frame view into a batched trace (no copies)."""
    from .autograd import Tensor
    pick = lambda t: Tensor(t.values[k:k + 1])
    return ForwardTrace(pick(trace.encoder_feats), pick(trace.bev_feats),
                        pick(trace.decoded_feats), pick(trace.logits),
                        pick(trace.probs))


@dataclass(frozen=True)
class PseudoLabelConfig:
    """Defaults reproduce the final scheme: fusion of probabilities over two
    extra frames within 30 m, soft targets, confidence threshold 0.6."""

    threshold: float | None = 0.6
    temperature: float | None = None
    hard: bool = False
    fusion_mode: str = "probs"      # "none" | "probs" | "feats"
    fusion_extra: int = 2
    fusion_max_range: float = 30.0
    fusion_warp: str = "nearest"
    confidence: str = "two_sided"   # "two_sided" | "positive"

    def __post_init__(self):
        if self.threshold is not None and not 0.5 <= self.threshold < 1.0:
            raise ConfigurationError("threshold must be in [0.5, 1) or None")
        if self.temperature is not None and self.temperature <= 0:
            raise ConfigurationError("temperature must be positive or None")
        if self.fusion_mode not in ("none", "probs", "feats"):
            raise ConfigurationError(f"unknown fusion mode '{self.fusion_mode}'")
        if self.fusion_extra < 0 or self.fusion_max_range <= 0:
            raise ConfigurationError("fusion_extra >= 0 and max_range > 0 required")
        if self.confidence not in ("two_sided", "positive"):
            raise ConfigurationError(f"unknown confidence rule '{self.confidence}'")


@dataclass
class PseudoLabelBundle:
    targets: np.ndarray          # (3, rows, cols), soft in [0,1] or hard {0,1}
    mask: LossMask               # false where invalid or under-confident
    provenance: np.ndarray       # (3, rows, cols) source frame per cell/class


@dataclass
class TeacherState:
    params: ParamSet
    keep_rate: float = 0.99


def ema_update(teacher: TeacherState, student: ParamSet) -> TeacherState:
    """theta_T <- alpha * theta_T + (1 - alpha) * theta_S, elementwise."""
    a = teacher.keep_rate
    t_names, s_names = teacher.params.names(), student.names()
    if t_names != s_names:
        raise ContractError("teacher/student parameter names differ")
    for name in t_names:
        t, s = teacher.params[name], student[name]
        if t.values.shape != s.values.shape:
            raise ContractError(f"shape mismatch for '{name}'")
        t.values[...] = a * t.values + (1.0 - a) * s.values
    return teacher


def sharpen(logits, temperature: float):
    """Rescale logits by 1/T; T < 1 raises certainty, T > 1 lowers it."""
    if temperature <= 0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")
    if isinstance(logits, Raster):
        return Raster(logits.spec, logits.values / temperature,
                      logits.valid.copy())
    return np.asarray(logits) / temperature


def prob_logit(p: np.ndarray) -> np.ndarray:
    pc = np.clip(p, 1e-12, 1.0 - 1e-12)
    return np.log(pc / (1.0 - pc))


def make_pseudo_labels(probs: Raster, cfg: PseudoLabelConfig,
                       validity: np.ndarray | None = None,
                       provenance: np.ndarray | None = None,
                       ) -> PseudoLabelBundle:
    """Threshold on raw fused confidence, then sharpen/binarize targets.

    Confidence is two-sided, max(p, 1-p), unless configured positive-only;
    sharpening happens in logit space and never flips a cell across 0.5.
    """
    p = probs.values
    valid = probs.valid if validity is None else np.asarray(validity, bool)
    include = np.broadcast_to(valid, p.shape)
    if cfg.threshold is not None:
        conf = np.maximum(p, 1.0 - p) if cfg.confidence == "two_sided" else p
        include = include & (conf >= cfg.threshold)

    targets = p
    if cfg.temperature is not None:
        z = sharpen(prob_logit(p), cfg.temperature)
        targets = 1.0 / (1.0 + np.exp(-z))
    if cfg.hard:
        targets = (targets > 0.5).astype(np.float64)
    if provenance is None:
        provenance = np.full(p.shape, -1, dtype=np.int64)
    return PseudoLabelBundle(targets.copy(), LossMask(include.copy()),
                             provenance)


# ------------------------------------------------------------- fusion -----

def trajectory_distances(poses: list[Pose2]) -> np.ndarray:
    """Cumulative along-trajectory arc length per frame."""
    s = np.zeros(len(poses))
    for i in range(1, len(poses)):
        s[i] = s[i - 1] + math.hypot(poses[i].x - poses[i - 1].x,
                                     poses[i].y - poses[i - 1].y)
    return s


def draw_fusion_distance(stream: Stream, max_range: float) -> float:
    """Uniform on (0, max_range]."""
    return max_range * (1.0 - stream.uniform())


def select_fusion_frames(poses: list[Pose2], current_frame: int, n_extra: int,
                         max_range: float, stream: Stream,
                         ) -> list[tuple[int, Pose2]]:
    """Pick frames whose along-trajectory distance best matches draws uniform
    in (0, max_range], past or future.  Stationary spans contribute at most
    one frame; frames repeat only when the sequence is too short."""
    if n_extra <= 0 or len(poses) < 2:
        return []
    s = trajectory_distances(poses)
    reps = [j for j in range(len(poses)) if j == 0 or s[j] > s[j - 1]]
    candidates = [j for j in reps if j != current_frame]
    if not candidates:
        return []

    picks: list[int] = []
    used: set[int] = set()
    for k in range(n_extra):
        d = draw_fusion_distance(stream.child(f"dist{k}"), max_range)
        side = 1 if stream.child(f"side{k}").uniform() < 0.5 else -1
        target = s[current_frame] + side * d
        pool = [j for j in candidates
                if (s[j] > s[current_frame]) == (side > 0)
                and s[j] != s[current_frame]]
        if not pool:
            pool = candidates
        fresh = [j for j in pool if j not in used]
        if fresh:
            pool = fresh
        j = min(pool, key=lambda k: (abs(s[k] - target), k))
        picks.append(j)
        used.add(j)
    return [(j, relative_pose(poses[current_frame], poses[j])) for j in picks]


@dataclass
class FusionResult:
    probs: Raster
    provenance: np.ndarray               # (3, rows, cols)
    fused_feats: np.ndarray | None = None


def _apply_head(params: ParamSet, feats: np.ndarray) -> np.ndarray:
    w = params["head.w"].values[:, :, 0, 0]
    b = params["head.b"].values
    logits = np.einsum("oc,chw->ohw", w, feats) + b[:, None, None]
    return 1.0 / (1.0 + np.exp(-logits))


def fuse_teacher(current: ForwardTrace,
                 extras: list[tuple[int, Pose2, ForwardTrace]],
                 mode: str, spec, params: ParamSet | None = None,
                 current_index: int = 0,
                 warp_mode: str = "nearest") -> FusionResult:
    """Combine teacher predictions from nearby frames in the current frame.

    probs mode keeps, per cell and class, the prediction of maximal
    confidence |p - 0.5| (ties: current frame, then lower frame index).
    feats mode averages warped decoded features over valid contributors and
    re-applies the classification head.
    """
    cur_probs = current.prob_values
    if mode == "none" or not extras:
        return FusionResult(Raster(spec, cur_probs.copy()),
                            np.full(cur_probs.shape, current_index, np.int64))
    ordered = sorted(extras, key=lambda e: e[0])

    if mode == "probs":
        fused = cur_probs.copy()
        conf = np.abs(fused - 0.5)
        valid_any = np.ones((spec.rows, spec.cols), dtype=bool)
        prov = np.full(fused.shape, current_index, dtype=np.int64)
        for fi, rel, trace in ordered:
            warped = warp_raster(Raster(spec, trace.prob_values), rel,
                                 _IDENTITY, "nearest")
            wconf = np.abs(warped.values - 0.5)
            take = warped.valid[None] & (wconf > conf)
            fused[take] = warped.values[take]
            conf[take] = wconf[take]
            prov[take] = fi
        return FusionResult(Raster(spec, fused, valid_any), prov)

    if mode != "feats":
        raise ConfigurationError(f"unknown fusion mode '{mode}'")
    if params is None:
        raise ContractError("feats fusion needs the teacher parameters")
    acc = current.decoded_feats.values[0].copy()
    count = np.ones((spec.rows, spec.cols))
    for fi, rel, trace in ordered:
        warped = warp_raster(Raster(spec, trace.decoded_feats.values[0]),
                             rel, _IDENTITY, warp_mode)
        acc[:, warped.valid] += warped.values[:, warped.valid]
        count[warped.valid] += 1.0
    feats = acc / count
    probs = _apply_head(params, feats)
    prov = np.full(probs.shape, current_index, dtype=np.int64)
    return FusionResult(Raster(spec, probs), prov, feats)


# -------------------------------------------------------------- trainer ---

@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    wd: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    ema_keep: float = 0.99


@dataclass
class StepReport:
    step: int
    loss_total: float
    loss_sup: float
    loss_cls: float
    loss_feat: float
    w_cls: float
    w_feat: float
    pseudo_kept_frac: float


class Trainer:
    """One (student, optional teacher) pair bound to a dataset and configs."""

    def __init__(self, dataset: Dataset, model_cfg: ModelConfig,
                 weights: LossWeights, augment_cfg: AugmentConfig,
                 pseudo_cfg: PseudoLabelConfig, optim: OptimConfig,
                 seed: int, total_steps: int, ssl: bool = True,
                 batch_labelled: int = 1, batch_unlabelled: int = 1,
                 supervised_augment: AugmentConfig | None = None):
        if not dataset.split.labelled:
            raise ContractError("training requires at least one labelled sequence")
        if total_steps <= 0:
            raise ConfigurationError("total_steps must be positive")
        self.dataset = dataset
        self.model_cfg = model_cfg
        self.weights = weights
        self.augment_cfg = augment_cfg
        self.sup_augment = (supervised_augment if supervised_augment is not None
                            else augment_cfg)
        self.pseudo_cfg = pseudo_cfg
        self.optim = optim
        self.total_steps = total_steps
        self.ssl = ssl and bool(dataset.split.unlabelled)
        self.batch_labelled = batch_labelled
        self.batch_unlabelled = batch_unlabelled
        self.seed = seed

        self.student = init_params(model_cfg, seed)
        self.teacher = (TeacherState(self.student.copy(), optim.ema_keep)
                        if self.ssl else None)
        self.step_count = 0

    def _pick(self, stream: Stream, seq_ids: list[int]) -> Sample:
        seq = self.dataset.sequences[seq_ids[stream.randint(len(seq_ids))]]
        return seq.samples[stream.randint(len(seq.samples))]

    def _teacher_trace(self, sample: Sample) -> ForwardTrace:
        # weak view: the teacher always sees the unaugmented observation
        return forward(self.teacher.params, sample.observation, None, None,
                       self.model_cfg)

    def _fused_pseudo(self, sample: Sample, stream: Stream,
                      ) -> tuple[PseudoLabelBundle, ForwardTrace, FusionResult]:
        cfg = self.pseudo_cfg
        sel: list[tuple[int, Pose2]] = []
        if cfg.fusion_mode != "none" and cfg.fusion_extra > 0:
            seq = self.dataset.sequences[sample.sequence_id]
            sel = select_fusion_frames(seq.poses, sample.frame_index,
                                       cfg.fusion_extra, cfg.fusion_max_range,
                                       stream.child("frames"))
        if sel:
            # one batched teacher pass over current + fusion frames
            seq = self.dataset.sequences[sample.sequence_id]
            frames = [sample] + [seq.samples[fi] for fi, _ in sel]
            batch = np.stack([f.observation.values for f in frames])
            bt = forward(self.teacher.params, batch, None, None, self.model_cfg)
            views = [_trace_view(bt, k) for k in range(len(frames))]
            cur = views[0]
            extras = [(fi, rel, views[k + 1])
                      for k, (fi, rel) in enumerate(sel)]
        else:
            cur = self._teacher_trace(sample)
            extras = []
        fusion = fuse_teacher(cur, extras, cfg.fusion_mode, self.dataset.spec,
                              self.teacher.params, sample.frame_index,
                              cfg.fusion_warp)
        bundle = make_pseudo_labels(fusion.probs, cfg,
                                    provenance=fusion.provenance)
        return bundle, cur, fusion

    def train_step(self) -> StepReport:
        step = self.step_count
        if step >= self.total_steps:
            raise ContractError("training past total_steps")
        split = self.dataset.split
        if not split.labelled:
            raise ContractError("empty labelled batch")
        st = Stream(self.seed).child("train").child(step)
        tape = Tape()

        sup_terms = []
        for b in range(self.batch_labelled):
            sb = st.child(f"sup{b}")
            sample = self._pick(sb.child("pick"), split.labelled)
            view, fov, _ = strong_augment(sample.observation, sample.sector_map,
                                          self.sup_augment, sb.child("aug"))
            trace = forward(self.student, view, None, tape, self.model_cfg)
            loss, _ = focal_loss(trace.probs, sample.gt.values[None],
                                 fov.include[None], self.weights.focal_gamma,
                                 self.weights.focal_alpha)
            sup_terms.append(loss)

        cls_terms, feat_terms = [], []
        kept = total_cells = 0
        w_cls_eff = rampup_weight(step, self.total_steps, self.weights.w_cls,
                                  self.weights.rampup_fraction)
        w_feat_eff = rampup_weight(step, self.total_steps, self.weights.w_feat,
                                   self.weights.rampup_fraction)
        use_unsup = (self.ssl and self.teacher is not None
                     and (w_cls_eff > 0.0 or w_feat_eff > 0.0))
        if use_unsup:
            for b in range(self.batch_unlabelled):
                su = st.child(f"unsup{b}")
                sample = self._pick(su.child("pick"), split.unlabelled)
                bundle, cur_trace, fusion = self._fused_pseudo(
                    sample, su.child("fusion"))
                view, fov, drop = strong_augment(
                    sample.observation, sample.sector_map, self.augment_cfg,
                    su.child("aug"))
                trace = forward(self.student, view, drop, tape, self.model_cfg)
                mask = bundle.mask.intersect(fov)
                loss, n_inc = focal_loss(trace.probs, bundle.targets[None],
                                         mask.include[None],
                                         self.weights.focal_gamma,
                                         self.weights.focal_alpha)
                cls_terms.append(loss)
                kept += n_inc
                total_cells += mask.include.size
                if w_feat_eff > 0.0:
                    feat_terms.append(self._feat_term(trace, cur_trace, fusion))

        total, breakdown = total_loss(sup_terms, cls_terms, feat_terms,
                                      self.weights, step, self.total_steps)
        backward(total, self.student)
        if self.teacher is not None:
            for _, p in self.teacher.params.items():
                if p.grad.any():
                    raise ContractError("teacher received gradient")
        optimizer_step(self.student, self.optim.lr, self.optim.wd,
                       self.optim.betas, step + 1)
        if self.teacher is not None:
            ema_update(self.teacher, self.student)
        self.step_count += 1
        return StepReport(step, breakdown["loss_total"], breakdown["loss_sup"],
                          breakdown["loss_cls"], breakdown["loss_feat"],
                          breakdown["w_cls"], breakdown["w_feat"],
                          kept / total_cells if total_cells else 0.0)

    def _feat_term(self, student_trace: ForwardTrace, teacher_trace: ForwardTrace,
                   fusion: FusionResult):
        level = self.weights.feat_level
        if level == "early":
            s_tap = student_trace.bev_feats
            t_tap = teacher_trace.bev_feats.values
        else:
            s_tap = student_trace.decoded_feats
            if self.pseudo_cfg.fusion_mode == "feats" and fusion.fused_feats is not None:
                t_tap = fusion.fused_feats[None]
            else:
                t_tap = teacher_trace.decoded_feats.values
        return feature_similarity_loss(s_tap, t_tap, self.weights.feat_mode)

    def evaluate(self, seq_ids, params: ParamSet | None = None):
        """Per-sample (probs, gt) pairs on the plain (weak) observations."""
        params = params or self.student
        out = []
        for sid in seq_ids:
            for sample in self.dataset.sequences[sid].samples:
                trace = forward(params, sample.observation, None, None,
                                self.model_cfg)
                out.append((trace.prob_values, sample.gt.values))
        return out
