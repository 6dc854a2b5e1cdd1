"""Metrics, the experiment harness, and file outputs.

A scenario expands into (variant, seed) runs; each run generates its data,
trains, selects the best-on-validation checkpoint, and evaluates it on the
held-out test split.  Runs are independent and may execute in worker
processes; the results table is assembled in canonical order so output
bytes do not depend on scheduling.
"""

from __future__ import annotations

import json
import multiprocessing
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentConfig
from .autograd import ParamSet, load_checkpoint, save_checkpoint
from .engine import OptimConfig, PseudoLabelConfig, Trainer
from .errors import ConfigurationError
from .geometry import GRID_PRESETS, Raster
from .losses import LossWeights
from .model import ModelConfig, forward, init_params
from .rng import Stream, mix64
from .world import (CLASS_NAMES, Dataset, DatasetSplit, STYLE_PRESETS,
                    build_dataset, build_sequence, generate_world)

N_CLASSES = len(CLASS_NAMES)

METRICS_HEADER = ("scenario,variant,seed,step,split,class,iou,miou,"
                  "loss_sup,loss_cls,loss_feat")


# ---------------------------------------------------------------- metrics --

@dataclass
class Metrics:
    split: str
    step: int
    tp: list[int]
    fp: list[int]
    fn: list[int]
    per_class: list[float | None]
    miou: float
    absent: list[str]


class IoUAccumulator:
    """Per-class intersection/union counts over any number of rasters."""

    def __init__(self, binarize_at: float = 0.5):
        self.binarize_at = binarize_at
        self.tp = np.zeros(N_CLASSES, dtype=np.int64)
        self.fp = np.zeros(N_CLASSES, dtype=np.int64)
        self.fn = np.zeros(N_CLASSES, dtype=np.int64)

    def update(self, pred_probs: np.ndarray, gt: np.ndarray,
               valid: np.ndarray | None = None) -> None:
        if pred_probs.shape != gt.shape:
            raise ConfigurationError(
                f"prediction {pred_probs.shape} vs gt {gt.shape}")
        pred = pred_probs > self.binarize_at
        truth = gt > 0.5
        if valid is not None:
            pred = pred & valid
            truth = truth & valid
        for c in range(N_CLASSES):
            self.tp[c] += int(np.sum(pred[c] & truth[c]))
            self.fp[c] += int(np.sum(pred[c] & ~truth[c]))
            self.fn[c] += int(np.sum(~pred[c] & truth[c]))

    def metrics(self, split: str = "", step: int = 0) -> Metrics:
        per_class: list[float | None] = []
        absent = []
        present_ious = []
        for c in range(N_CLASSES):
            union = self.tp[c] + self.fp[c] + self.fn[c]
            if union == 0:
                per_class.append(None)
                absent.append(CLASS_NAMES[c])
            else:
                iou = self.tp[c] / union
                per_class.append(float(iou))
                present_ious.append(float(iou))
        miou = float(np.mean(present_ious)) if present_ious else 0.0
        return Metrics(split, step, self.tp.tolist(), self.fp.tolist(),
                       self.fn.tolist(), per_class, miou, absent)


def compute_iou(pred_probs, gt, binarize_at: float = 0.5) -> Metrics:
    """Metrics for a single (prediction, ground-truth) raster pair."""
    pv = pred_probs.values if isinstance(pred_probs, Raster) else pred_probs
    gv = gt.values if isinstance(gt, Raster) else gt
    acc = IoUAccumulator(binarize_at)
    acc.update(pv, gv)
    return acc.metrics()


def evaluate_pairs(pairs, split: str, step: int) -> Metrics:
    acc = IoUAccumulator()
    for probs, gt in pairs:
        acc.update(probs, gt)
    return acc.metrics(split, step)


# ----------------------------------------------------------- configuration --

@dataclass(frozen=True)
class WorldConfig:
    style: str = "city_A"
    grid_preset: str = "small"
    n_worlds: int = 50
    seqs_per_world: int = 1
    n_frames: int = 12
    val_worlds: int = 4
    test_worlds: int = 6
    utilisation: float = 0.1
    speed_min: float = 0.0
    speed_max: float = 12.0


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters tuned for the synthetic benchmark (learning
    rate, weight decay, and focal balance are dataset-tuned knobs)."""

    total_steps: int = 3000
    eval_every: int = 250
    batch_labelled: int = 2
    batch_unlabelled: int = 1
    lr: float = 3e-3
    wd: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    ema_keep: float = 0.99
    focal_gamma: float = 2.0
    focal_alpha: float = 0.75
    ssl: bool = True
    eval_model: str = "student"   # "student" | "teacher"
    supervised_augment: str = "none"  # "none" | "same"


@dataclass(frozen=True)
class SslConfig:
    w_cls: float = 1.0
    w_feat: float = 0.25
    rampup_fraction: float = 1.0 / 3.0
    feat_mode: str = "cosine"
    feat_level: str = "late"
    threshold: float | None = 0.6
    temperature: float | None = None
    hard: bool = False
    fusion_mode: str = "probs"
    fusion_extra: int = 2
    fusion_max_range: float = 30.0
    fusion_warp: str = "nearest"
    confidence: str = "two_sided"


@dataclass(frozen=True)
class EvalConfig:
    scenario: str = "components"
    seeds: tuple[int, ...] = (0, 1, 2)
    sweep_utilisations: tuple[float, ...] = (0.025, 0.05, 0.1, 0.25, 0.5, 1.0)
    adapt_target_style: str = "city_B"
    adapt_source_worlds: int = 10
    adapt_unlabelled_counts: tuple[int, ...] = (0, 8, 32)


@dataclass(frozen=True)
class ScenarioConfig:
    kind: str = "ssl"
    name: str = "scenario"
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    ssl: SslConfig = field(default_factory=SslConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)


_SECTION_TYPES = {"world": WorldConfig, "model": ModelConfig,
                  "train": TrainConfig, "augment": AugmentConfig,
                  "ssl": SslConfig, "eval": EvalConfig}

_TUPLE_FIELDS = {"enc_widths", "dec_widths", "seeds", "sweep_utilisations",
                 "adapt_unlabelled_counts", "gain_range", "bias_range",
                 "betas"}


def config_from_dict(data: dict) -> ScenarioConfig:
    """Build a ScenarioConfig from a JSON document, rejecting unknown keys."""
    known_top = {"kind", "name", *_SECTION_TYPES}
    unknown = set(data) - known_top
    if unknown:
        raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
    kwargs: dict = {}
    for key in ("kind", "name"):
        if key in data:
            kwargs[key] = data[key]
    for section, cls in _SECTION_TYPES.items():
        src = data.get(section, {})
        if not isinstance(src, dict):
            raise ConfigurationError(f"config section '{section}' must be an object")
        fields = {f.name for f in cls.__dataclass_fields__.values()}
        bad = set(src) - fields
        if bad:
            raise ConfigurationError(
                f"unknown keys in '{section}': {sorted(bad)}")
        coerced = {k: tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list)
                   else v for k, v in src.items()}
        try:
            kwargs[section] = cls(**coerced)
        except TypeError as exc:
            raise ConfigurationError(f"bad '{section}' config: {exc}") from exc
    return ScenarioConfig(**kwargs)


def load_config(path) -> ScenarioConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path!s}: {exc}") from exc
    return config_from_dict(data)


def canonical_json(data: dict) -> str:
    return json.dumps(data, sort_keys=True, indent=2) + "\n"


# ------------------------------------------------------------ run plumbing --

@dataclass
class Variant:
    name: str
    ssl: bool = True
    augment: AugmentConfig | None = None
    weights_override: dict = field(default_factory=dict)
    pseudo_override: dict = field(default_factory=dict)
    utilisation: float | None = None
    adapt_unlabelled: int | None = None


@dataclass
class RunSpec:
    scenario: str
    variant: Variant
    seed: int
    cfg: ScenarioConfig


@dataclass
class RunResult:
    scenario: str
    variant: str
    seed: int
    best_step: int
    val: Metrics | None
    test: Metrics | None
    final_losses: dict
    train_log: list[dict]
    checkpoint: dict
    preview: dict
    error: str | None = None


def _weights_for(spec: RunSpec) -> LossWeights:
    s, t = spec.cfg.ssl, spec.cfg.train
    base = dict(w_cls=s.w_cls, w_feat=s.w_feat,
                rampup_fraction=s.rampup_fraction, focal_gamma=t.focal_gamma,
                focal_alpha=t.focal_alpha, feat_mode=s.feat_mode,
                feat_level=s.feat_level)
    base.update(spec.variant.weights_override)
    return LossWeights(**base)


def _pseudo_for(spec: RunSpec) -> PseudoLabelConfig:
    s = spec.cfg.ssl
    base = dict(threshold=s.threshold, temperature=s.temperature, hard=s.hard,
                fusion_mode=s.fusion_mode, fusion_extra=s.fusion_extra,
                fusion_max_range=s.fusion_max_range, fusion_warp=s.fusion_warp,
                confidence=s.confidence)
    base.update(spec.variant.pseudo_override)
    return PseudoLabelConfig(**base)


_DATASET_CACHE: dict = {}


def _build_run_dataset(spec: RunSpec) -> Dataset:
    w = spec.cfg.world
    grid = GRID_PRESETS[w.grid_preset]
    util = (spec.variant.utilisation if spec.variant.utilisation is not None
            else w.utilisation)
    data_seed = Stream(spec.seed).child("data").seed
    if spec.variant.adapt_unlabelled is None:
        key = (w.grid_preset, w.style, data_seed, w.n_worlds, w.seqs_per_world,
               w.n_frames, util, w.val_worlds, w.test_worlds, w.speed_min,
               w.speed_max)
        if key not in _DATASET_CACHE:
            if len(_DATASET_CACHE) > 4:
                _DATASET_CACHE.clear()
            _DATASET_CACHE[key] = build_dataset(
                grid, STYLE_PRESETS[w.style], data_seed, n_worlds=w.n_worlds,
                seqs_per_world=w.seqs_per_world, n_frames=w.n_frames,
                utilisation=util, val_worlds=w.val_worlds,
                test_worlds=w.test_worlds,
                speed_range=(w.speed_min, w.speed_max))
        return _DATASET_CACHE[key]
    return _build_adapt_dataset(spec, grid, data_seed)


def _build_adapt_dataset(spec: RunSpec, grid, data_seed: int) -> Dataset:
    """Source-style labelled worlds plus target-style unlabelled/val/test."""
    w, ev = spec.cfg.world, spec.cfg.eval
    n_target = max(ev.adapt_unlabelled_counts)
    key = ("adapt", w.grid_preset, w.style, ev.adapt_target_style, data_seed,
           ev.adapt_source_worlds, n_target, w.val_worlds, w.test_worlds,
           w.n_frames, w.speed_min, w.speed_max)
    if key not in _DATASET_CACHE:
        if len(_DATASET_CACHE) > 4:
            _DATASET_CACHE.clear()
        src_style = STYLE_PRESETS[w.style]
        tgt_style = STYLE_PRESETS[ev.adapt_target_style]
        worlds = []
        for i in range(ev.adapt_source_worlds):
            worlds.append(generate_world(mix64(data_seed ^ mix64(i)), src_style))
        n_tgt_worlds = n_target + w.val_worlds + w.test_worlds
        for i in range(n_tgt_worlds):
            worlds.append(generate_world(mix64(data_seed ^ mix64(50000 + i)),
                                         tgt_style))
        sequences = {}
        for sid, world in enumerate(worlds):
            seq_seed = mix64(data_seed ^ mix64(7777 + sid))
            sequences[sid] = build_sequence(world, sid, sid, seq_seed, grid,
                                            w.n_frames,
                                            (w.speed_min, w.speed_max))
        _DATASET_CACHE[key] = (worlds, sequences)
    worlds, sequences = _DATASET_CACHE[key]

    n_src = ev.adapt_source_worlds
    tgt_train = list(range(n_src, n_src + n_target))
    order = Stream(data_seed).child("adapt-pick").permutation(n_target)
    n_use = spec.variant.adapt_unlabelled or 0
    unlabelled = sorted(tgt_train[i] for i in order[:n_use])
    val_lo = n_src + n_target
    split = DatasetSplit(
        labelled=list(range(n_src)), unlabelled=unlabelled,
        val=list(range(val_lo, val_lo + w.val_worlds)),
        test=list(range(val_lo + w.val_worlds, val_lo + w.val_worlds
                        + w.test_worlds)),
        label_utilisation=1.0)
    return Dataset(grid, worlds, sequences, split)


def run_one(spec: RunSpec) -> RunResult:
    """Generate data, train, pick best-on-validation, evaluate on test."""
    cfg = spec.cfg
    t = cfg.train
    dataset = _build_run_dataset(spec)
    augment = (spec.variant.augment if spec.variant.augment is not None
               else cfg.augment)
    # inside the teacher-student scheme the labelled branch shares the strong
    # augmentations; the plain supervised baseline trains on clean views
    if spec.variant.ssl:
        sup_augment = augment
    else:
        sup_augment = (augment if t.supervised_augment == "same"
                       else AugmentConfig.none())
    trainer = Trainer(
        dataset, cfg.model, _weights_for(spec), augment, _pseudo_for(spec),
        OptimConfig(t.lr, t.wd, (t.beta1, t.beta2), t.ema_keep),
        seed=Stream(spec.seed).child("run").seed,
        total_steps=t.total_steps, ssl=spec.variant.ssl,
        batch_labelled=t.batch_labelled, batch_unlabelled=t.batch_unlabelled,
        supervised_augment=sup_augment)

    def eval_params():
        if t.eval_model == "teacher" and trainer.teacher is not None:
            return trainer.teacher.params
        return trainer.student

    best_vals: dict | None = None
    best_miou, best_step = -1.0, 0
    train_log: list[dict] = []
    final_losses = {"loss_sup": 0.0, "loss_cls": 0.0, "loss_feat": 0.0}
    for step in range(t.total_steps):
        rep = trainer.train_step()
        row = {"step": rep.step, "loss_total": rep.loss_total,
               "loss_sup": rep.loss_sup, "loss_cls": rep.loss_cls,
               "loss_feat": rep.loss_feat, "w_cls": rep.w_cls,
               "w_feat": rep.w_feat, "pseudo_kept_frac": rep.pseudo_kept_frac,
               "val_miou": ""}
        if (step + 1) % t.eval_every == 0 or step + 1 == t.total_steps:
            m = evaluate_pairs(trainer.evaluate(dataset.split.val, eval_params()),
                               "val", step + 1)
            row["val_miou"] = m.miou
            if m.miou > best_miou:
                best_miou, best_step = m.miou, step + 1
                best_vals = eval_params().values_dict()
        train_log.append(row)
        final_losses = {"loss_sup": rep.loss_sup, "loss_cls": rep.loss_cls,
                        "loss_feat": rep.loss_feat}

    best_params = init_params(cfg.model, 0)
    best_params.load_values(best_vals)
    val_m = evaluate_pairs(_eval_with(best_params, trainer, dataset.split.val),
                           "val", best_step)
    test_m = evaluate_pairs(_eval_with(best_params, trainer, dataset.split.test),
                            "test", best_step)

    checkpoint = {f"student.{k}": v for k, v in
                  trainer.student.values_dict().items()}
    if trainer.teacher is not None:
        checkpoint.update({f"teacher.{k}": v for k, v in
                           trainer.teacher.params.values_dict().items()})
    checkpoint.update({f"best.{k}": v for k, v in best_vals.items()})

    preview = _preview_rasters(best_params, trainer, dataset)
    return RunResult(spec.scenario, spec.variant.name, spec.seed, best_step,
                     val_m, test_m, final_losses, train_log, checkpoint,
                     preview)


def _eval_with(params: ParamSet, trainer: Trainer, seq_ids):
    return trainer.evaluate(seq_ids, params)


def _preview_rasters(params, trainer, dataset) -> dict:
    sid = dataset.split.test[0]
    sample = dataset.sequences[sid].samples[0]
    trace = forward(params, sample.observation, None, None, trainer.model_cfg)
    return {"pred": trace.prob_values.copy(), "gt": sample.gt.values.copy(),
            "spec": dataset.spec.to_dict()}


def _run_one_safe(spec: RunSpec) -> RunResult:
    try:
        return run_one(spec)
    except Exception:
        return RunResult(spec.scenario, spec.variant.name, spec.seed, 0, None,
                         None, {}, [], {}, {},
                         error=traceback.format_exc(limit=10))


# ------------------------------------------------------- scenario variants --

def scenario_variants(cfg: ScenarioConfig) -> list[Variant]:
    kind = cfg.kind
    if kind == "supervised":
        return [Variant("supervised", ssl=False)]
    if kind == "ssl":
        return [Variant("ssl")]
    if kind == "ablation-grid":
        return components_variants()
    if kind == "label-sweep":
        out = []
        for u in cfg.eval.sweep_utilisations:
            out.append(Variant(f"supervised@{u:g}", ssl=False, utilisation=u))
            if u < 1.0:
                out.append(Variant(f"ssl@{u:g}", utilisation=u))
        return out
    if kind == "city-adapt":
        return [Variant(f"adapt@{n}", adapt_unlabelled=n)
                for n in cfg.eval.adapt_unlabelled_counts]
    raise ConfigurationError(f"unknown scenario kind '{kind}'")


def components_variants() -> list[Variant]:
    """Incremental component stack: Core, +Augs, +Fusion, +Featsim, +Thr, +Hard."""
    none_aug = AugmentConfig.none()
    core = dict(weights_override={"w_feat": 0.0},
                pseudo_override={"threshold": None, "fusion_mode": "none"})
    plus_augs = dict(weights_override={"w_feat": 0.0},
                     pseudo_override={"threshold": None, "fusion_mode": "none"})
    plus_fusion = dict(weights_override={"w_feat": 0.0},
                       pseudo_override={"threshold": None})
    plus_featsim = dict(pseudo_override={"threshold": None})
    plus_thr: dict = {}
    plus_hard = dict(pseudo_override={"hard": True})
    return [
        Variant("Core", augment=none_aug, **core),
        Variant("+Augs", **plus_augs),
        Variant("+Fusion", **plus_fusion),
        Variant("+Featsim", **plus_featsim),
        Variant("+Thr", **plus_thr),
        Variant("+Hard", **plus_hard),
    ]


def augmentation_variants() -> list[Variant]:
    """Augmentation combinations mirroring the strong-augmentation study."""
    base = dict(weights_override={"w_feat": 0.0},
                pseudo_override={"threshold": None, "fusion_mode": "none"})
    mk = AugmentConfig
    return [
        Variant("none", augment=mk.none(), **base),
        Variant("photo", augment=mk(cutout=False, camdrop=False, bevdrop=False),
                **base),
        Variant("photo+camdrop", augment=mk(cutout=False, camdrop=True,
                                            bevdrop=False), **base),
        Variant("photo+cutout", augment=mk(camdrop=False, bevdrop=False),
                **base),
        Variant("photo+cutout+bevdrop", augment=mk(camdrop=False), **base),
    ]


def threshold_variants(taus=(0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9),
                       ) -> list[Variant]:
    out = []
    for tau in taus:
        for hard in (False, True):
            tag = "thr+hard" if hard else "thr"
            out.append(Variant(
                f"{tag}@{tau:g}", weights_override={"w_feat": 0.0},
                pseudo_override={"threshold": tau, "hard": hard,
                                 "fusion_mode": "none"}))
    return out


def temperature_variants(temps=(0.05, 0.1, 0.25, 0.5, 0.75, 0.95),
                         ) -> list[Variant]:
    out = []
    for temp in temps:
        for name, over in (("nothr", {"threshold": None}),
                           ("thr", {}), ("thr+hard", {"hard": True})):
            pseudo = {"temperature": temp, "fusion_mode": "none", **over}
            out.append(Variant(f"T{temp:g}+{name}",
                               weights_override={"w_feat": 0.0},
                               pseudo_override=pseudo))
    return out


def featsim_variants(weights=(0.05, 0.1, 0.25, 0.5, 1.0, 1.5, 2.0, 2.5),
                     ) -> list[Variant]:
    out = []
    for w in weights:
        for mode in ("mse", "cosine"):
            for level in ("early", "late"):
                out.append(Variant(
                    f"{mode}-{level}@{w:g}",
                    weights_override={"w_feat": w, "feat_mode": mode,
                                      "feat_level": level},
                    pseudo_override={"threshold": None, "fusion_mode": "none"}))
    return out


def fusion_variants(ranges=(10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0),
                    ) -> list[Variant]:
    out = []
    for rng in ranges:
        for mode in ("probs", "feats"):
            for thr_name, thr in (("nothr", None), ("thr", 0.6)):
                out.append(Variant(
                    f"{mode}-{thr_name}@{rng:g}m",
                    weights_override={"w_feat": 0.0},
                    pseudo_override={"fusion_mode": mode,
                                     "fusion_max_range": rng,
                                     "threshold": thr}))
    return out


def fusion_frames_variants(counts=(2, 4, 6)) -> list[Variant]:
    out = []
    for n in counts:
        for mode in ("probs", "feats"):
            out.append(Variant(
                f"{mode}-n{n}", weights_override={"w_feat": 0.0},
                pseudo_override={"fusion_mode": mode, "fusion_extra": n,
                                 "fusion_max_range": 20.0,
                                 "threshold": None}))
    return out


SCENARIO_TEMPLATES = {
    "components": components_variants,
    "augmentations": augmentation_variants,
    "threshold": threshold_variants,
    "temperature": temperature_variants,
    "featsim": featsim_variants,
    "fusion": fusion_variants,
    "fusion-frames": fusion_frames_variants,
}


def template_variants(name: str) -> list[Variant]:
    if name not in SCENARIO_TEMPLATES:
        raise ConfigurationError(
            f"unknown scenario template '{name}' "
            f"(have {sorted(SCENARIO_TEMPLATES)})")
    return SCENARIO_TEMPLATES[name]()


# --------------------------------------------------------------- results ---

@dataclass
class ResultsTable:
    scenario: str
    results: list[RunResult]
    aggregates: list[dict]

    def csv_rows(self) -> list[str]:
        rows = [METRICS_HEADER]
        for r in self.results:
            if r.error is not None:
                continue
            for metrics in (r.val, r.test):
                for c, name in enumerate(CLASS_NAMES):
                    iou = metrics.per_class[c]
                    rows.append(",".join([
                        r.scenario, r.variant, str(r.seed), str(r.best_step),
                        metrics.split, name,
                        _fmt(iou) if iou is not None else "", "", "", "", ""]))
                rows.append(",".join([
                    r.scenario, r.variant, str(r.seed), str(r.best_step),
                    metrics.split, "all", "", _fmt(metrics.miou),
                    _fmt(r.final_losses.get("loss_sup", 0.0)),
                    _fmt(r.final_losses.get("loss_cls", 0.0)),
                    _fmt(r.final_losses.get("loss_feat", 0.0))]))
        return rows

    def csv_text(self) -> str:
        return "\n".join(self.csv_rows()) + "\n"

    def test_mious(self, variant: str) -> list[float]:
        return [r.test.miou for r in self.results
                if r.variant == variant and r.error is None]

    @property
    def errors(self) -> list[RunResult]:
        return [r for r in self.results if r.error is not None]


def _fmt(x: float) -> str:
    return repr(float(x))


def best_validation_step(train_log: list[dict]) -> tuple[int, float]:
    """(step, mIoU) of the checkpoint a run must have exported: the first
    validation evaluation attaining the maximum mIoU."""
    best_step, best = 0, -1.0
    for row in train_log:
        if row["val_miou"] != "" and float(row["val_miou"]) > best:
            best = float(row["val_miou"])
            best_step = int(row["step"]) + 1
    return best_step, best


def expand_runs(cfg: ScenarioConfig,
                variants: list[Variant] | None = None) -> list[RunSpec]:
    variants = variants if variants is not None else scenario_variants(cfg)
    return [RunSpec(cfg.name, v, seed, cfg)
            for v in variants for seed in cfg.eval.seeds]


def run_scenario(cfg: ScenarioConfig, workers: int = 1,
                 variants: list[Variant] | None = None) -> ResultsTable:
    variants = variants if variants is not None else scenario_variants(cfg)
    specs = expand_runs(cfg, variants)
    if workers > 1 and len(specs) > 1:
        with multiprocessing.get_context("fork").Pool(min(workers, len(specs))) as pool:
            results = pool.map(_run_one_safe, specs)
    else:
        results = [_run_one_safe(s) for s in specs]

    order = {(s.variant.name, s.seed): i for i, s in enumerate(specs)}
    results.sort(key=lambda r: order[(r.variant, r.seed)])

    aggregates = []
    for v in variants:
        mious = [r.test.miou for r in results
                 if r.variant == v.name and r.error is None]
        if mious:
            aggregates.append({
                "variant": v.name, "n": len(mious),
                "mean_miou": float(np.mean(mious)),
                "std_miou": float(np.std(mious)),
                "median_miou": float(np.median(mious))})
    return ResultsTable(cfg.name, results, aggregates)


# --------------------------------------------------------------- artifacts --

def write_pgm(path, channel: np.ndarray) -> None:
    """8-bit binary portable graymap; 0.0 -> 0, 1.0 -> 255."""
    data = np.rint(np.clip(channel, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """8-bit binary portable pixmap from three class channels."""
    data = np.rint(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    _, h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.transpose(1, 2, 0).tobytes())


def export_raster_images(out_dir: Path, name: str, values: np.ndarray) -> None:
    for c in range(values.shape[0]):
        write_pgm(out_dir / f"{name}_ch{c}.pgm", values[c])
    if values.shape[0] >= 3:
        write_ppm(out_dir / f"{name}_rgb.ppm", values[:3])


TRAIN_LOG_HEADER = ("step,loss_total,loss_sup,loss_cls,loss_feat,w_cls,"
                    "w_feat,pseudo_kept_frac,val_miou")


def export_artifacts(table: ResultsTable, cfg: ScenarioConfig, out_dir) -> None:
    """Metrics CSV, canonical config echo, checkpoints, logs, and images."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(table.csv_text())
    (out / "config_echo.json").write_text(canonical_json(cfg.to_dict()))
    (out / "aggregates.json").write_text(canonical_json(
        {"scenario": table.scenario, "aggregates": table.aggregates}))
    if table.errors:
        (out / "errors.txt").write_text("\n\n".join(
            f"{r.variant} seed={r.seed}\n{r.error}" for r in table.errors))
    for r in table.results:
        if r.error is not None:
            continue
        tag = f"{_safe(r.variant)}_s{r.seed}"
        save_checkpoint(out / f"run_{tag}.ckpt", r.checkpoint)
        lines = [TRAIN_LOG_HEADER]
        for row in r.train_log:
            lines.append(",".join([
                str(row["step"]), _fmt(row["loss_total"]), _fmt(row["loss_sup"]),
                _fmt(row["loss_cls"]), _fmt(row["loss_feat"]), _fmt(row["w_cls"]),
                _fmt(row["w_feat"]), _fmt(row["pseudo_kept_frac"]),
                _fmt(row["val_miou"]) if row["val_miou"] != "" else ""]))
        (out / f"train_log_{tag}.csv").write_text("\n".join(lines) + "\n")
        if r.preview:
            export_raster_images(out, f"pred_{tag}", r.preview["pred"])
            export_raster_images(out, f"gt_{tag}", r.preview["gt"])


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_@." else "_" for ch in name)


def load_checkpoint_params(path, model_cfg: ModelConfig, which: str = "best",
                           ) -> ParamSet:
    """Rebuild a ParamSet from a prefixed run checkpoint."""
    raw = load_checkpoint(path)
    prefix = which + "."
    vals = {k[len(prefix):]: v for k, v in raw.items() if k.startswith(prefix)}
    if not vals:
        # bare checkpoint without prefixes
        vals = raw
    params = init_params(model_cfg, 0)
    params.load_values(vals)
    return params
