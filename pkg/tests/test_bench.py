import json

import numpy as np
import pytest

from bevssl.bench import (IoUAccumulator, Metrics, ScenarioConfig,
                          best_validation_step, canonical_json, compute_iou,
                          config_from_dict, expand_runs, export_artifacts,
                          load_checkpoint_params, run_one, run_scenario,
                          scenario_variants, template_variants, write_pgm,
                          write_ppm)
from bevssl.bench import EvalConfig, TrainConfig, WorldConfig
from bevssl.errors import ConfigurationError
from bevssl.model import ModelConfig
from bevssl.rng import Stream

TINY_MODEL = dict(enc_widths=[3, 4], lift_channels=4, dec_widths=[4])


def tiny_config(kind="ssl", **over) -> ScenarioConfig:
    doc = {
        "kind": kind,
        "name": "tiny",
        "world": {"n_worlds": 6, "seqs_per_world": 1, "n_frames": 4,
                  "val_worlds": 1, "test_worlds": 2, "utilisation": 0.34},
        "model": TINY_MODEL,
        "train": {"total_steps": 12, "eval_every": 6,
                  "batch_labelled": 1, "batch_unlabelled": 1},
        "eval": {"seeds": [0]},
    }
    doc.update(over)
    return config_from_dict(doc)


# ----------------------------------------------------------------- metrics --

def test_iou_perfect_prediction():
    st = Stream(1)
    gt = (st.uniforms(3 * 8 * 8).reshape(3, 8, 8) > 0.7).astype(float)
    m = compute_iou(gt.copy(), gt)
    assert m.per_class == [1.0, 1.0, 1.0]
    assert m.miou == 1.0


def test_iou_disjoint_prediction_is_zero():
    gt = np.zeros((3, 4, 4))
    pred = np.zeros((3, 4, 4))
    gt[:, 0, 0] = 1.0
    pred[:, 1, 1] = 1.0
    m = compute_iou(pred, gt)
    assert m.per_class == [0.0, 0.0, 0.0]
    assert m.miou == 0.0


def test_iou_count_arithmetic():
    acc = IoUAccumulator()
    pred = np.zeros((3, 10, 10))
    gt = np.zeros((3, 10, 10))
    # class 0: 50 TP, 25 FP, 25 FN -> IoU 0.5
    pred[0].flat[:75] = 1.0
    gt[0].flat[:50] = 1.0
    gt[0].flat[75:100] = 1.0
    acc.update(pred, gt)
    m = acc.metrics()
    assert m.tp[0] == 50 and m.fp[0] == 25 and m.fn[0] == 25
    assert m.per_class[0] == 0.5


def test_iou_absent_class_excluded_with_warning():
    pred = np.zeros((3, 4, 4))
    gt = np.zeros((3, 4, 4))
    pred[0, 0, 0] = 1.0
    gt[0, 0, 0] = 1.0
    m = compute_iou(pred, gt)
    assert m.per_class[0] == 1.0
    assert m.per_class[1] is None and m.per_class[2] is None
    assert m.absent == ["divider", "boundary"]
    assert m.miou == 1.0


def test_iou_matches_bruteforce_counter():
    for case in range(100):
        st = Stream(800 + case)
        pred = st.uniforms(3 * 5 * 5).reshape(3, 5, 5)
        gt = (st.uniforms(3 * 5 * 5).reshape(3, 5, 5) > 0.5).astype(float)
        m = compute_iou(pred, gt)
        for c in range(3):
            tp = fp = fn = 0
            for r in range(5):
                for q in range(5):
                    p = pred[c, r, q] > 0.5
                    t = gt[c, r, q] > 0.5
                    tp += p and t
                    fp += p and not t
                    fn += (not p) and t
            assert (m.tp[c], m.fp[c], m.fn[c]) == (tp, fp, fn)
            if tp + fp + fn:
                assert abs(m.per_class[c] - tp / (tp + fp + fn)) < 1e-12
    present = [x for x in m.per_class if x is not None]
    assert abs(m.miou - np.mean(present)) < 1e-12


# ------------------------------------------------------------------ config --

def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigurationError):
        config_from_dict({"world": {"bogus": 1}})
    with pytest.raises(ConfigurationError):
        config_from_dict({"wrold": {}})


def test_config_echo_roundtrip():
    cfg = tiny_config()
    echo = canonical_json(cfg.to_dict())
    back = config_from_dict(_strip_defaults(json.loads(echo)))
    assert back.to_dict() == cfg.to_dict()


def _strip_defaults(doc):
    # the echo contains every resolved field; feeding it back must reproduce
    # the config exactly, so nothing needs stripping
    return doc


def test_scenario_variants_cover_study_axes():
    assert [v.name for v in scenario_variants(tiny_config("ablation-grid"))] \
        == ["Core", "+Augs", "+Fusion", "+Featsim", "+Thr", "+Hard"]
    names = [v.name for v in template_variants("augmentations")]
    assert names[0] == "none" and "photo+cutout+bevdrop" in names
    taus = [v.pseudo_override["threshold"]
            for v in template_variants("threshold")]
    assert min(taus) == 0.55 and max(taus) == 0.9
    temps = {v.pseudo_override["temperature"]
             for v in template_variants("temperature")}
    assert temps == {0.05, 0.1, 0.25, 0.5, 0.75, 0.95}
    fr = {v.pseudo_override["fusion_max_range"]
          for v in template_variants("fusion")}
    assert fr == {10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0}
    counts = {v.pseudo_override["fusion_extra"]
              for v in template_variants("fusion-frames")}
    assert counts == {2, 4, 6}
    ws = {v.weights_override["w_feat"] for v in template_variants("featsim")}
    assert ws == {0.05, 0.1, 0.25, 0.5, 1.0, 1.5, 2.0, 2.5}
    with pytest.raises(ConfigurationError):
        template_variants("nonexistent")


def test_label_sweep_variants():
    cfg = tiny_config("label-sweep")
    names = [v.name for v in scenario_variants(cfg)]
    assert "supervised@0.025" in names and "ssl@0.1" in names
    assert "ssl@1" not in names  # nothing unlabelled at full utilisation


# ------------------------------------------------------------------- runs ---

def test_run_one_and_best_selection(tmp_path):
    cfg = tiny_config()
    spec = expand_runs(cfg)[0]
    res = run_one(spec)
    assert res.error is None
    assert res.val is not None and res.test is not None
    # exported metric corresponds to the best-validation checkpoint
    step, miou = best_validation_step(res.train_log)
    assert res.best_step == step
    assert abs(res.val.miou - miou) < 1e-12


def test_run_scenario_deterministic_and_exported(tmp_path):
    cfg = tiny_config()
    t1 = run_scenario(cfg)
    t2 = run_scenario(cfg)
    assert t1.csv_text() == t2.csv_text()

    out1, out2 = tmp_path / "a", tmp_path / "b"
    export_artifacts(t1, cfg, out1)
    export_artifacts(t2, cfg, out2)
    assert (out1 / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()
    assert (out1 / "config_echo.json").read_bytes() == \
        (out2 / "config_echo.json").read_bytes()

    rows = (out1 / "metrics.csv").read_text().strip().split("\n")
    # header + scenarios x variants x seeds x splits x (classes + 1 summary)
    assert len(rows) == 1 + 1 * 1 * 1 * 2 * 4
    assert rows[0].startswith("scenario,variant,seed,step,split,class")

    ckpts = sorted(out1.glob("run_*.ckpt"))
    assert ckpts
    params = load_checkpoint_params(ckpts[0], cfg.model, "best")
    again = tmp_path / "resaved.ckpt"
    from bevssl.autograd import load_checkpoint, save_checkpoint
    save_checkpoint(again, load_checkpoint(ckpts[0]))
    assert again.read_bytes() == ckpts[0].read_bytes()


def test_failed_run_recorded_not_raised(tmp_path):
    bad = tiny_config(train={"total_steps": 0, "eval_every": 1})
    table = run_scenario(bad)
    assert table.errors and table.errors[0].error is not None
    assert "total_steps" in table.errors[0].error
    export_artifacts(table, bad, tmp_path)  # still emits a table
    assert (tmp_path / "metrics.csv").exists()
    assert (tmp_path / "errors.txt").exists()


# --------------------------------------------------------------- artifacts --

def test_pgm_scaling_rule(tmp_path):
    img = np.array([[0.0, 1.0], [0.5, 2.0]])
    path = tmp_path / "x.pgm"
    write_pgm(path, img)
    data = path.read_bytes()
    assert data.startswith(b"P5\n2 2\n255\n")
    pix = list(data[len(b"P5\n2 2\n255\n"):])
    assert pix == [0, 255, 128, 255]  # clamped above 1.0


def test_ppm_composite(tmp_path):
    rgb = np.zeros((3, 1, 2))
    rgb[0, 0, 0] = 1.0
    rgb[2, 0, 1] = 1.0
    path = tmp_path / "x.ppm"
    write_ppm(path, rgb)
    data = path.read_bytes()
    assert data.startswith(b"P6\n2 1\n255\n")
    assert list(data[-6:]) == [255, 0, 0, 0, 0, 255]
