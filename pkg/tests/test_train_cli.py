import csv
import json

import numpy as np
import pytest
import torch
from PIL import Image

from cascadesod.cli import load_config, main
from cascadesod.data import SynthSpec, generate_synthetic, load_root
from cascadesod.net import NetConfig
from cascadesod.train import (
    PRESETS,
    CheckpointMismatch,
    NonFiniteLoss,
    TrainConfig,
    infer,
    load_checkpoint,
    lr_schedule,
    train,
)

TINY_NET = dict(widths=[8, 8, 16, 16], stem_width=8, encoder_widths=[4, 4, 8, 8], flow=8)


def tiny_cfg(**kw):
    base = dict(epochs=2, batch_size=4, input_size=64, net=TINY_NET, augment=True)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    generate_synthetic(SynthSpec(n_images=10, canvas=64, seed=5), root / "train")
    generate_synthetic(SynthSpec(n_images=4, canvas=80, seed=6), root / "test")
    return root


@pytest.fixture(scope="module")
def b7_checkpoint(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("b7")
    train(tiny_cfg(epochs=1), load_root(corpus / "train", 64), out)
    return out / "final.pt"


def test_lr_schedule_apex_terminus_and_ratio():
    cfg = TrainConfig()
    total = 1000
    warm = round(cfg.warmup_fraction * total)
    assert lr_schedule(warm, total, cfg) == (cfg.lr_backbone, cfg.lr_head)
    assert lr_schedule(total, total, cfg) == (0.0, 0.0)
    assert lr_schedule(0, total, cfg) == (0.0, 0.0)
    for step in range(1, total):
        b, h = lr_schedule(step, total, cfg)
        assert h == pytest.approx(10 * b, rel=1e-12)
    ramp = [lr_schedule(s, total, cfg)[0] for s in range(warm + 1)]
    assert np.all(np.diff(ramp) > 0)
    with pytest.raises(ValueError):
        lr_schedule(total + 1, total, cfg)


def test_config_validation_and_profiles():
    with pytest.raises(ValueError):
        TrainConfig(input_size=100)
    with pytest.raises(ValueError):
        TrainConfig(lr_head=0)
    with pytest.raises(ValueError):
        TrainConfig(preset="B9")
    paper = TrainConfig.from_dict({"profile": "paper"})
    assert (paper.input_size, paper.batch_size, paper.epochs) == (352, 32, 50)
    assert TrainConfig.from_dict(TrainConfig(seed=3).to_dict()) == TrainConfig(seed=3)


def test_presets_are_consistent():
    for name in PRESETS:
        cfg = TrainConfig(preset=name)
        net, flags = cfg.net_config(), cfg.loss_flags()
        assert net.cascade == flags.cascade and net.body_first == flags.body_first
    b = {k: TrainConfig(preset=k) for k in ("B3", "B4", "B5", "B6", "B7")}
    assert not b["B3"].loss_flags().ssim and b["B4"].loss_flags().ssim
    assert not b["B4"].loss_flags().iou_f and b["B5"].loss_flags().iou_f
    assert not b["B5"].net_config().mdab and b["B6"].net_config().mdab and not b["B6"].net_config().mbab
    assert b["B7"].net_config().mbab and TrainConfig(preset="full").net_config() == b["B7"].net_config()


def test_load_config_file_and_overrides(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("preset: B3\nepochs: 4\nnet:\n  flow: 16\n")
    cfg = load_config(path, overrides={"epochs": 7, "seed": None})
    assert cfg.preset == "B3" and cfg.epochs == 7 and cfg.net_config().flow == 16
    cfg = load_config(path, overrides={"net": {"widths": [8, 8, 16, 16]}})
    assert cfg.net == {"flow": 16, "widths": [8, 8, 16, 16]}
    with pytest.raises(ValueError, match="unknown config keys"):
        load_config(overrides={"bogus": 1})


def test_b1_checkpoint_has_no_cascade_parameters(corpus, tmp_path):
    train(tiny_cfg(preset="B1", epochs=1), load_root(corpus / "train", 64), tmp_path)
    model, payload = load_checkpoint(tmp_path / "final.pt")
    assert payload["final"]
    names = list(payload["model"])
    assert not any(k in n for n in names for k in ("detail", "mdab", "mbab", "encoder", "units"))


def test_resume_mid_epoch_reproduces_trajectory(corpus, tmp_path):
    ds = load_root(corpus / "train", 64)
    cfg = tiny_cfg(epochs=2)  # 3 batches per epoch
    _, full = train(cfg, ds, tmp_path / "full")
    _, part = train(cfg, ds, tmp_path / "part", stop_after=4)
    assert part.step == 4
    model, resumed = train(cfg, ds, tmp_path / "part", resume=tmp_path / "part" / "last.pt")
    assert resumed.history == full.history
    a = torch.load(tmp_path / "full" / "final.pt", weights_only=True)["model"]
    b = torch.load(tmp_path / "part" / "final.pt", weights_only=True)["model"]
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_single_batch_loss_drops(corpus, tmp_path):
    from cascadesod.data import collate

    ds = load_root(corpus / "train", 64)
    batch = collate([ds[i] for i in range(4)])
    _, state = train(tiny_cfg(epochs=60), None, tmp_path, fixed_batch=batch)
    assert state.history[-1] < 0.5 * state.history[0]


def test_non_finite_loss_aborts_with_dump(corpus, tmp_path, monkeypatch):
    import cascadesod.train as tr

    real = tr.hybrid_loss
    calls = []

    def poisoned(*args, **kw):
        rep = real(*args, **kw)
        calls.append(1)
        if len(calls) == 2:
            rep.l_total = rep.l_total * float("nan")
        return rep

    monkeypatch.setattr(tr, "hybrid_loss", poisoned)
    with pytest.raises(NonFiniteLoss, match=r"batch 1") as err:
        train(tiny_cfg(epochs=1), load_root(corpus / "train", 64), tmp_path)
    dumps = list(tmp_path.glob("nonfinite_*.pt"))
    assert len(dumps) == 1
    ids = torch.load(dumps[0], weights_only=True)["ids"]
    assert ids and all(i in str(err.value) for i in ids)


def test_infer_outputs_fusion_identity_and_determinism(corpus, b7_checkpoint, tmp_path):
    images = corpus / "test" / "images"
    s1 = infer(b7_checkpoint, images, tmp_path / "a", dump=("detail", "body"))
    infer(b7_checkpoint, images, tmp_path / "b", dump=("detail", "body"))
    assert s1["n_images"] == 4 and s1["images_per_sec"] > 0
    for p in sorted(images.glob("*.png")):
        fa = (tmp_path / "a" / p.name).read_bytes()
        assert fa == (tmp_path / "b" / p.name).read_bytes()
        load = lambda q: np.asarray(Image.open(q), dtype=np.float64) / 255  # noqa: E731
        fused, d, b = load(tmp_path / "a" / p.name), load(tmp_path / "a" / "detail" / p.name), load(tmp_path / "a" / "body" / p.name)
        assert fused.shape == (80, 80)
        assert np.abs(fused - np.clip(d + b, 0, 1)).max() <= 1 / 255 + 1e-12


def test_infer_rejects_mismatched_config(b7_checkpoint, corpus, tmp_path):
    other = NetConfig(**{**TINY_NET, "widths": (8, 8, 16, 32)})
    with pytest.raises(CheckpointMismatch, match="does not match checkpoint hash"):
        infer(b7_checkpoint, corpus / "test" / "images", tmp_path, expected=other)


def test_infer_attention_dump(b7_checkpoint, corpus, tmp_path):
    infer(b7_checkpoint, corpus / "test" / "images", tmp_path, dump_attention=True)
    dumps = list((tmp_path / "attention").rglob("*.png"))
    assert len(dumps) == 4 * (3 * 3 + 3 * 6)


def test_cli_generate_decompose_eval_plot(tmp_path, capsys):
    root = tmp_path / "syn"
    assert main(["generate", str(root), "--n", "5", "--canvas", "64", "--seed", "1"]) == 0
    assert len(list((root / "images").glob("*.png"))) == 5
    assert main(["decompose", str(root / "masks"), "--body"]) == 0
    detail_dir, body_dir = root / "masks_detail", root / "masks_body"
    for m in sorted((root / "masks").glob("*.png")):
        g = (np.asarray(Image.open(m)) >= 128).astype(int)
        d = np.asarray(Image.open(detail_dir / m.name)).astype(int)
        b = np.asarray(Image.open(body_dir / m.name)).astype(int)
        assert np.abs(d + b - 255 * g).max() <= 1
        assert np.all(d[g == 0] == 0)

    report, curves = tmp_path / "r.json", tmp_path / "c.csv"
    code = main(["eval", "--pred", str(root / "masks"), "--gt", str(root / "masks"),
                 "--out", str(report), "--curves", str(curves)])
    assert code == 0
    rep = json.loads(report.read_text())
    assert rep["mae"] == 0 and rep["weighted_f"] == pytest.approx(1.0)
    with open(curves) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["threshold", "precision", "recall", "f_beta"] and len(rows) == 256

    Image.fromarray(np.zeros((64, 64), np.uint8)).save(detail_dir / "extra.png")
    assert main(["eval", "--pred", str(detail_dir), "--gt", str(root / "masks")]) == 1

    assert main(["plot", str(curves), str(curves), "--labels", "a,b", "--out", str(tmp_path / "fig")]) == 0
    assert (tmp_path / "fig_pr.png").stat().st_size > 0 and (tmp_path / "fig_f.png").exists()


def test_cli_train_infer_and_ablate(corpus, tmp_path, capsys):
    cfg = tmp_path / "tiny.yaml"
    cfg.write_text(json.dumps({"epochs": 1, "batch_size": 5, "input_size": 64, "net": TINY_NET}))
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--data", str(corpus / "train"), "--test", str(corpus / "test"),
                 "--out", str(out), "--preset", "B3"]) == 0
    run = json.loads((out / "run.json").read_text())
    assert run["config"]["preset"] == "B3" and len(run["content_hash"]) == 40
    assert set(run["metrics"]) >= {"mae", "mean_f", "weighted_f"}
    assert (out / "final.pt").exists() and (out / "train_log.jsonl").read_text().count("\n") == 2

    assert main(["infer", str(out / "final.pt"), str(corpus / "test" / "images"), "--out", str(tmp_path / "pred"),
                 "--dump", "detail,body"]) == 0
    assert len(list((tmp_path / "pred").glob("*.png"))) == 4

    abl = tmp_path / "abl"
    assert main(["ablate", "--config", str(cfg), "--data", str(corpus / "train"), "--test", str(corpus / "test"),
                 "--out", str(abl), "--presets", "B1,B2"]) == 0
    table = (abl / "ablation.md").read_text()
    assert "| B1 |" in table and "| B2 |" in table
    with open(abl / "ablation.csv") as fh:
        assert [r["preset"] for r in csv.DictReader(fh)] == ["B1", "B2"]
