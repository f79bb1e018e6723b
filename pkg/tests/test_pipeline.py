import csv
import json
import math

import numpy as np
import pytest
import torch
from scipy.stats import spearmanr

from rgdeblur.alignment import FlowProvider, PairKey, SyntheticGTFlow
from rgdeblur.cli import main as cli_main
from rgdeblur.datagen import DatasetManifest, write_synthetic_dataset
from rgdeblur.imagecore import psnr, read_image
from rgdeblur.pipeline import (
    NonFiniteLossError,
    compute_losses,
    evaluate,
    infer,
    init_state,
    load_checkpoint,
    load_config,
    lr_at,
    make_config,
    save_checkpoint,
    train,
    train_step,
    write_report,
)
from rgdeblur.pipeline.config import parse_override
from rgdeblur.pipeline.train import read_manifest

SMALL = dict(backbone_widths=(8, 16), trunk_width=8, trunk_blocks=1, m=4, heads=2, sampling_points=2,
             crop_size=32, learning_rate=1e-3)


class RecordingFlow(FlowProvider):
    """Zero flow; remembers the (src, dst) tensors of every call."""

    def __init__(self):
        self.calls = []

    def __call__(self, src, dst, *, pair=None, reverse=False):
        self.calls.append((src.detach().clone(), dst.detach().clone(), reverse))
        return src.new_zeros(src.shape[0], 2, *src.shape[-2:])


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    man = write_synthetic_dataset(root, 3, seed=7, size=32, m=4, shift=(2.0, 0.0))
    return root, man


def batch(man, i=0):
    return {k: v[None] for k, v in man.load_pair(man.pairs[i]).items()}


def small_config(**kw):
    return make_config("desk", "full", **{**SMALL, "total_epochs": 4, "warmup_epochs": 1, **kw})


def run_steps(state, data, provider, n):
    return [train_step(state, data["blurry"], data["sharp"], provider, PairKey("train_0000"))[1] for _ in range(n)]


def test_config_defaults():
    cfg = make_config("paper")
    assert (cfg.alpha, cfg.beta, cfg.epsilon, cfg.lam) == (0.5, 0.5, 1e-3, 0.35)
    assert (cfg.m, cfg.warmup_epochs, cfg.heads, cfg.sampling_points) == (8, 15, 5, 4)
    assert (cfg.learning_rate, cfg.halving_period, cfg.total_epochs, cfg.batch_size) == (2e-5, 60, 200, 1)
    assert cfg.adam_betas == (0.9, 0.999) and cfg.adam_eps == 1e-8
    desk = make_config("desk")
    assert desk.crop_size == 64 and desk.total_epochs == 30


def test_config_validation():
    with pytest.raises(ValueError):
        make_config("paper", warmup_epochs=20, total_epochs=20)
    with pytest.raises(ValueError):
        make_config("paper", batch_size=4)
    with pytest.raises(ValueError):
        make_config("paper", alpha=-1.0)
    with pytest.raises(KeyError):
        make_config("paper", not_a_field=1)


def test_toml_and_overrides(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('profile = "desk"\nvariant = "no-mask"\nalpha = 0.25\nbackbone_widths = [4, 8]\n', "utf-8")
    cfg = load_config(p, beta=0.0)
    assert (cfg.alpha, cfg.beta, cfg.use_mask, cfg.backbone_widths, cfg.crop_size) == (0.25, 0.0, False, (4, 8), 64)
    assert parse_override("use-mask=false") == ("use_mask", False)
    assert parse_override("flow_provider=synthetic-gt") == ("flow_provider", "synthetic-gt")
    assert parse_override("learning_rate=1e-4") == ("learning_rate", 1e-4)


def test_learning_rate_halving():
    cfg = make_config("paper")
    assert lr_at(0, cfg) == 2e-5 and lr_at(59, cfg) == 2e-5 and lr_at(60, cfg) == 1e-5
    assert lr_at(130, cfg) == 2e-5 / 4


def test_total_is_weighted_sum(small_data):
    _, man = small_data
    state = init_state(small_config(alpha=0.3, beta=0.7))
    for row in run_steps(state, batch(man), RecordingFlow(), 3):
        assert row["total"] == pytest.approx(row["L_D"] + 0.3 * row["L_R"] + 0.7 * row["L_P"], rel=1e-6)


def test_zero_weights_reduce_to_deblur_gradient(small_data):
    _, man = small_data
    data = batch(man)
    state = init_state(small_config(alpha=0.0, beta=0.0))
    total, parts = compute_losses(state, data["blurry"], data["sharp"], RecordingFlow())
    assert parts["L_R"].item() > 0 and parts["L_P"].item() > 0
    g_total = torch.autograd.grad(total, list(state.deblur.parameters()), allow_unused=True, retain_graph=True)
    g_d = torch.autograd.grad(parts["L_D"], list(state.deblur.parameters()), allow_unused=True, retain_graph=True)
    for a, b in zip(g_total, g_d):
        assert (a is None and b is None) or torch.equal(a, b)
    g_r = torch.autograd.grad(total, list(state.reblur.parameters()), allow_unused=True)
    assert all(g is None or g.abs().sum() == 0 for g in g_r)


def test_no_reblur_leaves_r_untouched(small_data):
    _, man = small_data
    data = batch(man)
    state = init_state(small_config(use_reblur=False))
    total, parts = compute_losses(state, data["blurry"], data["sharp"], RecordingFlow())
    assert parts["L_R"].item() == 0 and parts["L_P"].item() == 0
    total.backward()
    assert all(p.grad is None or p.grad.abs().sum() == 0 for p in state.reblur.parameters())


def test_determinism_ten_steps(small_data):
    _, man = small_data
    runs = [run_steps(init_state(small_config()), batch(man), RecordingFlow(), 10) for _ in range(2)]
    assert runs[0] == runs[1]


def test_checkpoint_resume_matches(tmp_path, small_data):
    root, man = small_data
    data = batch(man)
    provider = SyntheticGTFlow(root)
    state = init_state(small_config())
    run_steps(state, data, provider, 2)
    save_checkpoint(state, tmp_path / "ck.zip")
    straight = run_steps(state, data, provider, 3)
    resumed = run_steps(load_checkpoint(tmp_path / "ck.zip"), data, provider, 3)
    for a, b in zip(straight, resumed):
        for key in ("L_D", "L_R", "L_P", "total"):
            assert abs(a[key] - b[key]) <= 1e-10
    meta = read_manifest(tmp_path / "ck.zip")
    assert meta["m"] == 4 and meta["widths"]["backbone"] == [8, 16] and "version" in meta
    assert meta["parameters"]["deblur.fusion.out"] == [2, 3, 9]


def test_warmup_switches_reference(small_data):
    _, man = small_data
    data = batch(man)
    state = init_state(small_config(total_epochs=10, warmup_epochs=3))
    for epoch, expect_blurry in [(0, True), (2, True), (3, False), (7, False)]:
        state.epoch = epoch
        probe = RecordingFlow()
        train_step(state, data["blurry"], data["sharp"], probe)
        (s0, d0, _), (s1, d1, _) = probe.calls
        assert torch.equal(s0, data["sharp"]) and torch.equal(d1, data["sharp"])
        assert torch.equal(d0, data["blurry"]) == expect_blurry
        assert torch.equal(s1, d0)


def test_zero_epochs_writes_one_checkpoint(tmp_path, small_data):
    _, man = small_data
    cfg = small_config(total_epochs=0, warmup_epochs=0)
    state = train(cfg, man, tmp_path)
    assert state.epoch == 0 and state.step == 0
    assert [p.name for p in tmp_path.iterdir() if p.suffix == ".zip"] == ["checkpoint.zip"]


def test_train_loop_writes_log(tmp_path, small_data):
    root, man = small_data
    cfg = small_config(total_epochs=2, warmup_epochs=1, flow_provider="synthetic-gt", flow_root=str(root))
    state = train(cfg, man, tmp_path)
    assert state.epoch == 2 and state.step == 6
    with open(tmp_path / "loss_log.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["epoch", "step", "L_D", "L_R", "L_P", "total", "lr"]
    assert len(rows) == 6
    with pytest.raises(ValueError):
        train(cfg, DatasetManifest(root=str(root)))


def test_nonfinite_loss_aborts_with_dump(tmp_path, small_data):
    _, man = small_data
    data = batch(man)
    state = init_state(small_config())
    bad = data["blurry"].clone()
    bad[..., 0, 0] = float("nan")
    with pytest.raises(NonFiniteLossError) as err:
        train_step(state, bad, data["sharp"], RecordingFlow(), PairKey("x"), dump_dir=tmp_path)
    dump = json.loads((tmp_path / "nonfinite_dump.json").read_text())
    assert dump["pair"] == "x" and not math.isfinite(err.value.breakdown["total"])


def test_identity_model_evaluation_baseline(tmp_path):
    man = write_synthetic_dataset(tmp_path, 3, seed=1, size=32, m=4, max_shift=0.0)
    state = init_state(small_config(backbone="identity"))
    report = evaluate(state, man, SyntheticGTFlow(tmp_path))
    for row, entry in zip(report["pairs"], man.pairs):
        d = man.load_pair(entry)
        assert abs(row["psnr_warped"] - psnr(d["blurry"], d["sharp"])) < 0.1
    json_path, csv_path = write_report(report, tmp_path / "rep")
    assert json.loads(json_path.read_text())["count"] == 3 and csv_path.exists()


def test_empty_manifest_and_missing_files(tmp_path, small_data):
    root, man = small_data
    state = init_state(small_config())
    empty = evaluate(state, DatasetManifest(root=str(tmp_path)), SyntheticGTFlow(root))
    assert empty["count"] == 0 and empty["pairs"] == []
    write_report(empty, tmp_path / "empty")
    broken = DatasetManifest(root=str(tmp_path), pairs=[man.pairs[0]])
    report = evaluate(state, broken, SyntheticGTFlow(root))
    assert report["count"] == 0 and report["skipped"][0]["stem"] == man.pairs[0].stem


class Untouchable(torch.nn.Module):
    def __getattr__(self, name):
        raise AssertionError(f"inference read reblur attribute {name!r}")


def test_infer_never_reads_reblur_networks(small_data):
    _, man = small_data
    state = init_state(small_config())
    state.reblur = Untouchable()
    out, bmap, preview = infer(state, batch(man)["blurry"][0])
    assert out.shape == (3, 32, 32) and bmap.shape == (9, 32, 32)
    assert preview.shape == (1, 32, 32)
    assert preview.min().item() >= 0 and preview.max().item() <= 1


def test_preview_without_fusion(small_data):
    _, man = small_data
    state = init_state(small_config(use_fusion=False, use_pseudo_loss=False))
    _, bmap, preview = infer(state, batch(man)["blurry"])
    assert bmap is None and preview.shape == (1, 1, 32, 32)


def test_cli_round_trip(tmp_path, capsys):
    ds = tmp_path / "ds"
    assert cli_main(["synth", "--out", str(ds), "--count", "2", "--size", "32", "--m", "4", "--shift", "2", "0"]) == 0
    run = tmp_path / "run"
    cli_main(["train", "--manifest", str(ds / "manifest.jsonl"), "--run-dir", str(run),
              "--set", "total_epochs=1", "--set", "warmup_epochs=0", "--set", "m=4", "--set", "crop_size=32",
              "--set", "backbone_widths=[8, 16]", "--set", "trunk_width=8",
              "--set", "flow_provider=synthetic-gt", "--set", f"flow_root={ds}"])
    ck = run / "checkpoint.zip"
    cli_main(["eval", "--checkpoint", str(ck), "--manifest", str(ds / "manifest.jsonl"),
              "--flow", "synthetic-gt", "--flow-root", str(ds), "--out", str(tmp_path / "rep")])
    assert json.loads((tmp_path / "rep.json").read_text())["count"] == 2
    cli_main(["infer", "--checkpoint", str(ck), "--image", str(ds / "blurry" / "train_0000.png"),
              "--out", str(tmp_path / "o.png"), "--blurmap-out", str(tmp_path / "b.png")])
    assert read_image(tmp_path / "o.png").shape == (3, 32, 32)
    assert read_image(tmp_path / "b.png").shape == (1, 32, 32)
    cli_main(["reblur", "--image", str(ds / "aligned" / "train_0000.png"), "--seeds", str(ds / "gt" / "train_0000.npz"),
              "--out", str(tmp_path / "r.png"), "--bits", "16"])
    assert psnr(read_image(tmp_path / "r.png"), read_image(ds / "blurry" / "train_0000.png")) > 80
    cli_main(["kernel-viz", "--seed", "0,0", "--out", str(tmp_path / "k.png"), "--scale", "1"])
    k = read_image(tmp_path / "k.png")[0]
    assert torch.equal(k > 0, torch.tensor([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=torch.bool))


# --------------------------------------------------------------------------- #
# Properties of a trained desk-scale model
# --------------------------------------------------------------------------- #


@pytest.mark.slow
def test_desk_total_loss_decreases(desk_runs):
    log = desk_runs["full"]["state"].log
    assert log[-1]["total"] < log[0]["total"]


@pytest.mark.slow
def test_warped_metrics_dominate_unwarped(desk_runs, desk_dataset):
    state = desk_runs["full"]["state"]
    report = evaluate(state, desk_dataset, SyntheticGTFlow(desk_dataset.root))
    wins = sum(r["psnr_warped"] >= r["psnr_unwarped"] for r in report["pairs"])
    assert wins >= 0.8 * report["count"]


@pytest.mark.slow
def test_blurmap_preview_tracks_blur_field(desk_runs, desk_dataset):
    state = desk_runs["full"]["state"]
    corrs = []
    for entry in desk_dataset.pairs:
        data = desk_dataset.load_pair(entry)
        _, _, preview = infer(state, data["blurry"])
        field = np.load(f"{desk_dataset.root}/gt/{entry.stem}.npz")["blur_field"]
        corrs.append(spearmanr(preview[0].numpy().ravel(), field.ravel())[0])
    print("per-pair rank correlation:", np.round(corrs, 2).tolist())
    assert np.mean(corrs) > 0.3
