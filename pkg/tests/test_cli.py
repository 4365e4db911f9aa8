import numpy as np
import pytest

from mmim.checkpoint import load_checkpoint
from mmim.cli import main
from mmim.data import load_image, read_manifest, save_image
from mmim.mim import forward
from mmim.vit import patchify, unpatchify
from mmim.train import model_from_checkpoint, read_log

TINY = ["--set", "model.depth=1", "--set", "model.heads=2", "--set", "model.width=16",
        "--set", "model.patch_size=4", "--set", "model.decoder_depth=1", "--set", "model.decoder_width=16",
        "--set", "model.decoder_heads=2", "--set", "model.image_size=16", "--set", "train.checkpoint_every=100"]
EVAL = ["--set", "eval.steps=20", "--set", "eval.batch_size=8", "--set", "eval.warmup_steps=2"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def parse_tsv(text):
    lines = [l.split("\t") for l in text.strip().splitlines()]
    return lines[0], lines[1:]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["generate-data", "--out", str(root / "data"), "--num-patients", "10", "--image-size", "16",
                 "--visits", "2", "--seed", "4", "--set", "model.patch_size=4"]) == 0
    manifest = root / "data" / "manifest.jsonl"
    for mods in ("oct", "oct,ir"):
        tag = mods.replace(",", "_")
        assert main(["pretrain", "--manifest", str(manifest), "--run-dir", str(root / tag), "--modalities", mods,
                     "--steps", "200", "--batch-size", "8", "--peak-lr", "1e-3", *TINY]) == 0
    return root, manifest


def test_generate_data_output(tmp_path, capsys):
    code, out, _ = run(capsys, "generate-data", "--out", tmp_path, "--num-patients", "2", "--image-size", "16",
                       "--set", "model.patch_size=4")
    assert code == 0
    assert dict(l.split("\t") for l in out.strip().splitlines())["records"] == "8"
    assert len(read_manifest(tmp_path / "manifest.jsonl")) == 8


def test_pretrain_outputs_and_loss_falls(workspace):
    root, _ = workspace
    for tag in ("oct", "oct_ir"):
        rows = read_log(root / tag / "loss_log.tsv")
        assert len(rows) == 200
        assert np.mean([r["loss"] for r in rows[-20:]]) < np.mean([r["loss"] for r in rows[:20]])
        for name in ("config.ini", "last.ckpt", "loss_curve.png", "checkpoints/step_000200.ckpt"):
            assert (root / tag / name).exists(), name
        assert not (root / tag / ".lock").exists()
    assert all(r["loss_ir"] is not None for r in read_log(root / "oct_ir" / "loss_log.tsv"))


def test_pretrain_summary_and_determinism(workspace, tmp_path, capsys):
    root, manifest = workspace
    code, out, _ = run(capsys, "pretrain", "--manifest", manifest, "--run-dir", tmp_path / "again",
                       "--steps", "200", "--batch-size", "8", "--peak-lr", "1e-3", *TINY)
    assert code == 0
    summary = dict(l.split("\t") for l in out.strip().splitlines())
    assert summary["steps"] == "200" and float(summary["final_loss"]) < float(summary["initial_loss"])
    assert (tmp_path / "again" / "loss_log.tsv").read_bytes() == (root / "oct" / "loss_log.tsv").read_bytes()


def test_pretrain_resume_matches_straight_run(workspace, tmp_path, capsys):
    root, manifest = workspace
    common = ["--manifest", manifest, "--batch-size", "8", "--peak-lr", "1e-3", *TINY]
    assert run(capsys, "pretrain", "--run-dir", tmp_path / "r", "--steps", "200",
               "--set", "train.steps=100", *common)[0] == 0
    ck = tmp_path / "r" / "last.ckpt"
    code, _, _ = run(capsys, "pretrain", "--run-dir", tmp_path / "r", "--steps", "200", "--resume", ck, *common)
    assert code == 0
    assert (tmp_path / "r" / "loss_log.tsv").read_bytes() == (root / "oct" / "loss_log.tsv").read_bytes()


def test_pretrain_refuses_existing_log(workspace, capsys):
    root, manifest = workspace
    code, _, err = run(capsys, "pretrain", "--manifest", manifest, "--run-dir", root / "oct", "--steps", "2", *TINY)
    assert code == 2 and "already exists" in err


def test_separate_decoders_need_two_modalities(workspace, tmp_path, capsys):
    _, manifest = workspace
    code, _, err = run(capsys, "pretrain", "--manifest", manifest, "--run-dir", tmp_path, "--modalities", "oct",
                       "--decoder-mode", "separate", *TINY)
    assert code == 2 and "needs two modalities" in err


def test_bad_override_is_reported(tmp_path, capsys):
    code, _, err = run(capsys, "pretrain", "--run-dir", tmp_path, "--set", "model.nope=1")
    assert code == 2 and "unknown keys" in err


@pytest.mark.parametrize("cmd", ["probe", "finetune"])
def test_adapt_reports_three_seeds(workspace, tmp_path, capsys, cmd):
    root, manifest = workspace
    code, out, _ = run(capsys, cmd, "--checkpoint", root / "oct_ir" / "last.ckpt", "--manifest", manifest,
                       "--run-dir", tmp_path, *EVAL)
    assert code == 0
    header, rows = parse_tsv(out)
    assert header == ["scope", "metric", "mean", "std", "n_seeds"]
    assert {r[0] for r in rows} == {"seed=0", "seed=1", "seed=2", "aggregate"}
    agg = {r[1]: r for r in rows if r[0] == "aggregate"}
    assert {"accuracy", "mf1", "roc_auc", "pr_auc"} <= set(agg) and agg["accuracy"][4] == "3"
    mode = "linear_probe" if cmd == "probe" else "finetune"
    assert (tmp_path / f"{mode}_report.tsv").read_text() == out
    assert (tmp_path / f"{mode}_metrics.png").exists()
    assert all((tmp_path / f"{mode}_seed{s}.ckpt").exists() for s in range(3))


def test_eval_with_missing_modality(workspace, tmp_path, capsys):
    root, manifest = workspace
    assert run(capsys, "probe", "--checkpoint", root / "oct_ir" / "last.ckpt", "--manifest", manifest,
               "--run-dir", tmp_path, *EVAL)[0] == 0
    heads = [tmp_path / f"linear_probe_seed{s}.ckpt" for s in range(3)]
    code, out, _ = run(capsys, "eval", "--checkpoint", *heads, "--manifest", manifest, "--modalities", "oct",
                       "--run-dir", tmp_path / "eval")
    assert code == 0
    _, rows = parse_tsv(out)
    assert any(r[0] == "aggregate" and r[1] == "accuracy" for r in rows)
    code, _, err = run(capsys, "probe", "--checkpoint", root / "oct" / "last.ckpt", "--manifest", manifest,
                       "--modalities", "ir", "--run-dir", tmp_path / "bad", *EVAL)
    assert code == 2 and "not available" in err


def test_eval_rejects_unseen_modality(workspace, tmp_path, capsys):
    root, manifest = workspace
    assert run(capsys, "probe", "--checkpoint", root / "oct" / "last.ckpt", "--manifest", manifest,
               "--run-dir", tmp_path, "--set", "eval.seeds=0", *EVAL)[0] == 0
    code, _, err = run(capsys, "eval", "--checkpoint", tmp_path / "linear_probe_seed0.ckpt", "--manifest",
                       manifest, "--modalities", "oct,ir", "--run-dir", tmp_path / "e")
    assert code == 2 and "cannot evaluate" in err


def test_reconstruct_rho_zero_shows_prediction(workspace, tmp_path, capsys):
    root, manifest = workspace
    code, out, _ = run(capsys, "reconstruct", "--checkpoint", root / "oct_ir" / "last.ckpt", "--manifest",
                       manifest, "--limit", "2", "--rho", "0", "--out-dir", tmp_path)
    assert code == 0
    arrays = np.load(tmp_path / "reconstructions.npz")
    assert np.array_equal(arrays["oct_masked"], arrays["oct_original"])
    assert not arrays["oct_mask"].any()
    model = model_from_checkpoint(load_checkpoint(root / "oct_ir" / "last.ckpt"))
    ref = forward(model, [arrays["oct_original"], arrays["ir_original"]], [0.0, 0.0], seed=0)
    grid = model.config.grid(0)
    raw = unpatchify(ref.predictions[0].data, grid)
    assert np.allclose(arrays["oct_recon"], raw, atol=1e-12)
    for name in ("000_oct_original.png", "001_ir_recon.png", "reconstructions.png", "reconstruction_mse.tsv"):
        assert (tmp_path / name).exists()
    header, rows = parse_tsv(out)
    assert header == ["index", "modality", "rho", "masked_mse"] and len(rows) == 4


def test_reconstruct_is_deterministic_and_training_helps(workspace, tmp_path, capsys):
    root, manifest = workspace
    outs = []
    for name in ("a", "b"):
        code, out, _ = run(capsys, "reconstruct", "--checkpoint", root / "oct" / "last.ckpt", "--manifest",
                           manifest, "--limit", "3", "--out-dir", tmp_path / name)
        assert code == 0
        outs.append(out)
    assert outs[0] == outs[1]
    assert (tmp_path / "a" / "000_oct_recon.png").read_bytes() == (tmp_path / "b" / "000_oct_recon.png").read_bytes()
    arrays = np.load(tmp_path / "a" / "reconstructions.npz")
    x = arrays["oct_original"]
    vis = ~arrays["oct_mask"]
    assert np.array_equal(patchify(arrays["oct_recon"], 4)[vis], patchify(x, 4)[vis])
    assert run(capsys, "pretrain", "--manifest", manifest, "--run-dir", tmp_path / "untrained", "--steps", "1",
               "--peak-lr", "1e-12", *TINY)[0] == 0
    trained = parse_tsv(outs[0])[1]
    code, out, _ = run(capsys, "reconstruct", "--checkpoint", tmp_path / "untrained" / "last.ckpt", "--manifest",
                       manifest, "--limit", "3", "--out-dir", tmp_path / "u")
    untrained = parse_tsv(out)[1]
    assert np.mean([float(r[3]) for r in untrained]) > np.mean([float(r[3]) for r in trained])


def test_reconstruct_rejects_bad_size(workspace, tmp_path, capsys):
    root, _ = workspace
    save_image(tmp_path / "odd.png", np.zeros((15, 16)))
    code, _, err = run(capsys, "reconstruct", "--checkpoint", root / "oct" / "last.ckpt", "--image",
                       tmp_path / "odd.png", "--out-dir", tmp_path / "o")
    assert code == 2 and "not divisible by patch size" in err
    save_image(tmp_path / "big.png", np.zeros((32, 32)))
    code, _, err = run(capsys, "reconstruct", "--checkpoint", root / "oct" / "last.ckpt", "--image",
                       tmp_path / "big.png", "--out-dir", tmp_path / "o")
    assert code == 2 and "does not match" in err
    assert load_image(tmp_path / "big.png").shape == (1, 32, 32)


def test_reconstruct_raw_predictions_flag(workspace, tmp_path, capsys):
    root, manifest = workspace
    ck = root / "oct" / "last.ckpt"
    for name, extra in (("pasted", []), ("raw", ["--raw-predictions"])):
        assert run(capsys, "reconstruct", "--checkpoint", ck, "--manifest", manifest, "--limit", "1",
                   "--out-dir", tmp_path / name, *extra)[0] == 0
    pasted, raw = np.load(tmp_path / "pasted" / "reconstructions.npz"), np.load(tmp_path / "raw" / "reconstructions.npz")
    vis = ~pasted["oct_mask"]
    assert np.array_equal(pasted["oct_mask"], raw["oct_mask"])
    assert not np.array_equal(patchify(raw["oct_recon"], 4)[vis], patchify(pasted["oct_recon"], 4)[vis])
    assert np.array_equal(patchify(raw["oct_recon"], 4)[~vis], patchify(pasted["oct_recon"], 4)[~vis])
