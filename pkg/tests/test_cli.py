import json

import numpy as np
import pytest

from gesfi import cli, core, evaluation, latent, pipeline, synth


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    doms = [synth.DomainFactor(i, rotation_rad=0.3 * i, factors={"orientation": str(i + 1)}) for i in range(5)]
    spec = synth.ScenarioSpec([synth.GestureProfile("push", "push-pull"), synth.GestureProfile("slide", "slide")],
                              doms, reps=2, noise_sigma=0.02, seed=2)
    ds, _ = synth.generate(spec)
    return core.write_manifest(ds, root / "manifest.json")


def _run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_ingest_summary(manifest, tmp_path, capsys):
    code, out, _ = _run(capsys, "ingest", manifest, "--out", tmp_path)
    assert code == 0
    assert "records: 20" in out and "orientation: 5 (1, 2, 3, 4, 5)" in out
    report = json.loads((tmp_path / "ingest" / "report.json").read_text())
    assert report["seed"] == 0 and report["inputs"]["manifest"] == cli.manifest_hash(manifest)
    assert len(core.load_manifest(tmp_path / "ingest" / "manifest.json")) == 20


def test_ingest_errors(manifest, tmp_path, capsys):
    empty = tmp_path / "empty.json"
    empty.write_text(json.dumps({"label_set": ["a"], "records": []}))
    code, _, err = _run(capsys, "ingest", empty, "--out", tmp_path)
    assert code == 2 and "no records" in err

    doc = json.loads(manifest.read_text())
    broken = tmp_path / "broken"
    broken.mkdir()
    for e in doc["records"][:2]:
        (broken / e["file"]).parent.mkdir(exist_ok=True)
        (broken / e["file"]).write_bytes((manifest.parent / e["file"]).read_bytes())
    (broken / doc["records"][1]["file"]).write_bytes(b"CSIR")
    doc["records"] = doc["records"][:2]
    (broken / "m.json").write_text(json.dumps(doc))
    code, _, err = _run(capsys, "ingest", broken / "m.json", "--out", tmp_path)
    assert code == 2 and doc["records"][1]["id"] in err


def test_preprocess_cache_hits(manifest, tmp_path, capsys):
    code, out, _ = _run(capsys, "preprocess", manifest, "--out", tmp_path, "--workers", 2)
    assert code == 0 and out.count("rendered ") == 20
    code, out, _ = _run(capsys, "preprocess", manifest, "--out", tmp_path)
    assert code == 0 and out.count("cache hit ") == 20 and "rendered g" not in out
    code, out, _ = _run(capsys, "preprocess", manifest, "--out", tmp_path, "--window", 128)
    assert code == 0 and out.count("rendered ") == 20


def test_preprocess_strict(manifest, tmp_path, capsys):
    ds = core.load_manifest(manifest)
    rec = ds.records[0]
    data = rec.data.copy()
    data[1, 3] = 0  # dead subcarrier: antenna scoring fails
    bad = core.CsiRecord(data, rec.sample_rate_hz, rec.carrier_wavelength_m, rec.meta, record_id="dead")
    path = core.write_manifest(core.Dataset([bad] + ds.records[1:3], ds.label_set), tmp_path / "m.json")
    code, out, _ = _run(capsys, "preprocess", path, "--out", tmp_path / "lax")
    assert code == 0 and "skipped dead" in out
    code, _, err = _run(capsys, "preprocess", path, "--out", tmp_path / "strict", "--strict")
    assert code == 2 and "error" in err


def test_env_var_output_root(manifest, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "envroot"))
    assert _run(capsys, "ingest", manifest)[0] == 0
    assert (tmp_path / "envroot" / "ingest" / "report.json").exists()


def test_train_eval_analyze(manifest, tmp_path, capsys):
    base = ("--source", manifest, "--hold-out", "orientation=3", "--out", tmp_path, "--epochs", 3, "--seed", 4)
    code, out, _ = _run(capsys, "train", *base)
    assert code == 0 and "target accuracy" in out
    first = (tmp_path / "train" / "losses.jsonl").read_text()
    assert len(first.splitlines()) == 3
    assert {"losses.png", "confusion.png", "model.pt", "report.json"} <= {p.name for p in (tmp_path / "train").iterdir()}
    report = json.loads((tmp_path / "train" / "report.json").read_text())
    assert report["seed"] == 4 and report["inputs"]["hold_out"] == "orientation=3"
    assert report["args"]["epochs"] == 3

    assert _run(capsys, "train", *base)[0] == 0
    assert (tmp_path / "train" / "losses.jsonl").read_text() == first

    ckpt = tmp_path / "train" / "model.pt"
    code, out, _ = _run(capsys, "eval", "--checkpoint", ckpt, "--target", manifest, "--out", tmp_path)
    assert code == 0 and "accuracy" in out

    code, out, _ = _run(capsys, "analyze-domains", "--checkpoint", ckpt, "--source", manifest, "--out", tmp_path)
    assert code == 0
    model, payload = latent.load_model(ckpt)
    images = pipeline.build_image_set(core.load_manifest(manifest), pipeline.DspConfig(**payload["dsp"]))
    cfg = latent.TrainConfig(**payload["config"])
    labels = latent.latent_domains(model, images.images, cfg).pseudo_labels
    expected = evaluation.composition_report(labels, images.metas, ["orientation"], cfg.K)
    assert expected.table() in out


@pytest.mark.parametrize("kind", evaluation.BASELINES)
def test_train_baselines(manifest, tmp_path, capsys, kind):
    code, out, _ = _run(capsys, "train", "--source", manifest, "--hold-out", "orientation=1", "--out", tmp_path,
                        "--epochs", 3, "--baseline", kind, "--domain-factor", "orientation", "--no-plots")
    assert code == 0 and kind in out
    model, _ = latent.load_model(tmp_path / "train" / "model.pt")
    assert model.num_classes == 2


def test_eval_needs_checkpoint(manifest, tmp_path, capsys):
    code, _, err = _run(capsys, "eval", "--target", manifest, "--out", tmp_path)
    assert code == 2 and "checkpoint" in err
    code, _, _ = _run(capsys, "eval", "--checkpoint", tmp_path / "none.pt", "--target", manifest)
    assert code == 2


def test_config_file_flags_win(manifest, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# archived run\nepochs = 3\nseed = 5\nno-plots = true\nlambda2=0.5\n")
    code, _, _ = _run(capsys, "train", "--config", cfg, "--seed", 6, "--source", manifest,
                      "--hold-out", "orientation=2", "--out", tmp_path)
    assert code == 0
    report = json.loads((tmp_path / "train" / "report.json").read_text())
    assert report["seed"] == 6 and report["config"]["epochs"] == 3 and report["config"]["lambda2"] == 0.5
    assert not (tmp_path / "train" / "losses.png").exists()
    cfg.write_text("colour = red\n")
    assert _run(capsys, "train", "--config", cfg, "--source", manifest)[0] == 2


def test_help_shows_training_defaults(capsys):
    code, out, _ = _run(capsys, "train", "--help")
    assert code == 0
    text = " ".join(out.split())
    for snippet in ("initial learning rate (Adam) (default: 0.002)", "total epochs (default: 50)",
                    "samples per step (default: 32)", "pre-learning epochs (default: 2)",
                    "epochs between learning-rate steps (default: 10)", "learning-rate factor per step (default: 0.1)",
                    "number of latent domains (default: 3)", "(default: cosine)"):
        assert snippet in text
    assert "default: None" not in text


def test_usage_and_internal_errors(capsys, monkeypatch, manifest, tmp_path):
    assert _run(capsys, "train", "--profile", "nope")[0] == 2
    assert _run(capsys)[0] == 2

    def boom(args):
        raise RuntimeError("bug")
    monkeypatch.setattr(cli, "cmd_ingest", boom)
    code, _, err = _run(capsys, "ingest", manifest, "--out", tmp_path)
    assert code == 1 and "RuntimeError" in err


def test_synth_command(tmp_path, capsys):
    code, out, _ = _run(capsys, "synth", "--profile", "semantic-conflict", "--seed", 2, "--out", tmp_path)
    assert code == 0 and "300 source and 150 target" in out
    ds = core.load_manifest(tmp_path / "synth" / "source.json")
    src, _, _ = synth.planted_benchmark("semantic-conflict", 2)
    assert np.array_equal(ds.records[0].data, src.records[0].data.astype(np.complex64))
