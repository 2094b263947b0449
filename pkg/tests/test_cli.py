import json
import stat

import numpy as np
import pytest
from PIL import Image

from evit.cli import load_config, main
from evit.jpeg import decode_jpeg, encode_jpeg

KEY = "11" * 32


@pytest.fixture
def corpus(tmp_path):
    from synth_images import write_corpus

    return write_corpus(tmp_path / "plain")


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "desk.cfg"
    path.write_text(
        "# tiny model for tests\n"
        "model.L = 1\nmodel.D = 8\nmodel.h = 2\nmodel.d_h = 8\n"
        "train.batch_size = 2\ntrain.queue_size = 4\ntrain.total_epochs = 2\ntrain.warmup_epochs = 1\n"
        "train.sup_batch_size = 4\ntrain.sup_epochs = 2\ntrain.lr_peak = 0.01\n"
        "augment.n_swaps = 1\n"
    )
    return path


def run(*argv):
    return main([str(a) for a in argv])


def test_load_config_formats(tmp_path, config):
    cfg = load_config(config)
    assert cfg["model"] == {"L": 1, "D": 8, "h": 2, "d_h": 8} and cfg["augment"] == {"n_swaps": 1}
    j = tmp_path / "c.json"
    j.write_text(json.dumps({"train": {"tau": 0.2}}))
    assert load_config(j) == {"train": {"tau": 0.2}}


def test_pipeline(tmp_path, corpus, config, capsys):
    t = tmp_path
    assert run("encrypt", "--in", corpus, "--out", t / "cipher", "--master-key", KEY) == 0
    keys = t / "cipher" / "keys.json"
    assert stat.S_IMODE(keys.stat().st_mode) == 0o600
    assert len(json.loads(keys.read_text())) == 8

    assert run("decrypt", "--in", t / "cipher", "--out", t / "dec", "--keys", keys) == 0
    original = np.asarray(Image.open(corpus / "a" / "0.png").convert("RGB"))
    assert (t / "dec" / "a" / "0.jpg").read_bytes() == encode_jpeg(original)
    assert run("decrypt", "--in", t / "cipher", "--out", t / "png", "--keys", keys, "--format", "png") == 0
    assert np.array_equal(np.asarray(Image.open(t / "png" / "a" / "0.png")), decode_jpeg(encode_jpeg(original)))

    assert run("extract", "--in", t / "cipher", "--out", t / "f.evft") == 0
    assert run("split", "--in", corpus, "--out", t / "m.json", "--fraction", "0.5", "--seed", 1) == 0
    assert run("train-unsup", "--features", t / "f.evft", "--out", t / "u", "--manifest", t / "m.json",
               "--config", config) == 0
    assert run("train-sup", "--features", t / "f.evft", "--manifest", t / "m.json", "--out", t / "s",
               "--init", t / "u" / "unsup.evck", "--config", config) == 0
    assert json.loads((t / "s" / "classes.json").read_text()) == ["a", "b"]

    assert run("index", "--checkpoint", t / "s" / "sup.evck", "--in", t / "cipher", "--out", t / "i1.evix") == 0
    assert run("index", "--checkpoint", t / "s" / "sup.evck", "--features", t / "f.evft", "--out", t / "i2.evix") == 0
    assert (t / "i1.evix").read_bytes() == (t / "i2.evix").read_bytes()

    capsys.readouterr()
    assert run("search", "--query", t / "cipher" / "a" / "1.jpg", "--index", t / "i1.evix",
               "--checkpoint", t / "s" / "sup.evck", "--k", 3, "--query-id", "a/1") == 0
    out = json.loads(capsys.readouterr().out)
    assert len(out["results"]) == 3 and "a/1" not in [r[0] for r in out["results"]]

    assert run("eval-map", "--index", t / "i1.evix", "--manifest", t / "m.json", "--k", 5,
               "--csv", t / "ap.csv", "--json", t / "map.json") == 0
    assert 0.0 <= json.loads((t / "map.json").read_text())["map"] <= 1.0
    assert len((t / "ap.csv").read_text().splitlines()) == 9

    assert run("eval-crypto", "--plain", corpus, "--cipher", t / "cipher", "--trials", 2,
               "--master-key", KEY, "--out", t / "crypto.json") == 0
    rep = json.loads((t / "crypto.json").read_text())
    assert rep["psnr_mean"] < 30 and rep["npcr_percent"] > 0


def test_exit_codes(tmp_path, corpus, capsys):
    t = tmp_path
    # validation errors: no master key, then a malformed one
    assert run("encrypt", "--in", corpus, "--out", t / "c") == 2
    assert run("encrypt", "--in", corpus, "--out", t / "c", "--master-key", "zz") == 2
    # IO and format errors
    assert run("extract", "--in", t / "nowhere", "--out", t / "f.evft") == 3
    (t / "bad.evft").write_bytes(b"junk")
    assert run("train-unsup", "--features", t / "bad.evft", "--out", t / "u") == 3
    (t / "bad.evck").write_bytes(b"junk")
    assert run("index", "--checkpoint", t / "bad.evck", "--in", corpus, "--out", t / "i.evix") == 3
    err = capsys.readouterr().err
    assert "bad magic" in err


def test_search_refuses_foreign_index(tmp_path, corpus, config):
    t = tmp_path
    run("encrypt", "--in", corpus, "--out", t / "cipher", "--master-key", KEY)
    run("extract", "--in", t / "cipher", "--out", t / "f.evft")
    run("train-unsup", "--features", t / "f.evft", "--out", t / "u1", "--config", config, "--seed", 1)
    run("train-unsup", "--features", t / "f.evft", "--out", t / "u2", "--config", config, "--seed", 2)
    run("index", "--checkpoint", t / "u1" / "unsup.evck", "--features", t / "f.evft", "--out", t / "i.evix")
    code = run("search", "--query", t / "cipher" / "a" / "0.jpg", "--index", t / "i.evix",
               "--checkpoint", t / "u2" / "unsup.evck")
    assert code == 2
