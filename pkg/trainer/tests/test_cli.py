import json
import shutil

import pytest

from frontflow_trainer.cli import main
from frontflow_trainer.formats import read_donw1

pytestmark = pytest.mark.skipif(shutil.which("frontflow") is None,
                                reason="simulator CLI not on PATH")


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_corpus")
    config = {
        "mesh": {"kind": "structured", "nx": 13, "ny": 13, "domain": [0.3, 0.3]},
        "prior": {"grid": [16, 16], "boundary_points": 16},
        "observation": {"times": {"count": 5, "t_max": 100.0}},
        "eki": {},
        "simulate": {"T": 110.0, "p_0": 0.0},
    }
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(config))
    out = root / "corpus"
    main(["build-corpus", "--config", str(cfg_path), "--n", "8", "--seed", "1",
          "--workers", "1", "--out", str(out)])
    return out


def test_train_and_stats_commands(tiny_corpus, tmp_path, capsys):
    model_dir = tmp_path / "model"
    main(["train", "--corpus", str(tiny_corpus), "--out", str(model_dir),
          "--epochs", "2", "--n-out", "8", "--grid", "16", "16", "--batch-size", "4",
          "--seed", "2"])
    out = capsys.readouterr().out
    info = json.loads(out.strip().splitlines()[-1])
    weights = info["weights"]
    config, tensors = read_donw1(weights)
    assert config["n_out"] == 8
    assert "trunk.encoder.weight" in tensors

    layout = tmp_path / "sensors.csv"
    with open(layout, "w") as fh:
        fh.write("sensor_id,x_m,y_m\n0,0.1,0.1\n1,0.2,0.2\n")
    ck = model_dir / "checkpoint_0002.pt"
    stats = tmp_path / "stats.does1"
    main(["error-stats", "--corpus", str(tiny_corpus), "--checkpoint", str(ck),
          "--sensors", str(layout), "--times", "20,60", "--n-out", "8",
          "--grid", "16", "16", "--out", str(stats)])
    out = capsys.readouterr().out
    info = json.loads(out.strip().splitlines()[-1])
    assert info["mn"] == 4
    assert stats.exists()
