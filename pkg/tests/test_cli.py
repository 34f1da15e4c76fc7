import json

import numpy as np
import pytest

from fewseg.cli import main, parse_synth_spec
from fewseg.episodes import load_directory

TINY_CFG = """\
input_size = 16
encoder_channels = 4
encoder_strides = 2
train_epochs = 1
finetune_epochs = 1
episodes_per_epoch = 2
eval_episodes = 2
source_categories = 2
source_images = 5
target_categories = 2
target_images = 5
out_dir = {out}
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(TINY_CFG.format(out=tmp_path / "out"))
    return p


class TestSynthSpec:
    def test_palette_parsing(self, tmp_path):
        p = tmp_path / "s.cfg"
        p.write_text(
            "palette = 0.9 0.2 0.5; 0.2, 0.9, 0.5\n"
            "categories = 2\nimages_per_category = 3\nimage_size = 16\n"
            "background = 0.1 0.1 0.5\nscale_range = 0.4, 0.6\nseed = 1\n"
        )
        spec = parse_synth_spec(p)
        assert spec.palette == ((0.9, 0.2, 0.5), (0.2, 0.9, 0.5))
        assert spec.background == (0.1, 0.1, 0.5)
        assert spec.scale_range == (0.4, 0.6)

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "s.cfg"
        p.write_text("wibble = 3\n")
        with pytest.raises(ValueError, match="unknown synthetic spec key"):
            parse_synth_spec(p)


class TestCommands:
    def test_gen_synth_writes_loadable_dataset(self, tmp_path, capsys):
        spec = tmp_path / "s.cfg"
        spec.write_text(
            "palette = 0.9 0.2 0.5; 0.2 0.9 0.5\ncategories = 2\n"
            "images_per_category = 3\nimage_size = 16\n"
        )
        out = tmp_path / "data"
        assert main(["gen-synth", "--spec", str(spec), "--out", str(out)]) == 0
        assert "wrote 6" in capsys.readouterr().out
        ds = load_directory(out)
        assert len(ds) == 6

    def test_train_finetune_eval_chain(self, cfg_file, tmp_path, capsys):
        out = tmp_path / "out"
        assert main(["train", "--config", str(cfg_file)]) == 0
        assert (out / "source.ckpt").exists()
        assert main(["finetune", "--config", str(cfg_file),
                     "--checkpoint", str(out / "source.ckpt")]) == 0
        assert (out / "target.ckpt").exists()
        assert main(["eval", "--config", str(cfg_file),
                     "--checkpoint", str(out / "target.ckpt")]) == 0
        text = capsys.readouterr().out
        assert "mean" in text

    def test_analyze_gestalt_prints_json(self, tmp_path, capsys):
        spec = tmp_path / "s.cfg"
        spec.write_text(
            "palette = 0.9 0.2 0.5; 0.2 0.9 0.5\ncategories = 2\n"
            "images_per_category = 3\nimage_size = 16\n"
        )
        out = tmp_path / "data"
        main(["gen-synth", "--spec", str(spec), "--out", str(out)])
        capsys.readouterr()
        assert main(["analyze-gestalt", "--data", str(out)]) == 0
        stats = json.loads(capsys.readouterr().out)
        assert set(stats) == {"intra", "cross"}

    def test_bad_config_returns_nonzero(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("no_such_key = 1\n")
        assert main(["train", "--config", str(bad)]) == 1
        assert "error:" in capsys.readouterr().err

    def test_missing_dataset_returns_nonzero(self, tmp_path, capsys):
        assert main(["analyze-gestalt", "--data", str(tmp_path / "nope")]) == 1
        assert "error:" in capsys.readouterr().err
