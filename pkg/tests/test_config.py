import pytest

from dispa import config as cfgio
from dispa.mae import PretrainConfig
from dispa.train import TrainConfig


def test_roundtrip_values():
    d = {"a": 1, "b": 0.1, "c": "three-way", "flag": True, "off": False, "hidden": [128, 64],
         "quote": 'say "hi"'}
    assert cfgio.loads(cfgio.dumps(d)) == d


def test_comments_blank_lines_and_errors():
    assert cfgio.loads("# note\n\nx = 3\n  y=2.5  \n") == {"x": 3, "y": 2.5}
    with pytest.raises(ValueError, match="line 1"):
        cfgio.loads("no equals here")
    with pytest.raises(ValueError, match="line 2"):
        cfgio.loads("ok = 1\nbad = [1, \n")
    with pytest.raises(ValueError):
        cfgio.loads("bad key = 1")


def test_dataclass_files(tmp_path):
    cfg = TrainConfig(batch=8, est_hidden=(16, 16), protocol="three-way")
    cfgio.write_config(tmp_path / "t.toml", cfg)
    back = cfgio.from_mapping(TrainConfig, cfgio.read_config(tmp_path / "t.toml"))
    assert back == cfg
    p = cfgio.from_mapping(PretrainConfig, {"epochs": 3, "masked_only": True, "unknown": 1})
    assert p.epochs == 3 and p.masked_only is True
