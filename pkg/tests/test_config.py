import pytest

from gads.config import load_config
from gads.model import ConfigError
from gads.preprocess import DEFAULT_GROUPS


def _write(tmp_path, text):
    p = tmp_path / "run.ini"
    p.write_text(text)
    return p


def test_defaults():
    cfg = load_config(None)
    assert cfg.model.heads == 4 and cfg.train.epochs == 150 and cfg.groups == DEFAULT_GROUPS


def test_sections(tmp_path):
    cfg = load_config(_write(tmp_path, """
[model]
heads = 8
activation = gelu
dropout = 0.1

[hybrid]
fc_widths = 24, 8
fusion_layers = 2

[train]
epochs = 20
milestones = 5, 10
loss = mse
micro_batch = 8
"""))
    assert (cfg.model.heads, cfg.model.activation, cfg.model.dropout) == (8, "gelu", 0.1)
    assert cfg.hybrid.fc_widths == (24, 8)
    assert cfg.hybrid_config().gads == cfg.model
    assert (cfg.train.epochs, cfg.train.milestones, cfg.train.loss, cfg.train.micro_batch) == (20, (5, 10), "mse", 8)


def test_custom_groups(tmp_path):
    cfg = load_config(_write(tmp_path, """
[groups]
eyes = 36 37 38 39 40 41 42 43 44 45 46 47
mouth = 48, 51, 54, 57
"""))
    assert cfg.groups.names == ("eyes", "mouth")
    assert cfg.model.group_sizes == (12, 4)


@pytest.mark.parametrize(
    "text",
    [
        "[model]\nwidth = 3\n",
        "[extras]\na = 1\n",
        "[model]\nheads = four\n",
        "[model]\nheads = 3\n",
        "[train]\nepochs = 0\n",
        "[model]\nexperimental = maybe\n",
        "not ini at all",
    ],
)
def test_rejected(tmp_path, text):
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, text))


def test_bad_group_index(tmp_path):
    with pytest.raises(ValueError):
        load_config(_write(tmp_path, "[groups]\na = 1 30\n"))
