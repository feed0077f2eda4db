import pytest

from xmask.attacks import AttackConfig
from xmask.config import ConfigError, RunConfig, load_config, parse_config, to_dict

FULL = """
seed = 7
float_mode = "f64"
out = "runs/a"

[data]
source = "synthetic"
kind = "bars"
n = 300
shape = [1, 16, 16]
eval_size = 50

[model]
kind = "mlp"
xunet_widths = [4, 8, 8]

[train]
epochs = 2
lr = 0.02

[attack]
epsilon = 0.1
alpha = 0.01
steps = 5

[mute]
thresh = 0.4

[monitor]
xai_method = "lrp"
calibration = "fixed"
tau = 0.8

[loss_weights]
stealth = 2.0

[balance_weights]
speed = 0

[benchmark]
methods = ["pgd", "sinifgsm"]
timing = "wall"

[benchmark.attack]
epsilon = 0.3
alpha = 0.03
steps = 10
"""


def test_defaults():
    cfg = parse_config("")
    assert cfg == RunConfig()
    assert cfg.benchmark.attack == AttackConfig(0.2, 0.02, 10)
    assert cfg.benchmark.timing == "queries"


def test_full_config_maps_onto_dataclasses():
    cfg = parse_config(FULL)
    assert cfg.seed == 7 and cfg.float_mode == "f64"
    assert cfg.data.shape == [1, 16, 16] and cfg.data.kind == "bars"
    assert cfg.attack == AttackConfig(0.1, 0.01, 5)
    assert cfg.mute.thresh == 0.4 and cfg.monitor.xai_method == "lrp"
    assert cfg.loss_weights.stealth == 2.0 and cfg.balance_weights.speed == 0.0
    assert cfg.benchmark.methods == ["pgd", "sinifgsm"]
    assert cfg.benchmark.attack.epsilon == 0.3
    assert isinstance(cfg.train.lr, float)
    assert to_dict(cfg)["benchmark"]["attack"]["steps"] == 10


@pytest.mark.parametrize("text,fragment", [
    ("colour = 1", "unknown key"),
    ("[attack]\neps = 0.1", "unknown key"),
    ("[benchmark.attack]\nstep = 3", "unknown key"),
    ("seed = -1", "unsigned"),
    (f"seed = {2 ** 64}", "unsigned"),
    ("seed = 1.5", "expected int"),
    ("[train]\nepochs = true", "expected int"),
    ("[attack]\nepsilon = \"big\"", "expected float"),
    ("[attack]\nepsilon = 0.01\nalpha = 0.5", "alpha"),
    ("[model]\nkind = \"resnet\"", "model.kind"),
    ("[data]\nsource = \"idx\"", "data.images"),
    ("[monitor]\ntau = 2.0", "tau"),
    ("[mute]\nthresh = -0.1", "thresh"),
    ("[loss_weights]\nstealth = 0\nmask = 0\naccuracy = 0", "not all zero"),
    ("[benchmark]\nmethods = [\"sparsefool\"]", "benchmark.methods"),
    ("[benchmark]\ntiming = \"cycles\"", "timing"),
    ("attack = 3", "expected a table"),
    ("[[data]]\nn = 3", "expected a table"),
    ("not toml at all = = =", "TOML"),
])
def test_invalid_configs_rejected(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(text)


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "nope.toml")


def test_shipped_example_configs_parse():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1] / "configs"
    files = sorted(root.glob("*.toml"))
    assert files
    for f in files:
        load_config(f)
