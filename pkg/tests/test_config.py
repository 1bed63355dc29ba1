import pytest

from freshrec.config import FreshrecConfig, dump_config, load_config
from freshrec.vector_index import CoarseIVF, Exact


def test_defaults_round_trip():
    cfg = FreshrecConfig()
    assert load_config(text=dump_config(cfg)) == cfg


def test_overrides_are_typed(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[world]\nn_users = 12\ntau = 0.5\n[coldstart]\nhidden = 8, 4\n"
                    "[simulation]\ncrossover = no\n[index]\nmode = ivf\nnum_clusters = 4\nnprobe = 2\n")
    cfg = load_config(path)
    assert cfg.world.n_users == 12 and cfg.world.tau == 0.5
    assert cfg.coldstart.hidden == (8, 4)
    assert cfg.simulation.crossover is False
    assert isinstance(cfg.index.to_mode(), CoarseIVF)
    assert isinstance(FreshrecConfig().index.to_mode(), Exact)


@pytest.mark.parametrize("text, match", [
    ("[nope]\na = 1\n", "unknown config section"),
    ("[world]\ncolour = 1\n", "unknown key"),
    ("[simulation]\ncrossover = maybe\n", "not a boolean"),
    ("[world]\nn_users = 0\n", "degenerate world"),
    ("[world]\ngamma = 1.0\n", "gamma"),
])
def test_bad_config_rejected(text, match):
    with pytest.raises(ValueError, match=match):
        load_config(text=text)
