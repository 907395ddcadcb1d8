import pytest

from lookwhere.config import DEFAULTS, ConfigError, RunConfig


def test_defaults_validate():
    cfg = RunConfig.load()
    assert cfg.vit_config().num_patches == 64
    assert str(cfg.pretrain_config().aggregation) == "pat@last_only"
    assert cfg.eval_ks() == [6]
    assert cfg.finetune_config().fixed_k == 6


def test_file_and_overrides(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("[train]\nepochs = 3\n[run]\nseed = 4\n")
    cfg = RunConfig.load(f, ["train.lr=0.01", "eval.k=1,8"], seed=None)
    assert cfg.int("train", "epochs") == 3 and cfg.seed == 4
    assert cfg.float("train", "lr") == 0.01
    assert cfg.eval_ks() == [1, 8]
    assert RunConfig.load(f, seed=7).seed == 7


@pytest.mark.parametrize("text", ["[train]\nepochz = 3\n", "[bogus]\nx = 1\n", "epochs = 3\n", "[train\n"])
def test_malformed_files_rejected(tmp_path, text):
    f = tmp_path / "bad.cfg"
    f.write_text(text)
    with pytest.raises(ConfigError):
        RunConfig.load(f)


@pytest.mark.parametrize("item", ["train.epochs", "epochs=3", "train.epochs=three", "eval.k=0", "train.k_min=20",
                                  "selector.low_depth=9", "train.aggregation=pat@middle", "train.augment=maybe"])
def test_bad_overrides(item):
    with pytest.raises(ConfigError):
        RunConfig.load(overrides=[item])


def test_resolved_lists_every_key():
    lines = RunConfig.load(seed=2).resolved()
    assert lines[0] == "run.seed=2"
    assert len(lines) == 1 + sum(len(v) for v in DEFAULTS.values())


def test_dict_roundtrip():
    cfg = RunConfig.load(overrides=["train.epochs=2"], seed=5)
    back = RunConfig.from_dict(cfg.to_dict())
    assert back.resolved() == cfg.resolved()


def test_data_seeds_are_split_by_offset():
    cfg = RunConfig.load(seed=3)
    assert cfg.data_spec(1).seed == 3001 and cfg.data_spec(2).seed == 3002


def test_varied_finetune_k():
    assert RunConfig.load(overrides=["train.finetune_k=varied"]).finetune_config().fixed_k is None
