import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from concept_forge.config import ConfigError, PipelineConfig
from concept_forge.experiment import FILTERS


def test_defaults_round_trip():
    cfg = PipelineConfig()
    assert PipelineConfig.from_ini(cfg.to_ini()) == cfg


@settings(max_examples=60)
@given(
    k=st.integers(0, 50), wa=st.floats(0, 1), epochs=st.integers(0, 30),
    lr=st.floats(1e-6, 5), topk=st.integers(1, 50), nprobe=st.none() | st.integers(1, 40),
    dim=st.integers(4, 128), seed=st.integers(0, 2 ** 31),
    filters=st.lists(st.sampled_from(FILTERS), unique=True).map(tuple),
    out=st.text("abcxyz/_-", min_size=1, max_size=12),
)
def test_overrides_round_trip(**flags):
    cfg = PipelineConfig().override(**flags)
    again = PipelineConfig.from_ini(cfg.to_ini())
    assert again == cfg
    assert again.training.w_a == again.augmentation.w_a == flags["wa"]
    assert again.training.seed == again.augmentation.seed == flags["seed"]
    assert set(again.filters) == set(flags["filters"])


def test_override_ignores_missing_flags():
    cfg = PipelineConfig().override(k=3)
    assert cfg.override(k=None, wa=None, kb=None) == cfg
    assert cfg.augmentation.k == 3


def test_experiment_view():
    cfg = PipelineConfig().override(k=4, wa=0.2, lr=0.5, epochs=3, nprobe=2, topk=7, seed=9)
    exp = cfg.experiment()
    assert (exp.k, exp.w_a, exp.learning_rate, exp.epochs, exp.nprobe, exp.topk, exp.seed) == \
        (4, 0.2, 0.5, 3, 2, 7, 9)


def test_filters_are_canonically_ordered():
    assert PipelineConfig(filters=("diversity", "abbrev")).filters == ("abbrev", "diversity")


@pytest.mark.parametrize("text, flag", [
    ("[bogus]\nx = 1\n", "--config"),
    ("[training]\nnope = 1\n", "[training] nope"),
    ("[training]\nepochs = many\n", "[training] epochs"),
    ("[run]\nseed = x\n", "seed"),
    ("[run]\nfilters = abbrev,magic\n", "--filters"),
    ("[training]\nw_a = -1\n", "[training]"),
    ("not an ini", "--config"),
])
def test_bad_files_name_the_option(text, flag):
    with pytest.raises(ConfigError) as err:
        PipelineConfig.from_ini(text)
    assert err.value.flag == flag


def test_load_and_save(tmp_path):
    path = tmp_path / "run.ini"
    cfg = PipelineConfig().override(kb="kb.jsonl", k=5)
    cfg.save(path)
    assert PipelineConfig.load(path) == cfg
    with pytest.raises(ConfigError):
        PipelineConfig.load(tmp_path / "missing.ini")


def test_partial_file_keeps_defaults():
    cfg = PipelineConfig.from_ini("[augmentation]\nk = 7\n")
    assert cfg.augmentation.k == 7 and cfg.training == PipelineConfig().training
