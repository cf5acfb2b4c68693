import pytest

from queryrec.config import RunConfig, load_config, parse_config_text


def test_dump_and_parse_round_trip():
    cfg = RunConfig(d=12, head_hidden=(7, 3), use_diffusion=False, lambda2=0.25)
    cfg = cfg.with_overrides(synthetic=cfg.synthetic.__class__(n_users=17, shift=0.3))
    assert RunConfig.from_flat(parse_config_text(cfg.dumps())) == cfg


def test_file_with_comments_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# experiment\nd = 16   # width\nsynth_n_users = 42\n\nuse_query_feature = no\n", encoding="utf-8")
    cfg = load_config(path, {"d": "24", "lambda3": None})
    assert cfg.d == 24 and cfg.synthetic.n_users == 42 and cfg.use_query_feature is False
    assert cfg.lambda3 == RunConfig().lambda3


@pytest.mark.parametrize(
    "text,error",
    [
        ("bogus = 1", KeyError),
        ("synth_bogus = 1", KeyError),
        ("d = wide", ValueError),
        ("use_diffusion = maybe", ValueError),
        ("just a line", ValueError),
        ("= 3", ValueError),
    ],
)
def test_bad_config_text(text, error):
    with pytest.raises(error):
        RunConfig.from_flat(parse_config_text(text))


@pytest.mark.parametrize(
    "overrides", [dict(lambda2=-0.1), dict(lambda3=-1.0), dict(d=0), dict(n_ctr_neg=0), dict(beta_ctr=0.0), dict(d=6, sas_heads=4)]
)
def test_validation(overrides):
    with pytest.raises(ValueError):
        RunConfig(**overrides).validate()
