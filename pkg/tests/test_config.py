import pytest
from hypothesis import given
from hypothesis import strategies as st

from nvf import config as cfgmod
from nvf.config import RunConfig
from nvf.errors import ConfigError


def test_defaults_round_trip():
    cfg = RunConfig()
    assert cfgmod.loads(cfgmod.dumps(cfg)) == cfg


@given(st.integers(0, 2**31), st.floats(0.0, 1.0), st.sampled_from(["nvf", "random", "wd", "no-vis"]),
       st.booleans(), st.integers(0, 40))
def test_round_trip_modified(seed, beta, method, correlated, horizon):
    cfg = RunConfig().replace(run={"seed": seed}, priors={"beta": beta}, planner={"method": method, "horizon": horizon},
                              correlation={"correlated": correlated})
    assert cfgmod.loads(cfgmod.dumps(cfg)) == cfg


def test_partial_file_uses_defaults():
    cfg = cfgmod.loads("[planner]\nhorizon = 3\n")
    assert cfg.planner.horizon == 3 and cfg.field == RunConfig().field


def test_unknown_key_reports_line():
    with pytest.raises(ConfigError, match=r":3: unknown key planner.horizn"):
        cfgmod.loads("[planner]\nmethod = nvf\nhorizn = 3\n", "x.ini")


def test_unknown_section():
    with pytest.raises(ConfigError, match="unknown section"):
        cfgmod.loads("[planer]\nhorizon = 3\n")


def test_bad_value():
    with pytest.raises(ConfigError, match=r":2: bad value for field.batch_rays"):
        cfgmod.loads("[field]\nbatch_rays = lots\n", "x.ini")
    with pytest.raises(ConfigError):
        cfgmod.loads("[priors]\nbeta = 1.5\n")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="nope.ini"):
        cfgmod.load(tmp_path / "nope.ini")


def test_replace_rejects_unknown():
    with pytest.raises(ConfigError):
        RunConfig().replace(planner={"colour": 1})
    with pytest.raises(ConfigError):
        RunConfig().replace(nothing={})


def test_hash_ignores_output_location():
    a = RunConfig()
    assert a.hash() == a.replace(run={"out_dir": "elsewhere", "threads": 4}).hash()
    assert a.hash() != a.replace(run={"seed": 1}).hash()


def test_reference_lists_every_key():
    text = cfgmod.reference()
    for name, section in cfgmod.SECTIONS.items():
        assert f"[{name}]" in text
        for f in section.__dataclass_fields__:
            assert f"{f} = " in text
