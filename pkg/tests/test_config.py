import pytest
from hypothesis import given, strategies as st

from fbdsde.config import ConfigError, RunConfig, load_config, parse_config, serialize_config

MINIMAL = "[ensemble]\nseed = 7\n"


def test_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.seed == 7 and cfg.solver.degree == 2 and cfg.solver.damping == 0.5
    assert cfg.model.name == "lq" and cfg.grid.n_steps == 50 and cfg.ensemble.n_inner == 2000


def test_unknown_key_names_key_and_line():
    text = MINIMAL + "\n[grid]\nT = 1.0\nn_stepz = 10\n"
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert exc.value.key == "grid.n_stepz" and exc.value.line == 6
    assert "'grid.n_stepz' (line 6)" in str(exc.value)


def test_unknown_section():
    with pytest.raises(ConfigError) as exc:
        parse_config(MINIMAL + "[gird]\nT = 1\n")
    assert exc.value.key == "gird" and exc.value.line == 3


def test_missing_section_and_key():
    with pytest.raises(ConfigError) as exc:
        parse_config("[grid]\nT = 1.0\n")
    assert "ensemble" in str(exc.value)
    with pytest.raises(ConfigError) as exc:
        parse_config("[ensemble]\nn_outer = 2\n")
    assert exc.value.key == "ensemble.seed"


@pytest.mark.parametrize("text, key", [
    ('[ensemble]\nseed = "seven"\n', "ensemble.seed"),
    (MINIMAL + "[grid]\nn_steps = 2.5\n", "grid.n_steps"),
    (MINIMAL + "[output]\nwrite_paths = 1\n", "output.write_paths"),
    (MINIMAL + "[field]\ntimes = [0.0, \"a\"]\n", "field.times[1]"),
])
def test_type_mismatch(text, key):
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert exc.value.key == key


@pytest.mark.parametrize("text", [
    "[ensemble]\nseed = 1\nn_inner = 0\n",
    "[ensemble]\nseed = -1\n",
    MINIMAL + "[solver]\ndamping = 2.0\n",
    MINIMAL + "[model]\nname = \"other\"\n",
    MINIMAL + "[model]\nname = \"custom\"\n",
])
def test_invalid_values_become_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_syntax_error_is_config_error():
    with pytest.raises(ConfigError):
        parse_config("[ensemble\nseed = 1\n")


def test_ints_are_accepted_for_floats():
    assert parse_config(MINIMAL + "[grid]\nT = 2\n").grid.T == 2.0


def test_custom_model_tables():
    cfg = parse_config(MINIMAL + '[model]\nname = "custom"\nkind = "decoupled"\n'
                       '[model.expressions]\nb = "0"\nsigma = "a"\nf = "0"\ng = "0"\nhtilde = "x"\n'
                       'l = "v**2"\ngamma = "Y"\n[model.params]\na = 2\n')
    assert cfg.model.decoupled and cfg.model.params == {"a": 2.0}
    cfg.model.build()


@st.composite
def configs(draw):
    seed = draw(st.integers(0, 2 ** 64 - 1))
    lines = [f"[ensemble]\nseed = {seed}\nn_outer = {draw(st.integers(1, 64))}\n",
             f"[grid]\nT = {draw(st.floats(0.1, 5.0))!r}\nn_steps = {draw(st.integers(1, 500))}\n",
             f"[solver]\ndegree = {draw(st.integers(0, 4))}\nthreads = {draw(st.integers(1, 8))}\n",
             f"[control]\nvalue = {draw(st.floats(-1, 1))!r}\n",
             f"[output]\ndir = {draw(st.text('abc/_-', min_size=1, max_size=8))!r}\n".replace("'", '"')]
    return "".join(lines)


@given(configs())
def test_serialize_parse_is_a_fixpoint(text):
    cfg = parse_config(text)
    again = parse_config(serialize_config(cfg))
    assert again == cfg
    assert serialize_config(again) == serialize_config(cfg)


def test_overrides_and_load(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text(MINIMAL)
    cfg = load_config(p).with_overrides(seed=9, threads=3, out=tmp_path / "o")
    assert isinstance(cfg, RunConfig)
    assert cfg.seed == 9 and cfg.solver.threads == 3 and cfg.output.dir == str(tmp_path / "o")
