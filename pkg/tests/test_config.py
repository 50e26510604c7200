from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtss.config import ConfigError, LassoMode, Mode, load_config, parse_config, serialize_config
from mtss.tasks import TaskKind

CONFIGS = sorted((Path(__file__).parent.parent / "configs").glob("*.ini"))

MINIMAL = """\
[experiment]
seed = 7

[task.rp]
kind = relative_position
"""


def test_minimal_config_fills_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.seed == 7 and cfg.mode is Mode.HYBRID and cfg.lasso_mode is LassoMode.NONE
    assert cfg.task_ids == ["rp"]
    entry = cfg.task("rp")
    assert entry.workers == 1 and entry.effective_quota == 1
    assert entry.spec.kind is TaskKind.RELATIVE_POSITION
    assert cfg.optimizer.rho == 0.9 and cfg.optimizer.eps == 1e-8
    text = serialize_config(cfg)
    assert serialize_config(parse_config(text)) == text


def test_unknown_key_names_its_line():
    text = MINIMAL + "foo = 1\n"
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.line == 6
    assert "foo" in str(info.value) and "line 6" in str(info.value)


def test_missing_seed():
    with pytest.raises(ConfigError, match="seed"):
        parse_config("[experiment]\nid = x\n[task.a]\nkind = exemplar\n")


@pytest.mark.parametrize("line,bad", [
    (4, "[optimizer]\nrho = 1.5\n"),
    (4, "[optimizer]\nlr = 0\n"),
    (4, "[lasso]\nlambda = -1\n"),
    (3, "[experiment2]\n"),
    (5, "[task.x]\nkind = exemplar\nmargin = 0\n"),
    (5, "[task.x]\nkind = exemplar\nworkers = two\n"),
])
def test_range_and_value_errors_carry_line(line, bad):
    with pytest.raises(ConfigError) as info:
        parse_config("[experiment]\nseed = 1\n" + bad)
    assert info.value.line == line


def test_structural_errors():
    with pytest.raises(ConfigError):
        parse_config("[experiment]\nseed = 1\n")  # no tasks
    with pytest.raises(ConfigError):
        parse_config(MINIMAL + "[task.rp]\nkind = exemplar\n")
    with pytest.raises(ConfigError, match="kind"):
        parse_config("[experiment]\nseed = 1\n[task.a]\nbatch_size = 2\n")
    with pytest.raises(ConfigError, match="backups"):
        parse_config(MINIMAL + "workers = 2\nbackups = 2\n")
    with pytest.raises(ConfigError):
        parse_config("seed = 1\n")


def test_task_lasso_follows_global_mode_unless_overridden():
    text = ("[experiment]\nseed = 0\n[lasso]\nmode = pretrain_only\n"
            "[task.a]\nkind = exemplar\n[task.b]\nkind = colorization\nlasso = off\n")
    cfg = parse_config(text)
    assert cfg.task("a").spec.lasso and not cfg.task("b").spec.lasso
    cfg = parse_config(text.replace("pretrain_only", "eval_only"))
    assert not cfg.task("a").spec.lasso and cfg.lasso_mode.eval


def test_checkpoint_interval_default_gives_eight_ticks():
    cfg = parse_config(MINIMAL + "[train]\nmax_cost = 80\n")
    assert cfg.checkpoint_interval == 10.0


@pytest.mark.parametrize("path", CONFIGS, ids=[p.stem for p in CONFIGS])
def test_every_family_config_parses_and_round_trips(path):
    cfg = load_config(path)
    text = serialize_config(cfg)
    again = parse_config(text)
    assert again == cfg
    assert serialize_config(again) == text


def test_families_cover_the_grid():
    names = {p.stem for p in CONFIGS}
    assert {"rp", "col", "ex", "ms", "rp_col", "rp_ex", "rp_ms", "rp_col_ex", "rp_col_ex_ms", "rp_h",
            "rp_col_h"} <= names
    modes = {load_config(p).lasso_mode for p in CONFIGS if p.stem.startswith("all_lasso_")}
    assert modes == set(LassoMode)
    assert load_config(CONFIGS[[p.stem for p in CONFIGS].index("rp_h")]).task("rp").spec.harmonized


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32), lr=st.floats(1e-6, 1.0), workers=st.integers(1, 5),
       mode=st.sampled_from(list(Mode)), lasso=st.sampled_from(list(LassoMode)),
       kinds=st.lists(st.sampled_from(list(TaskKind)), min_size=1, max_size=4))
def test_round_trip_property(seed, lr, workers, mode, lasso, kinds):
    text = f"[experiment]\nseed = {seed}\nmode = {mode.value}\n[optimizer]\nlr = {lr!r}\n[lasso]\nmode = {lasso.value}\n"
    for i, k in enumerate(kinds):
        text += f"[task.t{i}]\nkind = {k.value}\nworkers = {workers}\n"
    cfg = parse_config(text)
    assert parse_config(serialize_config(cfg)) == cfg
