import os

import pytest

import inputs
from errors import ConfigError


def test_parse_kv_text_strips_comments_and_blanks():
    text = "# header\nN = 252  # capacity\n\nB=12\nmu = 5.34\n"
    assert inputs.parse_kv_text(text) == {"N": "252", "B": "12", "mu": "5.34"}


def test_parse_kv_text_duplicate_key():
    with pytest.raises(ConfigError) as exc:
        inputs.parse_kv_text("N = 1\nN = 2\n")
    assert exc.value.key == "N"


def test_parse_kv_text_line_without_equals():
    with pytest.raises(ConfigError) as exc:
        inputs.parse_kv_text("horizon 2000\n", "run.cfg")
    assert exc.value.key == "horizon"
    assert "run.cfg:1" in str(exc.value)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError) as exc:
        inputs.parse_kv_file(str(tmp_path / "absent.cfg"))
    assert exc.value.key == "config"


# ----------------------------- grids -----------------------------

def test_parse_grid_overrides():
    grid = inputs.parse_grid_overrides("N=84, 252;B=12 ; ")
    assert grid == {"N": ["84", "252"], "B": ["12"]}
    assert inputs.parse_grid_overrides(None) == {}
    with pytest.raises(ConfigError):
        inputs.parse_grid_overrides("N")
    with pytest.raises(ConfigError) as exc:
        inputs.parse_grid_overrides("N=")
    assert exc.value.key == "N"


def test_expand_grid_is_full_product():
    grid = {"N": ["84", "252", "756"], "B": ["12", "24", "48"], "mu": ["1", "2", "4", "6", "8"]}
    cells = inputs.expand_grid({"seed": "0"}, grid)
    assert len(cells) == 45
    assert cells[0] == {"seed": "0", "N": "84", "B": "12", "mu": "1"}
    assert cells[-1] == {"seed": "0", "N": "756", "B": "48", "mu": "8"}
    assert len({tuple(sorted(c.items())) for c in cells}) == 45


def test_expand_grid_without_overrides_returns_base():
    base = {"N": "64"}
    cells = inputs.expand_grid(base, {})
    assert cells == [base] and cells[0] is not base


def test_wt_key_sets_both_counts():
    cells = inputs.expand_grid({}, inputs.parse_grid_overrides("WT=6:2,5:3"))
    assert cells == [{"W": "6", "T": "2"}, {"W": "5", "T": "3"}]
    assert inputs.grid_keys({"WT": ["6:2"], "N": ["84"]}) == ["W", "T", "N"]
    with pytest.raises(ConfigError) as exc:
        inputs.expand_grid({}, {"WT": ["6"]})
    assert exc.value.key == "WT"


# ----------------------------- schemas -----------------------------

def test_unknown_key_names_the_key():
    with pytest.raises(ConfigError) as exc:
        inputs.build_config("simulate-async", {"horizn": "10"})
    assert exc.value.key == "horizn"
    assert "unknown key" in str(exc.value)


def test_bad_value_names_the_key():
    with pytest.raises(ConfigError) as exc:
        inputs.build_config("simulate-async", {"N": "many"})
    assert exc.value.key == "N"
    with pytest.raises(ConfigError) as exc:
        inputs.build_config("simulate-async", {"transfer": "pipe"})
    assert exc.value.key == "transfer"


def test_unknown_subcommand():
    with pytest.raises(ConfigError) as exc:
        inputs.build_config("plot", {})
    assert exc.value.key == "subcommand"


def test_design_pairs_and_table_lists():
    cfg = inputs.build_config("design", {"pairs": "7:1, 6:2", "noise": "tabulated", "sigma_table": "0.5,1,2"})
    assert cfg.pairs == [(7, 1), (6, 2)]
    assert cfg.sigma_table == [0.5, 1.0, 2.0]
    with pytest.raises(ConfigError) as exc:
        inputs.build_config("design", {"pairs": "7"})
    assert exc.value.key == "pairs"


def test_defaults_follow_constants():
    cfg = inputs.build_config("design", {})
    assert cfg.mu == pytest.approx(5.28)
    assert [tuple(p) for p in cfg.pairs] == list(inputs.DEFAULT_PAIRS)
    a = inputs.build_config("simulate-async", {})
    assert (a.W, a.T, a.N, a.B, a.G, a.transfer) == (6, 2, 252, 12, 4, "buffer")


def test_config_cells_layers_file_overrides_and_grid(tmp_path):
    path = tmp_path / "async.cfg"
    path.write_text("horizon = 100\nN = 84\n", encoding="utf-8")
    cells = inputs.config_cells("simulate-async", str(path), {"N": "252"}, "WT=6:2,4:4;seed=1,2")
    assert len(cells) == 4
    assert all(c.horizon == 100 and c.N == 252 for c in cells)
    assert [(c.W, c.T, c.seed) for c in cells] == [(6, 2, 1), (6, 2, 2), (4, 4, 1), (4, 4, 2)]


def test_resolved_values_are_plain_json():
    values = inputs.resolved_values(inputs.build_config("design", {"pairs": "4:4"}))
    assert values["pairs"] == [[4, 4]]
    assert values["noise"] == "power_law"


# ----------------------------- soft validation -----------------------------

def test_design_warnings():
    assert inputs.validate_design(inputs.build_config("design", {})) == []
    w = inputs.validate_design(inputs.build_config("design", {"mu": "100"}))
    assert len(w) == 1 and w[0].startswith("mu = 100")
    w = inputs.validate_design(inputs.build_config("design", {"R": "7"}))
    assert any("does not divide" in m for m in w)


def test_async_warnings():
    cfg = inputs.build_config("simulate-async", {"transfer": "queue", "queue_capacity": "3"})
    w = inputs.validate_async(cfg)
    assert len(w) == 1 and "queue_capacity 3" in w[0]
    below_batch = inputs.build_config("simulate-async", {"transfer": "queue", "queue_capacity": "5"})
    assert inputs.validate_async(below_batch) == []
    short = inputs.build_config("simulate-async", {"horizon": "100"})
    assert any("steady state" in m for m in inputs.validate_async(short))


def test_sync_warnings():
    w = inputs.validate_sync(inputs.build_config("simulate-sync", {"xs": "1,2"}))
    assert any("both xs and ys" in m for m in w)
    w = inputs.validate_sync(inputs.build_config("simulate-sync", {"rho_knob": "2"}))
    assert any("clipped" in m for m in w)


def test_bandit_warnings():
    cfg = inputs.build_config("train-bandit", {"temperature_eval": "2.0"})
    assert inputs.validate_bandit(cfg) == ["evaluation temperature above training temperature"]


@pytest.mark.parametrize("kind,name", [
    ("design", "design.cfg"),
    ("simulate-sync", "sync.cfg"),
    ("simulate-sync", "sync_sweep.cfg"),
    ("simulate-async", "async.cfg"),
    ("simulate-async", "async_queue.cfg"),
    ("train-bandit", "bandit.cfg"),
])
def test_shipped_configs_validate(kind, name):
    path = os.path.join(os.path.dirname(__file__), "configs", name)
    cfg = inputs.load_config(kind, path)
    assert inputs.VALIDATORS[kind](cfg) == []
