import pytest

from bhsim.config import (BUILTIN_PROFILE_NAMES, ConfigError, HistoryKind,
                          ScenarioId, ScenarioSpec, UnsupportedScenarioError,
                          builtin_profile, builtin_profile_text, load_profile,
                          load_scenario, parse_config_text, serialize_profile,
                          validate_scenario)

MINIMAL = """
name = test-core
history_kind = pure_phr
phr_capacity = 8
phr_footprint_bits = 4
phr_source_lo = 2
phr_source_hi = 5
tage_history_lengths = [0, 4, 8]
"""


def test_parse_nested_sections_and_lists():
    data = parse_config_text("""
# comment
a = 1
flags = [x, y]
nested {
  b = 0x10   # hex
  deep {
    c = true
  }
}
""")
    assert data == {"a": 1, "flags": ["x", "y"],
                    "nested": {"b": 16, "deep": {"c": True}}}


def test_parse_error_carries_line_number():
    with pytest.raises(ConfigError, match="line 3"):
        parse_config_text("a = 1\nb = 2\nwhat is this")


def test_minimal_profile_loads():
    p = load_profile(MINIMAL)
    assert p.name == "test-core"
    assert p.history_kind is HistoryKind.PURE_PHR
    assert p.tage_history_lengths == (0, 4, 8)


def test_builtin_a76_numbers():
    p = builtin_profile("cortex-a76")
    assert p.history_kind is HistoryKind.PURE_PHR
    assert p.phr_capacity == 48
    assert p.btb_evict_threshold == 4


def test_builtin_a72_numbers():
    p = builtin_profile("cortex-a72")
    assert p.history_kind is HistoryKind.HYBRID_BHB_PHR
    assert p.bhb_capacity == 8
    assert p.phr_capacity == 4
    assert (p.phr_source_lo, p.phr_source_hi) == (4, 5)
    assert p.bias_free_enabled
    assert p.btb_evict_threshold == 2
    assert not p.fallback_to_t0


def test_builtin_thresholds():
    expected = {"cortex-a72": 2, "cortex-a76": 4, "cortex-a78ae": 5, "zen4": 16}
    for name, threshold in expected.items():
        assert builtin_profile(name).btb_evict_threshold == threshold


def test_bst_geometry_invariant_rejected():
    # 4096 entries with index bits [15:5] would need 2^11 slots
    text = builtin_profile_text("cortex-a72").replace(
        "bst_index_lo = 4", "bst_index_lo = 5")
    with pytest.raises(ConfigError, match="bst_entries"):
        load_profile(text)


@pytest.mark.parametrize("field,value,message", [
    ("phr_capacity = 48", "phr_capacity = 0", "phr_capacity"),
    ("btb_evict_threshold = 4", "btb_evict_threshold = 0", "btb_evict_threshold"),
    ("tage_history_lengths = [0, 6, 12, 24, 48]",
     "tage_history_lengths = [0, 6, 6, 24, 48]", "strictly increasing"),
    ("tage_history_lengths = [0, 6, 12, 24, 48]",
     "tage_history_lengths = [2, 6, 12, 24, 48]", "start with 0"),
])
def test_invariant_violations_name_the_field(field, value, message):
    text = builtin_profile_text("cortex-a76").replace(field, value)
    with pytest.raises(ConfigError, match=message):
        load_profile(text)


def test_hybrid_requires_bhb_capacity():
    text = builtin_profile_text("cortex-a72").replace(
        "bhb_capacity = 8", "bhb_capacity = 0")
    with pytest.raises(ConfigError, match="bhb_capacity"):
        load_profile(text)


def test_every_builtin_round_trips():
    for name in BUILTIN_PROFILE_NAMES:
        p = builtin_profile(name)
        assert load_profile(serialize_profile(p)) == p


def test_every_builtin_validates():
    for name in BUILTIN_PROFILE_NAMES:
        builtin_profile(name).validate()  # must not raise


def test_unknown_profile_field_rejected():
    with pytest.raises(ConfigError, match="frobnicate"):
        load_profile(MINIMAL + "frobnicate = 3\n")


# --- scenario validation ---

def test_bse_b_ev_subset_accepted():
    p = builtin_profile("cortex-a72")
    spec = validate_scenario(ScenarioSpec(ScenarioId.SPECTRE_BSE, p))
    assert spec.params["b_ev"][0] in spec.params["bh_addrs"]
    assert spec.trials == 1000  # default resolved


def test_bse_b_ev_not_subset_rejected():
    p = builtin_profile("cortex-a72")
    spec = ScenarioSpec(ScenarioId.SPECTRE_BSE, p)
    from bhsim.config import default_params
    params = default_params(ScenarioId.SPECTRE_BSE, p)
    params["b_ev"] = [0xDEAD000]
    spec.params = params
    with pytest.raises(ConfigError, match="b_ev"):
        validate_scenario(spec)


def test_chimera_missing_shuffle_branch_rejected():
    p = builtin_profile("cortex-a76")
    spec = ScenarioSpec(ScenarioId.CHIMERA, p)
    spec.params = {"line_addrs": {f"line{i}": 0x450000 + i * 0x100
                                  for i in (2, 3, 5, 7, 8, 10)}}
    with pytest.raises(ConfigError, match="shuffle_branch"):
        validate_scenario(spec)


def test_bse_needs_bias_free_profile():
    p = builtin_profile("cortex-a76")
    with pytest.raises(UnsupportedScenarioError):
        validate_scenario(ScenarioSpec(ScenarioId.SPECTRE_BSE, p))


def test_scenario_bounds():
    p = builtin_profile("cortex-a72")
    with pytest.raises(ConfigError, match="trials"):
        validate_scenario(ScenarioSpec(ScenarioId.SPECTRE_BSE, p, trials=0))
    with pytest.raises(ConfigError, match="noise"):
        validate_scenario(ScenarioSpec(ScenarioId.SPECTRE_BSE, p, noise=1.5))


def test_scenario_file_loading():
    spec = load_scenario("""
scenario = spectre-bse
profile = cortex-a72
trials = 42
seed = 0x1234
""")
    assert spec.scenario is ScenarioId.SPECTRE_BSE
    assert spec.trials == 42
    assert spec.seed == 0x1234
    assert spec.profile.name == "cortex-a72"
