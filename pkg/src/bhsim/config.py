"""Microarchitecture profiles and scenario specifications.

Profiles capture the tunable parameters of one modeled core: the shape of
its global branch history (pure path-history register vs. a hybrid of a
canonical outcome buffer XOR'd with a small PHR), the branch status table
geometry, the congruence-pressure eviction threshold of the tagged
prediction tables, the TAGE history-length ladder, and the mitigation
switches.  Profiles are immutable after load and safe to share across
parallel trial runners.

Both profiles and scenario specs are stored in a small line-oriented
key/value text format (see docs/config.md for the grammar).  Parse errors
carry line numbers; semantic errors name the offending field.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from typing import Any

DEFAULT_SEED = 0x5EED_CAFE
DEFAULT_TRIALS = 1000


class ConfigError(Exception):
    """Malformed config text (syntax) or invalid field values."""


class UnsupportedScenarioError(ConfigError):
    """Scenario requires a feature the selected profile does not model."""


class HistoryKind(str, Enum):
    PURE_PHR = "pure_phr"
    HYBRID_BHB_PHR = "hybrid_bhb_phr"


class ScenarioId(str, Enum):
    BIASSCOPE = "biasscope"
    SPECTRE_BSE = "spectre-bse"
    SPECTRE_BHS_MISTRAIN = "spectre-bhs-mistrain"
    SPECTRE_BHS_EVICT = "spectre-bhs-evict"
    CHIMERA = "chimera"
    THRESHOLD_SWEEP = "threshold-sweep"
    WINDOW_SWEEP = "window-sweep"


@dataclass(frozen=True)
class MitigationSet:
    bhb_clear_on_privilege_switch: bool = False
    bpu_flush_on_context_switch: bool = False
    context_tagging: bool = False


@dataclass(frozen=True)
class MicroarchProfile:
    name: str
    history_kind: HistoryKind
    phr_capacity: int
    phr_footprint_bits: int
    phr_source_lo: int
    phr_source_hi: int
    bhb_capacity: int = 0
    conditional_updates_phr: bool = False
    bias_free_enabled: bool = False
    bst_entries: int = 4096
    bst_index_lo: int = 4
    bst_index_hi: int = 15
    btb_evict_threshold: int = 4
    tage_history_lengths: tuple[int, ...] = (0, 2, 4, 8)
    fallback_to_t0: bool = True
    pc_indexed_pressure: bool = False
    speculation_window_budget: int = 128
    mitigations: MitigationSet = field(default_factory=MitigationSet)
    assumed: tuple[str, ...] = ()

    @property
    def hybrid(self) -> bool:
        return self.history_kind is HistoryKind.HYBRID_BHB_PHR

    def validate(self) -> None:
        if not self.name:
            raise ConfigError("profile field 'name' must be non-empty")
        if self.phr_capacity <= 0:
            raise ConfigError("profile field 'phr_capacity' must be > 0")
        if self.hybrid and self.bhb_capacity <= 0:
            raise ConfigError(
                "profile field 'bhb_capacity' must be > 0 for hybrid_bhb_phr")
        if self.phr_footprint_bits <= 0:
            raise ConfigError("profile field 'phr_footprint_bits' must be > 0")
        if self.phr_source_hi <= self.phr_source_lo:
            raise ConfigError(
                "profile field 'phr_source_hi' must exceed 'phr_source_lo'")
        if self.phr_source_hi - self.phr_source_lo + 1 != self.phr_footprint_bits:
            raise ConfigError(
                "profile field 'phr_source_lo/hi' range width must equal "
                "'phr_footprint_bits'")
        if self.bst_index_hi <= self.bst_index_lo:
            raise ConfigError(
                "profile field 'bst_index_hi' must exceed 'bst_index_lo'")
        if 1 << (self.bst_index_hi - self.bst_index_lo + 1) != self.bst_entries:
            raise ConfigError(
                "profile field 'bst_entries' must equal "
                "2^(bst_index_hi-bst_index_lo+1)")
        if self.btb_evict_threshold < 1:
            raise ConfigError("profile field 'btb_evict_threshold' must be >= 1")
        lens = self.tage_history_lengths
        if not lens or lens[0] != 0:
            raise ConfigError(
                "profile field 'tage_history_lengths' must start with 0")
        if any(b <= a for a, b in zip(lens, lens[1:])):
            raise ConfigError(
                "profile field 'tage_history_lengths' must be strictly increasing")
        if self.speculation_window_budget <= 0:
            raise ConfigError(
                "profile field 'speculation_window_budget' must be > 0")

    def with_mitigations(self, **flags: bool) -> "MicroarchProfile":
        return replace(self, mitigations=replace(self.mitigations, **flags))


# ---------------------------------------------------------------------------
# key/value config text: parse and emit
# ---------------------------------------------------------------------------

_INT_RE = re.compile(r"^-?(0x[0-9a-fA-F_]+|\d+)$")


def _parse_scalar(token: str, lineno: int) -> Any:
    if token in ("true", "false"):
        return token == "true"
    if _INT_RE.match(token):
        return int(token, 0)
    if re.match(r"^[A-Za-z0-9_.\-/]+$", token):
        return token
    raise ConfigError(f"line {lineno}: cannot parse value {token!r}")


def parse_config_text(text: str) -> dict:
    """Parse the key/value grammar of docs/config.md into nested dicts."""
    root: dict = {}
    stack = [root]
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line == "}":
            if len(stack) == 1:
                raise ConfigError(f"line {lineno}: unmatched '}}'")
            stack.pop()
            continue
        m = re.match(r"^([A-Za-z_][A-Za-z0-9_]*)\s*\{$", line)
        if m:
            section: dict = {}
            stack[-1][m.group(1)] = section
            stack.append(section)
            continue
        m = re.match(r"^([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.+)$", line)
        if not m:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = m.group(1), m.group(2).strip()
        if value.startswith("["):
            if not value.endswith("]"):
                raise ConfigError(f"line {lineno}: unterminated list for {key!r}")
            inner = value[1:-1].strip()
            items = [s.strip() for s in inner.split(",")] if inner else []
            stack[-1][key] = [_parse_scalar(s, lineno) for s in items]
        else:
            stack[-1][key] = _parse_scalar(value, lineno)
    if len(stack) != 1:
        raise ConfigError("unterminated section: missing '}'")
    return root


def _emit_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_emit_value(v) for v in value) + "]"
    return str(value)


def emit_config_text(data: dict, indent: int = 0) -> str:
    lines = []
    pad = "  " * indent
    for key, value in data.items():
        if isinstance(value, dict):
            lines.append(f"{pad}{key} {{")
            lines.append(emit_config_text(value, indent + 1))
            lines.append(f"{pad}}}")
        else:
            lines.append(f"{pad}{key} = {_emit_value(value)}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# profile load / save
# ---------------------------------------------------------------------------

_PROFILE_INT_FIELDS = (
    "phr_capacity", "phr_footprint_bits", "phr_source_lo", "phr_source_hi",
    "bhb_capacity", "bst_entries", "bst_index_lo", "bst_index_hi",
    "btb_evict_threshold", "speculation_window_budget",
)
_PROFILE_BOOL_FIELDS = (
    "conditional_updates_phr", "bias_free_enabled", "fallback_to_t0",
    "pc_indexed_pressure",
)


def load_profile(text: str) -> MicroarchProfile:
    """Parse and validate a profile from config text."""
    data = parse_config_text(text)
    if "name" not in data:
        raise ConfigError("profile field 'name' is missing")
    try:
        kind = HistoryKind(data.get("history_kind", ""))
    except ValueError:
        raise ConfigError(
            "profile field 'history_kind' must be pure_phr or hybrid_bhb_phr")
    kwargs: dict[str, Any] = {"name": str(data["name"]), "history_kind": kind}
    for f in _PROFILE_INT_FIELDS:
        if f in data:
            if not isinstance(data[f], int) or isinstance(data[f], bool):
                raise ConfigError(f"profile field {f!r} must be an integer")
            kwargs[f] = data[f]
    for f in _PROFILE_BOOL_FIELDS:
        if f in data:
            if not isinstance(data[f], bool):
                raise ConfigError(f"profile field {f!r} must be true/false")
            kwargs[f] = data[f]
    if "tage_history_lengths" in data:
        lens = data["tage_history_lengths"]
        if not isinstance(lens, list) or not all(
                isinstance(v, int) and not isinstance(v, bool) for v in lens):
            raise ConfigError(
                "profile field 'tage_history_lengths' must be an integer list")
        kwargs["tage_history_lengths"] = tuple(lens)
    if "assumed" in data:
        kwargs["assumed"] = tuple(str(v) for v in data["assumed"])
    mit = data.get("mitigations", {})
    if not isinstance(mit, dict):
        raise ConfigError("profile field 'mitigations' must be a section")
    for k in mit:
        if k not in MitigationSet.__dataclass_fields__:
            raise ConfigError(f"unknown mitigation flag {k!r}")
    kwargs["mitigations"] = MitigationSet(**mit)

    known = set(_PROFILE_INT_FIELDS) | set(_PROFILE_BOOL_FIELDS) | {
        "name", "history_kind", "tage_history_lengths", "assumed", "mitigations"}
    for k in data:
        if k not in known:
            raise ConfigError(f"unknown profile field {k!r}")

    profile = MicroarchProfile(**kwargs)
    profile.validate()
    return profile


def serialize_profile(profile: MicroarchProfile) -> str:
    data: dict[str, Any] = {
        "name": profile.name,
        "history_kind": profile.history_kind.value,
    }
    for f in _PROFILE_INT_FIELDS:
        data[f] = getattr(profile, f)
    for f in _PROFILE_BOOL_FIELDS:
        data[f] = getattr(profile, f)
    data["tage_history_lengths"] = list(profile.tage_history_lengths)
    if profile.assumed:
        data["assumed"] = list(profile.assumed)
    data["mitigations"] = {
        "bhb_clear_on_privilege_switch": profile.mitigations.bhb_clear_on_privilege_switch,
        "bpu_flush_on_context_switch": profile.mitigations.bpu_flush_on_context_switch,
        "context_tagging": profile.mitigations.context_tagging,
    }
    return emit_config_text(data) + "\n"


BUILTIN_PROFILE_NAMES = (
    "cortex-a72", "cortex-a76", "cortex-a78ae",
    "zen4", "gracemont", "redwood-cove",
)


def builtin_profile_text(name: str) -> str:
    if name not in BUILTIN_PROFILE_NAMES:
        raise ConfigError(f"unknown built-in profile {name!r}")
    res = resources.files("bhsim").joinpath("profiles", f"{name}.cfg")
    return res.read_text()


def builtin_profile(name: str) -> MicroarchProfile:
    return load_profile(builtin_profile_text(name))


# ---------------------------------------------------------------------------
# scenario specs
# ---------------------------------------------------------------------------

@dataclass
class ScenarioSpec:
    scenario: ScenarioId
    profile: MicroarchProfile
    trials: int = DEFAULT_TRIALS
    noise: float = 0.0
    seed: int = DEFAULT_SEED
    params: dict = field(default_factory=dict)


# Per-scenario address parameters.  If a spec supplies any key of a group it
# must supply the whole group; otherwise canonical defaults are generated.
_ADDRESS_GROUPS: dict[ScenarioId, tuple[str, ...]] = {
    ScenarioId.SPECTRE_BSE: ("bh_addrs", "bi_pred", "bx_evict", "t_leak", "t_safe", "b_ev"),
    ScenarioId.BIASSCOPE: ("bh_addrs", "bi_pred", "bx_prime_addrs", "sender_addrs",
                           "t_primary", "t_alt"),
    ScenarioId.SPECTRE_BHS_MISTRAIN: ("bx_prime", "bi_pred", "t_leak", "t_safe"),
    ScenarioId.SPECTRE_BHS_EVICT: ("bx_prime", "bi_pred", "t_leak", "t_safe"),
    ScenarioId.CHIMERA: ("line_addrs", "shuffle_branch", "secret_addr", "legit_addr"),
    ScenarioId.THRESHOLD_SWEEP: ("victim_pc", "dc_signal"),
    ScenarioId.WINDOW_SWEEP: ("bx_prime", "bi_pred", "t_leak", "t_safe"),
}

_CHIMERA_LINES = ("line2", "line3", "line5", "line7", "line8", "line10")


def default_params(scenario: ScenarioId, profile: MicroarchProfile) -> dict:
    """Canonical address plan for a scenario (documented in docs/config.md).

    Branch addresses are chosen so that intentional aliases share the BST
    index bits while everything else stays apart in both BST and BTB index
    space.
    """
    p: dict[str, Any] = {}
    if scenario is ScenarioId.SPECTRE_BSE:
        bh = [0x0041_0000 + i * 0x40 for i in range(5)]
        p = {
            "bh_addrs": bh,
            "bi_pred": 0x0041_5000,
            # shares bits [15:4] (and more) with bh[4]; differs above bit 24
            "bx_evict": bh[4] + 0x0100_0000,
            "t_leak": 0x0042_0000,
            "t_safe": 0x0042_1000,
            "b_ev": [bh[4]],
            "context_mode": "intra",
        }
    elif scenario is ScenarioId.BIASSCOPE:
        primes = [0x0043_1800 + i * 0x80 for i in range(8)]
        p = {
            "bh_addrs": [0x0041_0000 + i * 0x40 for i in range(4)],
            "bi_pred": 0x0041_5000,
            "bx_prime_addrs": primes,
            "sender_addrs": [a + 0x0100_0000 for a in primes],
            "t_primary": 0x0042_0000,
            "t_alt": 0x0042_1000,
            "secret_byte": 0b1011_0010,
            "context_mode": "intra",
        }
    elif scenario in (ScenarioId.SPECTRE_BHS_MISTRAIN, ScenarioId.SPECTRE_BHS_EVICT,
                      ScenarioId.WINDOW_SWEEP):
        p = {
            "bx_prime": 0x0041_2000,
            "bi_pred": 0x0041_5000,
            "t_leak": 0x0042_0000,
            "t_safe": 0x0042_1000,
            "barrier": False,
            "context_mode": "intra",
        }
        if scenario is ScenarioId.WINDOW_SWEEP:
            p["budget"] = profile.speculation_window_budget
            p["prefix_lengths"] = [0, 16, 64, 100,
                                   profile.speculation_window_budget - 1,
                                   profile.speculation_window_budget,
                                   profile.speculation_window_budget + 1,
                                   profile.speculation_window_budget + 32, 200]
    elif scenario is ScenarioId.CHIMERA:
        p = {
            "line_addrs": {name: 0x0045_0000 + i * 0x100
                           for i, name in enumerate(_CHIMERA_LINES)},
            "shuffle_branch": 0x0045_0300,  # == line7
            "secret_addr": 0x00A0_0000,
            "legit_addr": 0x00B0_0000,
        }
        p["line_addrs"]["line7"] = p["shuffle_branch"]
    elif scenario is ScenarioId.THRESHOLD_SWEEP:
        p = {
            "victim_pc": 0x0041_9C00,
            "dc_signal": 0x00C0_0000,
            "k_values": list(range(0, 9)),
            "init_bias": "both",       # nt | tt | both
            "history_mode": "both",    # matching | different | both
        }
    return p


def validate_scenario(spec: ScenarioSpec) -> ScenarioSpec:
    """Resolve defaults and check scenario-specific parameter consistency."""
    if spec.trials < 1:
        raise ConfigError("scenario field 'trials' must be >= 1")
    if not 0.0 <= spec.noise <= 1.0:
        raise ConfigError("scenario field 'noise' must lie in [0, 1]")
    spec.profile.validate()

    group = _ADDRESS_GROUPS[spec.scenario]
    given = [k for k in group if k in spec.params]
    if given and len(given) != len(group):
        missing = sorted(set(group) - set(given))
        raise ConfigError(
            f"scenario {spec.scenario.value}: missing parameters {missing} "
            f"(address parameters must be given all together)")
    defaults = default_params(spec.scenario, spec.profile)
    merged = dict(defaults)
    merged.update(spec.params)
    spec.params = merged

    if spec.scenario in (ScenarioId.SPECTRE_BSE, ScenarioId.BIASSCOPE):
        if not spec.profile.bias_free_enabled:
            raise UnsupportedScenarioError(
                f"scenario {spec.scenario.value} requires a profile with "
                f"bias_free_enabled (bias-free filtering is not modeled on "
                f"{spec.profile.name})")
    if spec.scenario is ScenarioId.SPECTRE_BSE:
        bh = spec.params["bh_addrs"]
        bad = [hex(a) for a in spec.params["b_ev"] if a not in bh]
        if bad:
            raise ConfigError(
                f"scenario spectre-bse: b_ev members {bad} are not in bh_addrs")
        branches = list(bh) + [spec.params["bi_pred"], spec.params["bx_evict"]]
        if len(set(branches)) != len(branches):
            raise ConfigError("scenario spectre-bse: branch addresses must be distinct")
    if spec.scenario is ScenarioId.BIASSCOPE:
        primes = spec.params["bx_prime_addrs"]
        senders = spec.params["sender_addrs"]
        if len(primes) != 8 or len(senders) != 8:
            raise ConfigError("scenario biasscope: needs 8 prime and 8 sender addresses")
        lo, hi = spec.profile.bst_index_lo, spec.profile.bst_index_hi
        width = hi - lo + 1
        idx = [(a >> lo) & ((1 << width) - 1) for a in primes]
        if len(set(idx)) != 8:
            raise ConfigError(
                "scenario biasscope: bx_prime addresses must have distinct "
                f"bits [{hi}:{lo}] to avoid self-aliasing")
    if spec.scenario is ScenarioId.CHIMERA:
        lines = spec.params["line_addrs"]
        missing = [k for k in _CHIMERA_LINES if k not in lines]
        if missing:
            raise ConfigError(f"scenario chimera: missing line addresses {missing}")
        if "shuffle_branch" not in spec.params:
            raise ConfigError("scenario chimera: missing parameter 'shuffle_branch'")
    if spec.scenario is ScenarioId.THRESHOLD_SWEEP:
        ks = spec.params["k_values"]
        limit = max(8, spec.profile.btb_evict_threshold)
        if any(k < 0 or k > limit for k in ks):
            raise ConfigError(
                f"scenario threshold-sweep: k_values must lie in [0, {limit}]")
    return spec


def load_scenario(text: str, profile: MicroarchProfile | None = None) -> ScenarioSpec:
    """Load a scenario spec from config text.

    The file may name a built-in profile (`profile = cortex-a72`); an
    explicitly passed profile overrides it.
    """
    data = parse_config_text(text)
    if "scenario" not in data:
        raise ConfigError("scenario field 'scenario' is missing")
    try:
        sid = ScenarioId(str(data.pop("scenario")))
    except ValueError as e:
        raise ConfigError(f"unknown scenario id: {e}")
    if profile is None:
        pname = data.pop("profile", None)
        if pname is None:
            raise ConfigError("scenario field 'profile' is missing")
        profile = builtin_profile(str(pname))
    else:
        data.pop("profile", None)
    spec = ScenarioSpec(
        scenario=sid,
        profile=profile,
        trials=int(data.pop("trials", DEFAULT_TRIALS)),
        noise=float(data.pop("noise", 0.0)),
        seed=int(data.pop("seed", DEFAULT_SEED)),
        params=data.pop("params", {}),
    )
    for k in data:
        raise ConfigError(f"unknown scenario field {k!r}")
    return validate_scenario(spec)
