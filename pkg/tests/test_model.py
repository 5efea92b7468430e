from __future__ import annotations

import ipaddress
import json
from datetime import datetime, timedelta, timezone

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from threatgap.errors import EmptyValue, MalformedIp, RecordError, UnknownTechnique
from threatgap.model import (
    AggregateMeta,
    Alert,
    Entity,
    EntityKind,
    EventRow,
    Incident,
    Phase,
    Severity,
    attack_catalog,
    canonical_json,
    dump_incidents,
    format_time,
    is_known_technique,
    load_incidents,
    normalize_entity,
    parse_time,
    phase_of_technique,
)

from helpers import T0, make_alert, make_incident

NON_IP_KINDS = [k for k in EntityKind if k is not EntityKind.IP]


def ipv4_oracle(raw: str) -> str:
    # decimal octets, leading zeros dropped, validated by the stdlib parser
    return str(ipaddress.IPv4Address(bytes(int(p, 10) for p in raw.split("."))))


class TestNormalizeEntity:
    def test_user_is_trimmed_and_case_folded(self):
        assert normalize_entity(EntityKind.USER, "ALICE@Corp.COM ") == Entity(EntityKind.USER, "alice@corp.com")

    def test_ip_leading_zero_octet(self):
        e = normalize_entity("Ip", "010.0.0.1")
        assert e == Entity(EntityKind.IP, ipv4_oracle("010.0.0.1"))
        assert e.value == "10.0.0.1"

    def test_already_normalized_is_unchanged(self):
        e = normalize_entity(EntityKind.USER, "alice@corp.com")
        assert e.value == "alice@corp.com"
        assert normalize_entity(e.kind, e.value) == e

    @pytest.mark.parametrize("raw", ["", "   ", "\t\n"])
    def test_empty_value(self, raw):
        with pytest.raises(EmptyValue):
            normalize_entity(EntityKind.DEVICE, raw)

    @pytest.mark.parametrize("raw", ["300.1.1.1", "1.2.3", "host.example", "1.2.3.4.5", "::g"])
    def test_malformed_ip(self, raw):
        with pytest.raises(MalformedIp):
            normalize_entity(EntityKind.IP, raw)

    def test_ipv6_is_compressed_and_mapped_v4_unwrapped(self):
        assert normalize_entity("Ip", "2001:0DB8:0000:0000:0000:0000:0000:0001").value == "2001:db8::1"
        assert normalize_entity("Ip", "::ffff:192.0.2.7").value == "192.0.2.7"

    def test_unnormalized_direct_construction_rejected(self):
        with pytest.raises(EmptyValue):
            Entity(EntityKind.USER, "Alice")

    def test_token_round_trip(self):
        e = normalize_entity("Url", "https://Example.test/a")
        assert Entity.parse(e.token) == e
        with pytest.raises(RecordError):
            Entity.parse("no-colon")
        with pytest.raises(RecordError):
            Entity.parse("Planet:earth")

    @given(st.sampled_from(NON_IP_KINDS), st.text(min_size=1).filter(lambda s: s.strip()))
    def test_idempotent(self, kind, raw):
        once = normalize_entity(kind, raw)
        assert normalize_entity(kind, once.value) == once
        assert once.value == once.value.strip()

    @given(st.ip_addresses())
    def test_ip_canonical_matches_stdlib(self, addr):
        e = normalize_entity(EntityKind.IP, str(addr))
        expected = addr.ipv4_mapped if getattr(addr, "ipv4_mapped", None) else addr
        assert ipaddress.ip_address(e.value) == expected
        assert normalize_entity(EntityKind.IP, e.value) == e

    @given(st.sampled_from(NON_IP_KINDS), st.text(min_size=1).filter(lambda s: s.strip()))
    def test_equality_invariant_under_renormalization(self, kind, raw):
        a = normalize_entity(kind, raw)
        b = normalize_entity(kind, " " + raw.upper() + " ")
        if raw.upper().casefold() == raw.casefold():
            assert a == b and hash(a) == hash(b)


class TestPhaseOfTechnique:
    # tactic assignments from the public ATT&CK enterprise matrix
    PUBLIC_MATRIX = {
        "T1566": ("initial-access",),
        "T1059": ("execution",),
        "T1486": ("impact",),
        "T1078": ("defense-evasion", "persistence", "privilege-escalation", "initial-access"),
        "T1053": ("execution", "persistence", "privilege-escalation"),
        "T1021": ("lateral-movement",),
    }

    @staticmethod
    def bucket(tactics):
        if "initial-access" in tactics:
            return Phase.INITIAL_ACCESS
        if "execution" in tactics:
            return Phase.EXECUTION
        return Phase.POST_COMPROMISE

    def test_reference_examples(self):
        assert phase_of_technique("T1566") is Phase.INITIAL_ACCESS
        assert phase_of_technique("T1059") is Phase.EXECUTION
        assert phase_of_technique("T1486") is Phase.POST_COMPROMISE

    @pytest.mark.parametrize("tech", sorted(PUBLIC_MATRIX))
    def test_shipped_mapping_agrees_with_public_matrix(self, tech):
        assert set(attack_catalog()[tech]["tactics"]) == set(self.PUBLIC_MATRIX[tech])
        assert phase_of_technique(tech) is self.bucket(self.PUBLIC_MATRIX[tech])

    def test_subtechnique_inherits_parent(self):
        assert phase_of_technique("T1566.001") is Phase.INITIAL_ACCESS
        assert phase_of_technique("T1059.001") is Phase.EXECUTION

    @pytest.mark.parametrize("bad", ["T9999", "T123", "X1566", "", "T1566.1"])
    def test_unknown(self, bad):
        with pytest.raises(UnknownTechnique):
            phase_of_technique(bad)
        assert not is_known_technique(bad)

    def test_total_over_catalog(self):
        for tech, info in attack_catalog().items():
            assert phase_of_technique(tech) is self.bucket(info["tactics"])


class TestAlertAndIncident:
    def test_alert_phase_must_match_first_technique(self):
        with pytest.raises(RecordError):
            Alert("a1", "d", "t", Severity.HIGH, ("T1486",), Phase.EXECUTION,
                  frozenset({normalize_entity("User", "u")}), T0)

    def test_multi_technique_alert_takes_first(self):
        a = make_alert("a1", ["T1566", "T1204"], ["User:u"])
        assert a.phase is Phase.INITIAL_ACCESS
        with pytest.raises(RecordError):
            Alert("a2", "d", "t", "High", ("T1566", "T1204"), "Execution", a.entities, T0)

    def test_unknown_technique_in_alert_rejected(self):
        with pytest.raises(UnknownTechnique):
            Alert("a1", "d", "t", "High", ("T1566", "T9999"), "InitialAccess",
                  frozenset({normalize_entity("User", "u")}), T0)

    def test_incident_entities_union(self):
        inc = make_incident([make_alert("a1", ["T1566"], ["User:u"]), make_alert("a2", ["T1486"], ["Device:d"])])
        assert {e.token for e in inc.entities} == {"User:u", "Device:d"}
        assert inc.phases == {Phase.INITIAL_ACCESS, Phase.POST_COMPROMISE}

    def test_incident_invariants(self):
        a = make_alert("a1", ["T1566"], ["User:u"])
        with pytest.raises(RecordError):
            Incident("i", (), "x", 0.5, T0)
        with pytest.raises(RecordError):
            Incident("i", (a,), "x", 1.5, T0)
        with pytest.raises(RecordError):
            Incident("i", (a, a), "x", 0.5, T0)

    def test_incident_jsonl_round_trip(self, tmp_path):
        inc = make_incident([make_alert("a1", ["T1566"], ["User:u", "Ip:10.0.0.1"]),
                             make_alert("a2", ["T1486"], ["Device:d"], detector="det-b")])
        path = tmp_path / "inc.jsonl"
        dump_incidents(path, [inc, inc])
        assert load_incidents(path) == [inc, inc]

    def test_load_reports_line_of_bad_record(self, tmp_path):
        inc = make_incident([make_alert("a1", ["T1566"], ["User:u"])])
        bad = inc.to_dict()
        bad["alerts"][0]["phase"] = "Execution"
        path = tmp_path / "inc.jsonl"
        path.write_text(canonical_json(inc.to_dict()) + "\n" + json.dumps(bad) + "\n")
        with pytest.raises(RecordError, match=":2:"):
            load_incidents(path)

    def test_timestamps_need_offset(self):
        with pytest.raises(RecordError):
            parse_time("2024-05-01T12:00:00")
        assert parse_time("2024-05-01T14:00:00+02:00") == T0
        assert format_time(T0) == "2024-05-01T12:00:00Z"


class TestEventRow:
    def test_non_aggregate_needs_entities(self):
        with pytest.raises(RecordError):
            EventRow("r", "T", T0, frozenset(), frozenset(), {})

    def test_aggregate_flag_matches_meta(self):
        meta = AggregateMeta((("action", "x"),), 3, 1, {"c": (1,)}, ("a", "b", "c"))
        with pytest.raises(RecordError):
            EventRow("r", "T", T0, frozenset(), frozenset(), {}, is_aggregate=False, aggregate_meta=meta)
        with pytest.raises(RecordError):
            EventRow("r", "T", T0, frozenset(), frozenset(), {}, is_aggregate=True)
        row = EventRow("r", "T", T0, frozenset(), frozenset(), {"action": "x"}, True, meta)
        assert row.covered_row_ids() == ("a", "b", "c")
        assert EventRow.from_dict(json.loads(canonical_json(row.to_dict()))) == row


# ---------------------------------------------------------------------------
# serialization round trips


_value = st.text(alphabet=st.characters(blacklist_categories=("Cs", "Zs", "Cc")), min_size=1, max_size=12)
entities = st.builds(
    lambda kind, raw: normalize_entity(kind, raw),
    st.sampled_from(NON_IP_KINDS),
    _value,
) | st.builds(lambda a: normalize_entity(EntityKind.IP, str(a)), st.ip_addresses(v=4))
times = st.integers(0, 10**9).map(lambda s: datetime(2020, 1, 1, tzinfo=timezone.utc) + timedelta(seconds=s))
scalars = st.none() | st.integers(-(10**6), 10**6) | st.booleans() | st.text(max_size=8)
techniques = st.sampled_from(sorted(attack_catalog()))


@st.composite
def event_rows(draw):
    pivots = draw(st.frozensets(entities, max_size=3))
    related = draw(st.frozensets(entities, min_size=0 if pivots else 1, max_size=3)) - pivots
    if not pivots and not related:
        related = frozenset({normalize_entity("User", "fallback")})
    attrs = draw(st.dictionaries(st.text(min_size=1, max_size=6), scalars, max_size=4))
    return EventRow(draw(st.text(min_size=1, max_size=10)), "T", draw(times), pivots, related, attrs,
                    is_alert_row=draw(st.booleans()))


@st.composite
def alerts(draw, alert_id=None):
    techs = draw(st.lists(techniques, min_size=1, max_size=3, unique=True))
    return Alert(
        alert_id or draw(st.text(min_size=1, max_size=8)),
        draw(st.text(min_size=1, max_size=8)),
        draw(st.text(max_size=20)),
        draw(st.sampled_from(list(Severity))),
        tuple(techs),
        phase_of_technique(techs[0]),
        draw(st.frozensets(entities, min_size=1, max_size=3)),
        draw(times),
    )


@st.composite
def incidents(draw):
    n = draw(st.integers(1, 4))
    als = tuple(draw(alerts(alert_id=f"a{i}")) for i in range(n))
    return Incident(draw(st.text(min_size=1, max_size=8)), als, draw(st.sampled_from(["ransomware", "x"])),
                    draw(st.floats(0, 1)), draw(times))


class TestRoundTrip:
    @given(entities)
    def test_entity(self, e):
        assert Entity.from_dict(json.loads(canonical_json(e.to_dict()))) == e

    @given(event_rows())
    def test_event_row(self, row):
        assert EventRow.from_dict(json.loads(canonical_json(row.to_dict()))) == row

    @given(alerts())
    def test_alert(self, a):
        assert Alert.from_dict(json.loads(canonical_json(a.to_dict()))) == a

    @settings(max_examples=50)
    @given(incidents())
    def test_incident(self, inc):
        assert Incident.from_dict(json.loads(canonical_json(inc.to_dict()))) == inc
