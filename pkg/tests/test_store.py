from __future__ import annotations

import json
from collections import Counter
from datetime import datetime, timedelta, timezone

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from threatgap.errors import DuplicateTable, EmptyRowSet, SchemaViolation, UnknownTable
from threatgap.model import EntityKind, format_time, normalize_entity, parse_time, write_jsonl
from threatgap.store import ColumnSpec, QuerySpec, TableSchema, TelemetryStore, column_stats

from helpers import T0, make_row

SIGNIN = TableSchema(
    "SignIn",
    "Account sign-ins",
    (
        ColumnSpec("user", "string", EntityKind.USER),
        ColumnSpec("ip", "string", EntityKind.IP),
        ColumnSpec("action", "string"),
        ColumnSpec("attempts", "int"),
        ColumnSpec("seen_at", "timestamp"),
    ),
)
USERS = ["alice@corp.com", "bob@corp.com", "carol@corp.com", "dave@corp.com"]
IPS = ["10.0.0.1", "10.0.0.2", "203.0.113.7"]
START = datetime(2024, 5, 1, tzinfo=timezone.utc)


def ts(hours: float) -> str:
    return format_time(START + timedelta(hours=hours))


def signin_records(n: int = 1000):
    out = []
    for i in range(n):
        out.append({
            "row_id": f"s{i:05d}",
            "timestamp": ts(i * 0.1),
            "user": USERS[i % 4].upper() if i % 7 == 0 else USERS[i % 4],
            "ip": IPS[i % 3] if i % 5 else None,
            "action": "login" if i % 3 else "logout",
            "attempts": i % 4,
            "seen_at": ts(i * 0.1),
        })
    return out


def brute_force(records, schema, entities, start, end, cap):
    """Linear scan over the raw records under the query predicate."""
    hits = []
    for rec in records:
        t = parse_time(rec["timestamp"])
        if not start <= t <= end:
            continue
        row_ents = {normalize_entity(c.entity_kind, rec[c.name])
                    for c in schema.pivotable_columns if rec.get(c.name) is not None}
        if row_ents & entities:
            hits.append((t, rec["row_id"], row_ents & entities, row_ents - entities))
    hits.sort(key=lambda h: (h[0], h[1]))
    return hits[:cap], len(hits) > cap


class TestRegistration:
    def test_load_what_you_wrote(self, tmp_path):
        path = tmp_path / "signin.jsonl"
        write_jsonl(path, signin_records(1000))
        store = TelemetryStore()
        handle = store.register_table(SIGNIN, path)
        assert handle.row_count() == 1000
        assert store.row_count("SignIn") == 1000

    def test_string_in_int_column(self):
        recs = signin_records(3)
        recs[1]["attempts"] = "three"
        with pytest.raises(SchemaViolation) as info:
            TelemetryStore().register_records(SIGNIN, recs)
        assert (info.value.row_number, info.value.column) == (2, "attempts")

    def test_zero_pivotable_columns_rejected(self):
        with pytest.raises(SchemaViolation):
            TableSchema("X", "no entities", (ColumnSpec("action", "string"),))

    def test_duplicate_columns_and_tables(self):
        with pytest.raises(SchemaViolation):
            TableSchema("X", "", (ColumnSpec("u", "string", "User"), ColumnSpec("u", "string")))
        store = TelemetryStore()
        store.register_records(SIGNIN, signin_records(2))
        with pytest.raises(DuplicateTable):
            store.register_records(SIGNIN, signin_records(2))

    def test_bool_is_not_an_int(self):
        recs = signin_records(1)
        recs[0]["attempts"] = True
        with pytest.raises(SchemaViolation):
            TelemetryStore().register_records(SIGNIN, recs)

    def test_unknown_column_and_missing_entities(self):
        recs = signin_records(2)
        recs[0]["extra"] = 1
        with pytest.raises(SchemaViolation):
            TelemetryStore().register_records(SIGNIN, recs)
        recs = signin_records(2)
        recs[1]["user"] = None
        recs[1]["ip"] = None
        with pytest.raises(SchemaViolation):
            TelemetryStore().register_records(SIGNIN, recs)

    def test_manifest(self, tmp_path):
        write_jsonl(tmp_path / "s.jsonl", signin_records(10))
        (tmp_path / "m.json").write_text(json.dumps({"tables": [{**SIGNIN.to_dict(), "data": "s.jsonl"}]}))
        store = TelemetryStore()
        store.load_manifest(tmp_path / "m.json")
        assert store.schema("SignIn") == SIGNIN
        with pytest.raises(UnknownTable):
            store.schema("Nope")


class TestQuery:
    @pytest.fixture(scope="class")
    @classmethod
    def store(cls):
        st_ = TelemetryStore()
        st_.register_records(SIGNIN, cls.records())
        return st_

    @staticmethod
    def records():
        recs = signin_records(200)
        # alice appears in exactly 7 rows of this table
        for i, r in enumerate(recs):
            if r["user"].casefold() == "alice@corp.com":
                r["user"] = "erin@corp.com"
        for k, i in enumerate([3, 17, 40, 41, 90, 150, 199]):
            recs[i]["user"] = "Alice@Corp.com" if k % 2 else "alice@corp.com"
        return recs

    def test_alice_seven_rows(self, store):
        alice = normalize_entity("User", "alice@corp.com")
        res = store.query_events(QuerySpec("SignIn", {alice}, START - timedelta(hours=1), START + timedelta(hours=30)))
        expected, _ = brute_force(self.records(), SIGNIN, {alice}, START - timedelta(hours=1),
                                  START + timedelta(hours=30), 10**6)
        assert len(res) == 7 and not res.truncated
        assert [r.row_id for r in res] == [h[1] for h in expected]
        assert all(alice in r.pivot_entities for r in res)
        assert all(alice not in r.related_entities for r in res)

    def test_absent_entity(self, store):
        bob = normalize_entity("User", "bob-not-present")
        assert len(store.query_events(QuerySpec("SignIn", {bob}, START, START + timedelta(hours=30)))) == 0

    def test_row_cap_keeps_earliest(self, store):
        alice = normalize_entity("User", "alice@corp.com")
        res = store.query_events(QuerySpec("SignIn", {alice}, START, START + timedelta(hours=30), row_cap=5))
        assert res.truncated and res.matched == 7
        assert [r.row_id for r in res] == ["s00003", "s00017", "s00040", "s00041", "s00090"]

    def test_unknown_table(self, store):
        with pytest.raises(UnknownTable):
            store.query_events(QuerySpec("Nope", {normalize_entity("User", "x")}, START, START + timedelta(hours=1)))

    def test_window_limit(self):
        store = TelemetryStore(max_lookback_hours=24)
        store.register_records(SIGNIN, signin_records(5))
        with pytest.raises(ValueError):
            store.query_events(QuerySpec("SignIn", {normalize_entity("User", USERS[0])}, START, START + timedelta(hours=25)))

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            QuerySpec("SignIn", set(), START, START + timedelta(hours=1))
        with pytest.raises(ValueError):
            QuerySpec("SignIn", {normalize_entity("User", "x")}, START, START)
        with pytest.raises(ValueError):
            QuerySpec("SignIn", {normalize_entity("User", "x")}, START, START + timedelta(hours=1), row_cap=0)

    def test_repeated_queries_are_stable(self, store):
        spec = QuerySpec("SignIn", {normalize_entity("Ip", "10.0.0.1")}, START, START + timedelta(hours=20))
        assert store.query_events(spec) == store.query_events(spec)


# ---------------------------------------------------------------------------
# randomized equivalence with a linear scan

POOL_U = ["u0", "u1", "U2", " u3", "u4"]
POOL_I = ["10.0.0.1", "010.0.0.2", "10.0.0.3", "::ffff:10.0.0.1"]


@st.composite
def random_store(draw, max_rows=60):
    n = draw(st.integers(0, max_rows))
    recs = []
    for i in range(n):
        user = draw(st.none() | st.sampled_from(POOL_U))
        ip = draw(st.sampled_from(POOL_I)) if user is None else draw(st.none() | st.sampled_from(POOL_I))
        recs.append({
            "row_id": f"r{draw(st.integers(0, 10**6)):07d}-{i}",
            "timestamp": format_time(START + timedelta(seconds=draw(st.integers(0, 72 * 3600)))),
            "user": user, "ip": ip,
            "action": draw(st.sampled_from(["a", "b", None])),
            "attempts": draw(st.none() | st.integers(0, 3)),
            "seen_at": None,
        })
    return recs


@st.composite
def random_query(draw):
    ents = draw(st.sets(
        st.builds(lambda u: normalize_entity("User", u), st.sampled_from(POOL_U + ["zz"]))
        | st.builds(lambda i: normalize_entity("Ip", i), st.sampled_from(POOL_I)),
        min_size=1, max_size=3))
    a = draw(st.integers(-3600, 72 * 3600))
    b = draw(st.integers(a + 1, 80 * 3600))
    return ents, START + timedelta(seconds=a), START + timedelta(seconds=b), draw(st.integers(1, 30))


def check_query_equivalence(records, query):
    ents, start, end, cap = query
    store = TelemetryStore()
    store.register_records(SIGNIN, records)
    res = store.query_events(QuerySpec("SignIn", ents, start, end, cap))
    expected, truncated = brute_force(records, SIGNIN, ents, start, end, cap)
    assert [r.row_id for r in res] == [h[1] for h in expected]
    assert [r.pivot_entities for r in res] == [h[2] for h in expected]
    assert [r.related_entities for r in res] == [h[3] for h in expected]
    assert res.truncated == truncated
    assert all(start <= r.timestamp <= end for r in res)


@settings(max_examples=100, deadline=None)
@given(random_store(), random_query())
def test_query_matches_linear_scan(records, query):
    check_query_equivalence(records, query)


# ---------------------------------------------------------------------------
# column statistics


class TestColumnStats:
    def rows(self, values, col="action"):
        return [make_row(f"r{i}", "SignIn", T0, ["User:u"], **{col: v}) for i, v in enumerate(values)]

    def stat(self, rows, col):
        return next(s for s in column_stats(SIGNIN, rows) if s.column == col)

    def test_login_logout(self):
        s = self.stat(self.rows(["login"] * 8 + ["logout"] * 2), "action")
        counts = Counter(["login"] * 8 + ["logout"] * 2)
        assert (s.null_rate, s.distinct_count) == (0.0, len(counts))
        assert s.largest_group_fraction == pytest.approx(max(counts.values()) / 10)
        assert s.largest_group_fraction == pytest.approx(0.8)

    def test_all_null(self):
        s = self.stat(self.rows([None] * 10), "action")
        assert (s.null_rate, s.distinct_count, s.largest_group_fraction) == (1.0, 0, 0.0)

    def test_singleton(self):
        rows = [make_row("r", "SignIn", T0, ["User:u"], action="x", attempts=3)]
        stats = column_stats(SIGNIN, rows)
        assert {s.column: s.largest_group_fraction for s in stats} == {"action": 1.0, "attempts": 1.0}

    def test_only_non_entity_non_time_columns(self):
        stats = column_stats(SIGNIN, self.rows(["x"]))
        assert [s.column for s in stats] == ["action", "attempts"]

    def test_empty(self):
        with pytest.raises(EmptyRowSet):
            column_stats(SIGNIN, [])

    def test_int_and_string_values_do_not_collide(self):
        s = self.stat(self.rows([1, "1", 1, None]), "action")
        assert (s.distinct_count, s.largest_group_fraction, s.null_rate) == (2, 0.5, 0.25)

    @given(st.lists(st.none() | st.sampled_from(["a", "b", "c", "d"]), min_size=1, max_size=80))
    def test_invariants(self, values):
        s = self.stat(self.rows(values), "action")
        groups = Counter(v for v in values if v is not None)
        nulls = values.count(None)
        assert sum(groups.values()) + nulls == len(values)
        assert s.null_rate == pytest.approx(nulls / len(values))
        assert s.distinct_count == len(groups)
        assert (s.distinct_count == 0) == (s.null_rate == 1.0)
        if s.distinct_count:
            assert s.largest_group_fraction == pytest.approx(max(groups.values()) / len(values))
            assert s.largest_group_fraction >= 1 / s.distinct_count - 1e-12 or nulls
