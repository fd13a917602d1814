"""ID and namespace-slug unit oracle."""
from __future__ import annotations

import re

import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedplane.ids import dedupe_namespace, namespace_path, new_id, slugify


class TestNewId:
    def test_length_and_charset(self):
        value = new_id()
        assert len(value) == 26
        assert re.fullmatch(r"[0-9A-HJKMNP-TV-Z]{26}", value)

    def test_monotonic_within_process(self):
        ids = [new_id() for _ in range(500)]
        assert ids == sorted(ids)
        assert len(set(ids)) == 500


# Hand-computed slug expectations.
SLUG_CASES = [
    ("WINGS Lab", "wings-lab"),
    ("NeXT", "next"),
    ("node-01", "node-01"),
    ("UB NeXT 5G+ Testbed!", "ub-next-5g-testbed"),
    ("  spaced   out  ", "spaced-out"),
    ("UT IoT", "ut-iot"),
    ("A__B--C", "a-b-c"),
]


class TestSlugify:
    @pytest.mark.parametrize("raw,expected", SLUG_CASES)
    def test_known_values(self, raw, expected):
        assert slugify(raw) == expected

    def test_namespace_path(self):
        assert namespace_path("WINGS Lab", "NeXT", "node-01") == "wings-lab/next/node-01"

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            slugify("!!!")

    @given(st.text(min_size=1).filter(lambda s: any(c.isalnum() and c.isascii() for c in s)))
    def test_slug_properties(self, raw):
        slug = slugify(raw)
        assert re.fullmatch(r"[a-z0-9]+(-[a-z0-9]+)*", slug)
        assert slugify(slug) == slug  # idempotent


class TestDedupeNamespace:
    def test_first_free(self):
        assert dedupe_namespace("a/b/c", set()) == "a/b/c"

    def test_suffixes(self):
        assert dedupe_namespace("a/b/c", {"a/b/c"}) == "a/b/c-2"
        assert dedupe_namespace("a/b/c", {"a/b/c", "a/b/c-2"}) == "a/b/c-3"
