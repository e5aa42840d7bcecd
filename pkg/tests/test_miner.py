import logging

import pytest
from hypothesis import given, settings, strategies as st

from helpers import h, record
from strat_forge import cscan, prompts
from strat_forge.diffs import ParseError, apply_unified_diff, make_unified_diff, parse_unified_diff
from strat_forge.miner import (
    dedupe,
    extract_commit,
    is_optimization_candidate,
    llm_verify_optimization,
    load_corpus,
    mine,
    parse_changed_functions,
)
from strat_forge.model import RawCommit
from strat_forge.providers import ReplayProvider, prompt_key

TWO_FUNCS = """#include <stdio.h>

static int helper(int x)
{
    int y = x * 2;
    y += 1;
    y += 2;
    y += 3;
    y += 4;
    y += 5;
    y += 6;
    y += 7;
    y += 8;
    return y;
}

int other(int z)
{
    return z - 1;
}
"""


def _edit(text, old, new):
    assert old in text
    return text.replace(old, new, 1)


def test_single_hunk_in_one_function():
    after = _edit(TWO_FUNCS, "y += 3;", "y += 33;")
    diff = make_unified_diff(TWO_FUNCS, after, "src/a.c")
    changed = parse_changed_functions(diff, {"src/a.c": TWO_FUNCS})
    assert [(c.file_path, c.function_name) for c in changed] == [("src/a.c", "helper")]


def test_two_hunks_same_function_collapse():
    after = _edit(_edit(TWO_FUNCS, "int y = x * 2;", "int y = x << 1;"), "y += 8;", "y += 80;")
    diff = make_unified_diff(TWO_FUNCS, after, "src/a.c", context=1)
    assert len(parse_unified_diff(diff)[0].hunks) == 2
    assert len(parse_changed_functions(diff, {"src/a.c": TWO_FUNCS})) == 1


def test_two_files_at_least_two_entries():
    after = _edit(TWO_FUNCS, "y += 3;", "y += 33;")
    diff = make_unified_diff(TWO_FUNCS, after, "a.c") + make_unified_diff(TWO_FUNCS, after, "b.c")
    assert len(parse_changed_functions(diff, {"a.c": TWO_FUNCS, "b.c": TWO_FUNCS})) >= 2


def test_hunk_header_fallback_without_sources():
    after = _edit(TWO_FUNCS, "y += 3;", "y += 33;")
    diff = make_unified_diff(TWO_FUNCS, after, "a.c")
    diff = diff.replace("@@\n", "@@ static int helper(int x)\n", 1)
    assert [c.function_name for c in parse_changed_functions(diff)] == ["helper"]


def test_malformed_diff_raises_with_line():
    with pytest.raises(ParseError) as err:
        parse_unified_diff("--- a/x.c\n+++ b/x.c\n@@ -1,2 +1,2 @@\n-a\n+b\n")
    assert err.value.line_no > 0


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.sampled_from(["a", "b", "c", "int x;", "", "}"]), max_size=25),
    st.lists(st.sampled_from(["a", "b", "c", "int x;", "", "}"]), max_size=25),
    st.booleans(),
    st.booleans(),
)
def test_diff_round_trip(before_lines, after_lines, nl_before, nl_after):
    before = "\n".join(before_lines) + ("\n" if nl_before and before_lines else "")
    after = "\n".join(after_lines) + ("\n" if nl_after and after_lines else "")
    assert apply_unified_diff(before, make_unified_diff(before, after, "f.c")) == after


def test_cscan_finds_functions_in_containers():
    src = (
        'extern "C" {\nint a(void)\n{\n  return 1;\n}\n}\n'
        "namespace ns {\nclass K {\n  int m() const { return 2; }\n};\n"
        "int K_b(int x)\n{\n  if (x) { return 3; }\n  return 4;\n}\n}\n"
        "struct S { int v; };\n"
        'static const char *s = "{";\n'
    )
    names = [f.name for f in cscan.find_functions(src)]
    assert names == ["a", "m", "K_b"]


def test_cscan_ignores_braces_in_comments_and_strings():
    src = 'int f(void)\n{\n  /* } */ const char *s = "}"; // }\n  return 0;\n}\n'
    (span,) = cscan.find_functions(src)
    assert (span.name, span.start_line, span.end_line) == ("f", 1, 5)


@pytest.mark.parametrize(
    "message,expected",
    [
        ("Optimize hash lookup", True),
        ("Fix typo in docs", False),
        ("performant", False),
        ("Make parsing FASTER", True),
        ("speed up the loop", True),
    ],
)
def test_keyword_filter(message, expected):
    assert is_optimization_candidate(message) is expected


def _raw(label="r", message="Optimize x", files=None):
    files = files or {"a.c": (TWO_FUNCS, _edit(TWO_FUNCS, "y += 3;", "y += 33;"))}
    diff = "".join(make_unified_diff(b, a, p) for p, (b, a) in files.items())
    return RawCommit("repo", h(label), message, diff, files)


@pytest.mark.parametrize("answer,expected", [("YES", True), ("NO", False), ("yes, it is", True)])
def test_llm_verify(answer, expected):
    raw = _raw()
    provider = ReplayProvider({prompt_key(prompts.verify_prompt(raw.message, raw.diff)): answer})
    assert llm_verify_optimization(raw, provider) is expected


def test_llm_verify_unparseable_warns(caplog):
    raw = _raw()
    provider = ReplayProvider({prompt_key(prompts.verify_prompt(raw.message, raw.diff)): "Maybe"})
    with caplog.at_level(logging.WARNING):
        assert llm_verify_optimization(raw, provider) is False
    assert "unparseable" in caplog.text


def test_dedupe_identical():
    assert len(dedupe([record("a"), record("a")])) == 1


def test_dedupe_same_diff_different_message():
    a = record("a")
    b = record("b", diff=a.diff)
    assert dedupe([a, b]) == [a]


def test_dedupe_same_message_modulo_whitespace_and_case():
    a = record("a", message="Optimize  Loop")
    b = record("b", message="optimize\tloop")
    assert dedupe([a, b]) == [a]


def test_dedupe_disjoint_kept():
    assert len(dedupe([record("a"), record("b")])) == 2


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from("abcdef"), max_size=12))
def test_dedupe_idempotent_and_first_wins(labels):
    commits = [record(l) for l in labels]
    once = dedupe(commits)
    assert dedupe(once) == once
    assert [c.commit_hash for c in once] == list(dict.fromkeys(c.commit_hash for c in commits))


def test_extract_commit_single_function():
    rec, why = extract_commit(_raw())
    assert why == "ok"
    assert rec.function_name == "helper"
    assert rec.code_before.startswith("static int helper") and "y += 33;" in rec.code_after
    assert apply_unified_diff(rec.code_before, rec.diff) == rec.code_after


def test_extract_commit_rejects_two_functions():
    after = _edit(_edit(TWO_FUNCS, "y += 3;", "y += 33;"), "z - 1", "z - 2")
    rec, why = extract_commit(_raw(files={"a.c": (TWO_FUNCS, after)}))
    assert rec is None and why == "multi-function"


def test_extract_commit_rejects_non_c():
    rec, why = extract_commit(_raw(files={"a.py": ("x = 1\n", "x = 2\n")}))
    assert rec is None and why == "non-c-file"


def test_extract_commit_rejects_outside_function():
    after = _edit(TWO_FUNCS, "#include <stdio.h>", "#include <stdlib.h>")
    rec, why = extract_commit(_raw(files={"a.c": (TWO_FUNCS, after)}))
    assert rec is None


def test_mine_subset_and_single_function(tmp_path):
    good = _raw("g")
    other = _raw("o", message="Fix typo")
    multi_after = _edit(_edit(TWO_FUNCS, "y += 3;", "y += 33;"), "z - 1", "z - 2")
    multi = _raw("m", files={"b.c": (TWO_FUNCS, multi_after)})
    result = mine([good, other, multi])
    assert [c.commit_hash for c in result.commits] == [good.commit_hash]
    assert result.rejected == {"no-keyword": 1, "multi-function": 1}


def test_load_corpus_reads_jsonl(tmp_path):
    import json

    raw = _raw()
    (tmp_path / "x.jsonl").write_text(json.dumps(raw.to_dict()) + "\n")
    assert load_corpus(tmp_path) == [raw]
