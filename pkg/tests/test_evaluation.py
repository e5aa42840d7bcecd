import json
import random

import pytest
from hypothesis import given, settings, strategies as st

from helpers import ScriptedProvider, StubEngine, finding, h, record, rule
from snippets import SWAP_AFTER, SWAP_BEFORE, corpus, reformat
from strat_forge import prompts
from strat_forge.engine import EngineResult
from strat_forge.evaluation import (
    BM25,
    Approach,
    BenchTask,
    bm25_retrieve,
    exact_match,
    load_bench,
    normalize_code,
    run_benchmark,
)
from strat_forge.model import Language, StrategyCluster
from strat_forge.optimizer import build_prompt
from strat_forge.store import Library


def test_normalize_direct_example():
    assert normalize_code("int  a ; // x") == "inta;"


def test_normalize_keeps_comment_markers_in_strings():
    assert normalize_code('s = "/* keep */"; /* drop */') == 's="/*keep*/";'
    assert normalize_code("c = '/'; // drop") == "c='/';"


def test_condition_swap_unequal():
    assert normalize_code(SWAP_BEFORE) != normalize_code(SWAP_AFTER)
    assert not exact_match(SWAP_BEFORE, SWAP_AFTER)


def test_identical_and_comment_only_changes():
    assert exact_match(SWAP_BEFORE, SWAP_BEFORE)
    edited = SWAP_BEFORE.replace("    int total = 0;", "\tint total = 0; // running sum\n/* loop */")
    assert exact_match(edited, SWAP_BEFORE)


@pytest.mark.parametrize("code", corpus())
def test_normalize_idempotent_on_corpus(code):
    once = normalize_code(code)
    assert normalize_code(once) == once


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet=" \t\n/*\"'\\abx;", max_size=60))
def test_normalize_idempotent_any_text(text):
    once = normalize_code(text)
    assert normalize_code(once) == once


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 49), st.integers(0, 10_000))
def test_reformatting_preserves_match(idx, seed):
    code = corpus()[idx]
    assert exact_match(reformat(code, random.Random(seed)), code)


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(corpus()), st.sampled_from(corpus()), st.sampled_from(corpus()))
def test_exact_match_is_equivalence(a, b, c):
    assert exact_match(a, a)
    assert exact_match(a, b) == exact_match(b, a)
    if exact_match(a, b) and exact_match(b, c):
        assert exact_match(a, c)


# retrieval


def kb_entry(label, code, repo="r"):
    return record(label, repo=repo, before=code, after=code + "// changed\n" if "{" not in code else code.replace("{", "{ ", 1))


def test_bm25_default_k_and_ascending():
    docs = [kb_entry(f"d{i}", f"int f{i}(int x) {{ return x * {i} + alpha{i % 3}; }}") for i in range(8)]
    query = "int g(int x) { return x * 2 + alpha2; }"
    got = bm25_retrieve(query, docs)
    assert len(got) == 4
    scores = BM25([d.code_before for d in docs]).scores(query)
    by_hash = {d.commit_hash: s for d, s in zip(docs, scores)}
    ordered = [by_hash[d.commit_hash] for d in got]
    assert ordered == sorted(ordered)


def test_bm25_identical_doc_last():
    docs = [kb_entry(f"d{i}", f"int f(int *a, int n) {{ for (i = 0; i < n; i++) total += a[{i}]; }}") for i in range(6)]
    query = docs[3].code_before
    assert bm25_retrieve(query, docs)[-1] is docs[3]


def test_bm25_exclude_repo():
    docs = [kb_entry(f"d{i}", f"int f{i}(void) {{ return {i}; }}", repo="same" if i % 2 else "other") for i in range(8)]
    got = bm25_retrieve("int f1(void) { return 1; }", docs, exclude_repo="same")
    assert got and all(d.repo_id != "same" for d in got)


@settings(max_examples=60, deadline=None)
@given(st.randoms(use_true_random=False), st.integers(1, 6))
def test_bm25_permutation_invariant(rnd, k):
    words = ["alpha", "beta", "loop", "ptr", "len", "copy", "hash"]
    docs = [kb_entry(f"p{i}", " ".join(rnd.choice(words) for _ in range(rnd.randint(1, 6))) + ";") for i in range(9)]
    query = " ".join(rnd.choice(words) for _ in range(4))
    shuffled = docs[:]
    rnd.shuffle(shuffled)
    assert bm25_retrieve(query, docs, k) == bm25_retrieve(query, shuffled, k)


def test_bm25_empty_after_exclusion():
    with pytest.raises(ValueError):
        bm25_retrieve("x", [kb_entry("a", "x;", repo="r")], exclude_repo="r")


# benchmark runs


def task(label, before, after, repo="omega"):
    return BenchTask(repo, h(label), before, after, Language.C)


def fenced(code):
    return f"```c\n{code}```\n"


def test_three_tasks_one_solved():
    tasks = [task(f"t{i}", f"int f{i}(void)\n{{\n    return {i};\n}}\n", f"int f{i}(void)\n{{\n    return {i + 1};\n}}\n") for i in range(3)]
    table = {prompts.direct_prompt(t.code_before): fenced(t.code_after if i == 0 else t.code_before) for i, t in enumerate(tasks)}
    report = run_benchmark(tasks, Approach.DIRECT, ScriptedProvider(table))
    assert report.repeats == 3
    assert report.em_counts() == [1, 1, 1]
    assert report.to_dict()["n_tasks"] == 3


def test_repeats_use_sample_index():
    t = task("s", "int f(void)\n{\n    return 1;\n}\n", "int f(void)\n{\n    return 2;\n}\n")
    p = ScriptedProvider({prompts.direct_prompt(t.code_before): [fenced(t.code_before), fenced(t.code_after), fenced(t.code_before)]})
    report = run_benchmark([t], Approach.DIRECT, p)
    assert report.tasks[0].em_per_repeat == [False, True, False]


def test_rag_excludes_own_commit_and_identical_code():
    t = task("own", "int f(int *a)\n{\n    return a[0] + a[1];\n}\n", "int f(int *a)\n{\n    return a[1] + a[0];\n}\n")
    own = record("own", repo="omega", before=t.code_before, after=t.code_after)
    twin = record("twin", repo="elsewhere", before=t.code_before, after=t.code_after)
    others = [record(f"o{i}", repo="elsewhere") for i in range(5)]
    kb = [own, twin] + others
    fallback = lambda prompt, sample: fenced(t.code_before)
    report = run_benchmark([t], Approach.RAG, ScriptedProvider(fallback=fallback), knowledge_base=kb)
    retrieved = report.tasks[0].retrieved
    assert own.commit_hash not in retrieved and twin.commit_hash not in retrieved and len(retrieved) == 4


def _rule_library(task_obj):
    """One same-repo rule that would solve the task; its cluster carries the strategy."""
    cluster = StrategyCluster("c-same", "swap the operands", (h("same-src"),))
    src = record("same-src", repo=task_obj.repo_id)
    r = rule("same-rule", "c-same", src.commit_hash, source_repo=task_obj.repo_id)
    return Library([cluster], [r], [src])


def test_degraded_mode_loses_same_repo_rule():
    before = "int f(int *p)\n{\n    return p[0] + 1;\n}\n"
    after = "int f(int *p)\n{\n    return 1 + p[0];\n}\n"
    t = task("deg", before, after)
    lib = _rule_library(t)
    engine = StubEngine(lambda config, target: EngineResult(0, [finding("same-rule", 3, path=str(target))], []))
    prompt = build_prompt(before, (3, 3), "swap the operands")
    provider = ScriptedProvider({prompt: fenced(after)})
    standard = run_benchmark([t], Approach.STRATEGY_LIB, provider, library=lib, engine=engine)
    degraded = run_benchmark([t], Approach.STRATEGY_LIB_DEGRADED, provider, library=lib, engine=engine)
    assert standard.tasks[0].solved_any
    assert not degraded.tasks[0].solved_any and degraded.degraded
    assert degraded.tasks[0].rules_used == []


def test_report_writes_review_diffs(tmp_path):
    t = task("w", "int f(void)\n{\n    return 1;\n}\n", "int f(void)\n{\n    return 2;\n}\n")
    report = run_benchmark([t], Approach.DIRECT, ScriptedProvider({prompts.direct_prompt(t.code_before): fenced(t.code_after)}), repeats=1)
    report.write(tmp_path, [t])
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["em_per_repeat"] == [1]
    base = tmp_path / "review" / t.commit_hash[:12]
    assert (base / "ground_truth.diff").read_text() == (base / "r0-s0.generated.diff").read_text()


def test_load_bench(tmp_path):
    t = task("b", "int f(void)\n{\n}\n", "void f(void)\n{\n}\n")
    (tmp_path / "b.jsonl").write_text(json.dumps({**t.__dict__, "language": "C"}) + "\n")
    assert load_bench(tmp_path / "b.jsonl") == [t]


def test_approach_parse():
    assert Approach.parse("strategy-lib") is Approach.STRATEGY_LIB
    assert Approach.parse("rag") is Approach.RAG
    with pytest.raises(ValueError):
        Approach.parse("nope")
