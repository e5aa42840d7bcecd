import logging

import pytest
import yaml

from helpers import ScriptedProvider, StubEngine, finding, record, rule_yaml
from strat_forge import prompts
from strat_forge.engine import EngineResult, EngineUnavailable, run_rule_on_code
from strat_forge.forge import (
    MULTIPLE_RULE_BLOCKS,
    NO_RULE_BLOCK,
    ZERO_FINDINGS,
    AttemptAborted,
    CandidateError,
    build_rule_set,
    phase_generate,
    phase_understand,
    rule_id_for,
    run_attempt,
    validate_and_repair,
    verify_library,
)
from strat_forge.model import AttemptOutcome, PipelineConfig, StrategyCluster
from strat_forge.store import Library

CODE = "int f(int *a, int n)\n{\n    int s = 0;\n    for (int i = 0; i < n; i++)\n        s += a[i] + 1;\n    return s;\n}\n"


def fenced_rule(rule_id="draft", pattern="$X + 1"):
    return "Rule:\n```yaml\n" + rule_yaml(rule_id, pattern) + "```\n"


def found(config, target):
    return EngineResult(0, [finding("r", 5)], [])


def nothing(config, target):
    return EngineResult(0, [], [])


def broken(config, target):
    return EngineResult(2, [], ["Rule parse error: bad pattern"])


def test_understand_verbatim():
    c = record("u")
    p = ScriptedProvider({prompts.understand_prompt(c): "It hoists a call."})
    assert phase_understand(c, p) == "It hoists a call."


def test_understand_strips_yaml(caplog):
    c = record("u")
    p = ScriptedProvider({prompts.understand_prompt(c): "Explain.\n```yaml\nrules: []\n```\nMore."})
    with caplog.at_level(logging.WARNING):
        text = phase_understand(c, p)
    assert "rules" not in text and "Explain." in text and "YAML" in caplog.text


def test_understand_empty_aborts():
    c = record("u")
    p = ScriptedProvider({prompts.understand_prompt(c): "   "})
    with pytest.raises(AttemptAborted):
        phase_understand(c, p)


def test_generate_rewrites_id():
    c = record("g")
    p = ScriptedProvider({prompts.generate_prompt("why", c, "want-id"): fenced_rule("other")})
    doc = yaml.safe_load(phase_generate("why", c, p, "want-id"))
    assert doc["rules"][0]["id"] == "want-id"


def test_generate_two_blocks():
    c = record("g")
    p = ScriptedProvider({prompts.generate_prompt("why", c, "id"): fenced_rule() + fenced_rule()})
    with pytest.raises(CandidateError, match=MULTIPLE_RULE_BLOCKS):
        phase_generate("why", c, p, "id")


def test_generate_prose_only():
    c = record("g")
    p = ScriptedProvider({prompts.generate_prompt("why", c, "id"): "I would match additions."})
    with pytest.raises(CandidateError, match=NO_RULE_BLOCK):
        phase_generate("why", c, p, "id")


def test_first_candidate_valid():
    trace = validate_and_repair(rule_yaml("id"), record("v"), ScriptedProvider(), 7, StubEngine(found), "id")
    assert trace.outcome is AttemptOutcome.VALIDATED and trace.iterations_used == 1


def test_seven_engine_errors_exhaust():
    p = ScriptedProvider(fallback=lambda prompt, sample: fenced_rule())
    engine = StubEngine(broken)
    trace = validate_and_repair(rule_yaml("id"), record("v"), p, 7, engine, "id")
    assert trace.outcome is AttemptOutcome.EXHAUSTED
    assert len(trace.engine_errors) == 7 and engine.calls == 7


def test_zero_findings_feeds_synthetic_message():
    p = ScriptedProvider(fallback=lambda prompt, sample: fenced_rule())
    trace = validate_and_repair(rule_yaml("id"), record("v"), p, 2, StubEngine(nothing), "id")
    assert trace.engine_errors == [ZERO_FINDINGS, ZERO_FINDINGS]
    assert ZERO_FINDINGS in p.prompts[0][0]


def test_engine_unavailable_stops_attempt():
    def gone(config, target):
        raise EngineUnavailable("no binary")

    trace = validate_and_repair(rule_yaml("id"), record("v"), ScriptedProvider(), 7, StubEngine(gone), "id")
    assert trace.outcome is AttemptOutcome.ENGINE_UNAVAILABLE


@pytest.mark.engine
def test_two_bad_then_valid_with_real_engine(semgrep):
    c = record("real", before=CODE, after=CODE.replace("+ 1", "+ 2"))
    responses = iter([fenced_rule(pattern="foo("), fenced_rule(pattern="$X + 1")])
    p = ScriptedProvider(fallback=lambda prompt, sample: next(responses))
    bad = "rules:\n  - id: id\n    languages: [c]\n    message: m\n    severity: INFO\n    pattern: [unclosed\n"
    trace = validate_and_repair(bad, c, p, 7, semgrep, "id")
    assert trace.outcome is AttemptOutcome.VALIDATED
    assert trace.iterations_used == 3 and trace.engine_runs == 3
    assert len(trace.engine_errors) == 2
    assert ZERO_FINDINGS not in trace.engine_errors
    assert "Rule parse error" in trace.engine_errors[1]


@pytest.mark.engine
def test_engine_reports_schema_and_parse_errors(semgrep):
    result = run_rule_on_code(semgrep, rule_yaml("id", "foo("), CODE, record("x").language)
    assert result.returncode == 2 and "Rule parse error" in result.error_text()
    schema = "rules:\n  - id: id\n    languages: [c]\n"
    result = run_rule_on_code(semgrep, schema, CODE, record("x").language)
    assert result.returncode == 7 and "InvalidRuleSchemaError" in result.error_text()
    ok = run_rule_on_code(semgrep, rule_yaml("id", "$X + 1"), CODE, record("x").language)
    assert ok.ok and [f.start_line for f in ok.findings] == [5]


def _cluster(n):
    commits = {r.commit_hash: r for r in (record(f"m{i}") for i in range(n))}
    return StrategyCluster("c-test", "strategy", tuple(sorted(commits))), commits


def _attempt_provider(valid_attempts: set[int]):
    """Validated-looking rules for the listed attempt numbers, misses elsewhere."""

    def respond(prompt, sample):
        if prompt.startswith("Analyze"):
            return "analysis"
        pattern = "$X + 1" if sample + 1 in valid_attempts else "$X * 999"
        return fenced_rule(pattern=pattern)

    return ScriptedProvider(fallback=respond)


def _pattern_engine(config, target):
    text = config.read_text()
    return EngineResult(0, [finding("r", 3)] if "$X + 1" in text else [], [])


def test_build_rule_set_counts_and_dedupes():
    cluster, commits = _cluster(1)
    cfg = PipelineConfig(n_attempts=5)
    result = build_rule_set(cluster, commits, cfg, _attempt_provider({2, 4}), StubEngine(_pattern_engine))
    # both validated attempts produce the same rule text, so one survives dedup
    assert len(result.rules) == 1
    assert sum(t.outcome is AttemptOutcome.VALIDATED for t in result.traces) == 2


def test_build_rule_set_all_exhausted_is_ruleless():
    cluster, commits = _cluster(2)
    result = build_rule_set(cluster, commits, PipelineConfig(), _attempt_provider(set()), StubEngine(nothing))
    assert result.rules == [] and result.ruleless
    assert all(t.outcome is AttemptOutcome.EXHAUSTED for t in result.traces)


def test_budget_never_exceeded():
    cluster, commits = _cluster(4)
    cfg = PipelineConfig(n_sample_commits=3, n_attempts=2, max_iterations=4)
    engine = StubEngine(nothing)
    result = build_rule_set(cluster, commits, cfg, _attempt_provider(set()), engine)
    assert engine.calls == result.engine_runs == 3 * 2 * 4


def test_parallel_attempts_same_rules():
    cluster, commits = _cluster(3)
    serial = build_rule_set(cluster, commits, PipelineConfig(), _attempt_provider({1, 3, 5}), StubEngine(_pattern_engine))
    threaded = build_rule_set(
        cluster, commits, PipelineConfig(workers=4), _attempt_provider({1, 3, 5}), StubEngine(_pattern_engine)
    )
    assert [r.yaml_text for r in serial.rules] == [r.yaml_text for r in threaded.rules]


def test_run_attempt_uses_own_sample():
    c = record("s")
    p = _attempt_provider({3})
    trace = run_attempt(c, 3, "c-x", p, StubEngine(_pattern_engine), 7)
    assert trace.outcome is AttemptOutcome.VALIDATED
    assert {s for _, s in p.prompts} == {2}
    assert rule_id_for("c-x", c.commit_hash, 3) in trace.rule_yaml


@pytest.mark.engine
def test_verify_library_real_engine(semgrep):
    from helpers import rule

    c = record("v", before=CODE, after=CODE.replace("+ 1", "+ 2"))
    good = rule("good", "c1", c.commit_hash, pattern="$X + 1")
    bad = rule("bad", "c1", c.commit_hash, pattern="$X * 77")
    lib = Library([StrategyCluster("c1", "t", (c.commit_hash,))], [good, bad], [c])
    reports = {r.rule_id: r for r in verify_library(lib, semgrep)}
    assert reports["good"].ok and reports["good"].findings == 1
    assert not reports["bad"].ok
