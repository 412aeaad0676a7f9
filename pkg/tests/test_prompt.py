import math
import os
from dataclasses import replace
from pathlib import Path

import pytest

from ctxshap.attribution import Attribution, shapley_batch
from ctxshap.errors import (
    BudgetTooSmallError,
    FormatError,
    KindArityError,
    SchemaError,
    UnknownFeatureError,
)
from ctxshap.model import FeatureSet, Instance
from ctxshap.prompt import (
    GUARD_CLAUSES,
    ExplanationContext,
    assemble,
    build_feature_table,
    build_guard,
    build_shap_table,
    estimate_tokens,
    load_context,
    parse_response,
    render_response,
    resolve_feature,
)

from helpers import GOLDEN_SCENARIOS, golden_bundle

GOLDEN = Path(__file__).parent / "golden"


def golden_text(bundle):
    import hashlib

    digests = "\n".join(hashlib.sha256(data).hexdigest() for _, data in bundle.images)
    return bundle.dump() + f"\n<!-- image sha256 -->\n\n{digests}\n"


def check_golden(name, bundle):
    path = GOLDEN / f"{name}.md"
    text = golden_text(bundle)
    if os.environ.get("UPDATE_GOLDEN"):
        GOLDEN.mkdir(exist_ok=True)
        path.write_text(text, encoding="utf-8")
    assert path.read_text(encoding="utf-8") == text


def oracle_table_chars(attrs, names, k):
    """Length of the SHAP tables for the first k of len(attrs) instances, rebuilt by hand."""
    g = lambda v: "0" if f"{v:.4g}" == "-0" else f"{v:.4g}"  # noqa: E731
    lines = ["| Sample | Feature | Value | SHAP value |", "|---|---|---|---|"]
    for s, a in enumerate(attrs[:k], start=1):
        lines += [f"| {s} | {n} | {g(a.instance.values[i])} | {g(a.phi[i])} |" for i, n in enumerate(names)]
    lines += ["", "| Sample | E[f(X)] | f(x) |", "|---|---|---|"]
    lines += [f"| {s} | {g(a.base_value)} | {g(a.prediction)} |" for s, a in enumerate(attrs[:k], start=1)]
    text = "\n".join(lines)
    if k < len(attrs):
        text += f"\n\nShowing the first {k} of {len(attrs)} instances."
    return len(text)


def synthetic_attrs(n, width=4):
    out = []
    for k in range(n):
        phi = [((k + 1) * (i + 2) % 7 - 3) / 8 for i in range(width)]
        out.append(Attribution.from_contributions(0.25, phi, Instance(tuple(float(k + i) for i in range(width)))))
    return out


FS4 = FeatureSet(("a", "b", "c", "d"))


class TestContext:
    def test_load_fixture(self, data_dir):
        ctx = load_context(data_dir / "context.json")
        assert ctx.feature_aliases["AST"] == "Aspartate Aminotransferase"
        assert ctx.reader == "general"

    def test_schema(self):
        with pytest.raises(SchemaError):
            ExplanationContext.from_dict({"readers": "expert"})
        with pytest.raises(SchemaError):
            ExplanationContext.from_dict({"reader": "child"})
        with pytest.raises(SchemaError):
            ExplanationContext.from_dict({"feature_aliases": {"a": 3}})

    def test_round_trip(self, liver):
        ctx = liver[3]
        assert ExplanationContext.from_dict(ctx.to_dict()) == ctx


class TestFeatureTable:
    def test_complete_context(self):
        ctx = ExplanationContext({"a": "Alpha"}, {"a": "first"})
        text = build_feature_table(FeatureSet(("a",)), ctx)
        assert "| a | Alpha | first |" in text
        assert "infer" not in text

    def test_missing_entries_ask_the_model_to_infer(self):
        text = build_feature_table(FeatureSet(("a", "b")), ExplanationContext({"a": "Alpha"}, {}))
        assert "| b | - | model should infer |" in text
        assert "| a | Alpha | model should infer |" in text

    def test_unknown_feature(self):
        with pytest.raises(UnknownFeatureError, match="zz"):
            build_feature_table(FeatureSet(("a",)), ExplanationContext({"zz": "Z"}))

    def test_pipes_escaped(self):
        text = build_feature_table(FeatureSet(("a",)), ExplanationContext({}, {"a": "x | y"}))
        assert "x \\| y" in text


class TestShapTable:
    def test_single_instance(self):
        text, count = build_shap_table(synthetic_attrs(1), FS4, budget=8192)
        assert count == 1
        assert sum(line.startswith("| 1 | ") for line in text.splitlines()) == 4 + 1

    def test_four_significant_digits(self):
        a = Attribution.from_contributions(0.0, [0.123456, -98765.4], Instance((3.14159265, 2.0)))
        text, _ = build_shap_table([a], FeatureSet(("p", "q")))
        assert "| 1 | p | 3.142 | 0.1235 |" in text
        assert "-9.877e+04" in text

    @pytest.mark.parametrize("budget", [120, 200, 333, 500, 1000])
    def test_first_n_that_fit(self, budget):
        attrs = synthetic_attrs(50)
        names = FS4.names
        fits = [k for k in range(1, 51) if oracle_table_chars(attrs, names, k) <= 4 * budget]
        text, count = build_shap_table(attrs, FS4, budget=budget)
        assert count == max(fits)
        assert len(text) == oracle_table_chars(attrs, names, count)
        assert estimate_tokens(text) <= budget
        assert "| 1 | a |" in text and f"| {count} | d |" in text

    def test_budget_for_eight(self):
        attrs = synthetic_attrs(50)
        budget = math.ceil(oracle_table_chars(attrs, FS4.names, 8) / 4)
        _, count = build_shap_table(attrs, FS4, budget=budget)
        assert count == 8

    def test_tiny_budget(self):
        with pytest.raises(BudgetTooSmallError):
            build_shap_table(synthetic_attrs(3), FS4, budget=10)


class TestGuard:
    def test_clauses_and_stability(self):
        guard = build_guard()
        assert guard == build_guard()
        for clause in GUARD_CLAUSES:
            assert clause in guard

    def test_estimate_tokens(self):
        assert estimate_tokens("") == 0
        assert estimate_tokens("abcd") == 1
        assert estimate_tokens("abcde") == 2


class TestAssemble:
    def test_kind_arity(self):
        attrs = synthetic_attrs(2)
        with pytest.raises(KindArityError):
            assemble("waterfall", attrs, [], FS4)
        with pytest.raises(KindArityError):
            assemble("bar", [], [], FS4)
        with pytest.raises(KindArityError):
            assemble("beeswarm", attrs, [], FS4)

    def test_bar_over_many_with_budget_for_eight(self):
        attrs = synthetic_attrs(100)
        probe = assemble("bar", attrs, ["<svg/>"], FS4, budget=100_000)
        assert probe.sample_count == 100
        fixed = len(probe.user_text) - oracle_table_chars(attrs, FS4.names, 100)
        budget = math.ceil((fixed + oracle_table_chars(attrs, FS4.names, 8)) / 4)
        bundle = assemble("bar", attrs, ["<svg/>"], FS4, budget=budget)
        assert bundle.sample_count == 8
        assert "bar plot" in bundle.user_text.lower()
        assert bundle.estimated_tokens <= budget
        assert bundle.images == (("image/svg+xml", b"<svg/>"),)

    def test_reader_and_language_directives(self):
        attrs = synthetic_attrs(1)
        general = assemble("waterfall", attrs, [], FS4, ExplanationContext(language="Japanese"))
        assert "intuitive, everyday language" in general.user_text
        assert "in Japanese" in general.user_text
        expert = assemble("waterfall", attrs, [], FS4, ExplanationContext(reader="expert", language="Indonesian"))
        assert "critical assessment of data, methods, and results" in expert.user_text
        assert "in Indonesian" in expert.user_text

    def test_background_only_when_given(self):
        attrs = synthetic_attrs(1)
        with_bg = assemble("waterfall", attrs, [], FS4, ExplanationContext(additional_background="Ice cream sales."))
        without = assemble("waterfall", attrs, [], FS4, ExplanationContext(additional_background="  "))
        assert "Ice cream sales." in with_bg.user_text
        assert len(without.user_text) < len(with_bg.user_text)

    def test_scaffolding_larger_than_budget(self):
        with pytest.raises(BudgetTooSmallError):
            assemble("waterfall", synthetic_attrs(1), [], FS4, budget=50)

    def test_deterministic(self, liver):
        model, _, instances, ctx = liver
        first = golden_bundle("general_english", model, instances, ctx)
        assert first == golden_bundle("general_english", model, instances, ctx)


@pytest.mark.parametrize("name", GOLDEN_SCENARIOS)
def test_golden_prompts(name, liver):
    model, _, instances, ctx = liver
    check_golden(name, golden_bundle(name, model, instances, ctx))


class TestParse:
    REPLY = render_response(
        "Overall the score is high.",
        [("AST", "Raises the score."), ("Gamma-Glutamyl Transferase", "Also raises it.")],
        "Not a diagnosis.",
    )

    def test_round_trip(self, liver):
        model, _, _, ctx = liver
        parsed = parse_response(self.REPLY, model.features, ctx)
        assert parsed.summary == "Overall the score is high."
        assert parsed.per_feature[0] == ("AST", "Raises the score.")
        assert parsed.resolved == ("AST", "GGT")
        assert parsed.caveats == "Not a diagnosis."

    @pytest.mark.parametrize("order", [("CAVEATS", "PER_FEATURE", "SUMMARY"), ("PER_FEATURE", "SUMMARY", "CAVEATS")])
    def test_any_order(self, order):
        raw = render_response("s", [("a", "t")], "c", order=order)
        assert parse_response(raw).to_dict() == {"summary": "s", "per_feature": [{"name": "a", "text": "t"}], "caveats": "c"}

    def test_fences_and_heading_variants(self):
        raw = "```markdown\n## summary\nHi\n# Per Feature:\n- **a**: t\n  more\n### CAVEATS\nc\n```\n"
        parsed = parse_response(raw)
        assert parsed.summary == "Hi"
        assert parsed.per_feature == (("a", "t\nmore"),)

    def test_missing_caveats(self):
        raw = "### SUMMARY\ns\n### PER_FEATURE\n- a: t\n"
        with pytest.raises(FormatError) as info:
            parse_response(raw)
        assert info.value.section == "CAVEATS"

    def test_duplicate_and_empty(self):
        with pytest.raises(FormatError, match="more than once"):
            parse_response(self.REPLY + "\n### SUMMARY\nagain\n")
        with pytest.raises(FormatError) as info:
            parse_response("### SUMMARY\n\n### PER_FEATURE\n- a: t\n### CAVEATS\nc\n")
        assert info.value.section == "SUMMARY"

    def test_unknown_feature_name(self, liver):
        model, _, _, ctx = liver
        raw = render_response("s", [("Potassium", "t")], "c")
        with pytest.raises(FormatError, match="Potassium"):
            parse_response(raw, model.features, ctx)

    def test_resolve_feature(self, liver):
        model, _, _, ctx = liver
        assert resolve_feature("ast", model.features, ctx) == "AST"
        assert resolve_feature("AST (324)", model.features, ctx) == "AST"
        assert resolve_feature("Bilirubin (BIL)", model.features, ctx) == "BIL"
        assert resolve_feature("Sodium", model.features, ctx) is None


def test_liver_bundle_within_budget(liver):
    model, _, instances, ctx = liver
    attrs = shapley_batch(model, instances)
    for budget in (900, 1500, 4096):
        try:
            bundle = assemble("bar", attrs, [], model.features, replace(ctx, reader="expert"), budget)
        except BudgetTooSmallError:
            continue
        assert bundle.estimated_tokens <= budget
        assert 1 <= bundle.sample_count <= len(attrs)
