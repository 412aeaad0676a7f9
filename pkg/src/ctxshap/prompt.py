"""Prompt assembly for contextual SHAP explanations and parsing of the reply.

A prompt is a guard system message plus a markdown user message built from
versioned template files in ``templates/<version>/``.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from string import Template
from typing import Mapping, Optional, Sequence

from ctxshap.attribution import Attribution
from ctxshap.errors import (
    BudgetTooSmallError,
    FormatError,
    InvalidValueError,
    KindArityError,
    SchemaError,
    UnknownFeatureError,
)
from ctxshap.model import FeatureSet

TEMPLATE_VERSION = "v1"
READERS = ("general", "expert")
KINDS = ("bar", "waterfall")
SECTIONS = ("SUMMARY", "PER_FEATURE", "CAVEATS")
NO_ALIAS = "-"
NO_DESCRIPTION = "model should infer"

# substrings every guard must contain; checked by tests and by assemble()
GUARD_CLAUSES = (
    "never as certain conclusions",
    "seek advice from a qualified specialist",
    "E[f(X)] is the average model output over the background data",
    "f(x) is the model output for the one instance being explained",
)


@lru_cache(maxsize=None)
def template(name: str, version: str = TEMPLATE_VERSION) -> str:
    res = resources.files("ctxshap") / "templates" / version / f"{name}.md"
    return res.read_text(encoding="utf-8").rstrip("\n")


def estimate_tokens(text: str) -> int:
    """Character heuristic: one token per four characters, rounded up."""
    return math.ceil(len(text) / 4)


@dataclass(frozen=True)
class ExplanationContext:
    feature_aliases: Mapping[str, str] = field(default_factory=dict)
    feature_descriptions: Mapping[str, str] = field(default_factory=dict)
    additional_background: Optional[str] = None
    language: str = "English"
    reader: str = "general"

    def __post_init__(self):
        if not isinstance(self.language, str) or not self.language.strip():
            raise InvalidValueError("language must be a non-empty string")
        if self.reader not in READERS:
            raise InvalidValueError(f"reader must be one of {READERS}, got {self.reader!r}")
        object.__setattr__(self, "feature_aliases", dict(self.feature_aliases or {}))
        object.__setattr__(self, "feature_descriptions", dict(self.feature_descriptions or {}))

    def validate(self, features: FeatureSet) -> None:
        known = set(features.names)
        for kind, mapping in (("alias", self.feature_aliases), ("description", self.feature_descriptions)):
            unknown = sorted(set(mapping) - known)
            if unknown:
                raise UnknownFeatureError(f"{kind} given for unknown feature(s) {unknown}")

    def display_name(self, name: str) -> str:
        return self.feature_aliases.get(name) or name

    def to_dict(self) -> dict:
        return {
            "feature_aliases": dict(self.feature_aliases),
            "feature_descriptions": dict(self.feature_descriptions),
            "additional_background": self.additional_background,
            "language": self.language,
            "reader": self.reader,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ExplanationContext":
        if not isinstance(doc, Mapping):
            raise SchemaError("context: expected a JSON object")
        allowed = {"feature_aliases", "feature_descriptions", "additional_background", "language", "reader"}
        extra = set(doc) - allowed
        if extra:
            raise SchemaError(f"context: unexpected fields {sorted(extra)}")
        for key in ("feature_aliases", "feature_descriptions"):
            value = doc.get(key, {})
            if not isinstance(value, dict) or not all(
                isinstance(k, str) and isinstance(v, str) for k, v in value.items()
            ):
                raise SchemaError(f"context.{key}: expected an object of strings")
        background = doc.get("additional_background")
        if background is not None and not isinstance(background, str):
            raise SchemaError("context.additional_background: expected a string")
        try:
            return cls(
                feature_aliases=doc.get("feature_aliases", {}),
                feature_descriptions=doc.get("feature_descriptions", {}),
                additional_background=background,
                language=doc.get("language", "English"),
                reader=doc.get("reader", "general"),
            )
        except InvalidValueError as exc:
            raise SchemaError(f"context: {exc}") from None


def load_context(path) -> ExplanationContext:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"context is not valid JSON: {exc}") from None
    return ExplanationContext.from_dict(doc)


@dataclass(frozen=True)
class PromptBundle:
    kind: str
    system_text: str
    user_text: str
    images: tuple[tuple[str, bytes], ...]
    sample_count: int

    @property
    def estimated_tokens(self) -> int:
        return estimate_tokens(self.user_text)

    def dump(self) -> str:
        """Human-readable prompt for inspection (images listed, not inlined)."""
        attached = "\n".join(f"- {mt} ({len(data)} bytes)" for mt, data in self.images) or "- none"
        return (
            f"<!-- system message -->\n\n{self.system_text}\n\n"
            f"<!-- user message ({self.estimated_tokens} estimated tokens) -->\n\n{self.user_text}\n\n"
            f"<!-- attached images -->\n\n{attached}\n"
        )


@dataclass(frozen=True)
class ParsedExplanation:
    summary: str
    per_feature: tuple[tuple[str, str], ...]
    caveats: str
    resolved: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        d = {
            "summary": self.summary,
            "per_feature": [{"name": n, "text": t} for n, t in self.per_feature],
            "caveats": self.caveats,
        }
        if self.resolved:
            d["features"] = list(self.resolved)
        return d


# -- builders --------------------------------------------------------------------


def _cell(text: str) -> str:
    return " ".join(str(text).split()).replace("|", "\\|")


def build_feature_table(features: FeatureSet, ctx: Optional[ExplanationContext] = None) -> str:
    ctx = ctx or ExplanationContext()
    ctx.validate(features)
    lines = ["| Feature | Alias | Description |", "|---|---|---|"]
    incomplete = False
    for name in features.names:
        alias = ctx.feature_aliases.get(name)
        desc = ctx.feature_descriptions.get(name)
        incomplete |= not alias or not desc
        lines.append(f"| {_cell(name)} | {_cell(alias) if alias else NO_ALIAS} | {_cell(desc) if desc else NO_DESCRIPTION} |")
    text = "\n".join(lines)
    if incomplete:
        text += "\n\n" + template("features_infer")
    return text


def _num(v: float) -> str:
    s = f"{v:.4g}"
    return "0" if s == "-0" else s


def _shap_rows(k: int, attr: Attribution, names: Sequence[str]) -> tuple[list[str], str]:
    raw = attr.instance.values if attr.instance is not None else None
    rows = [
        f"| {k} | {_cell(name)} | {_num(raw[i]) if raw is not None else NO_ALIAS} | {_num(attr.phi[i])} |"
        for i, name in enumerate(names)
    ]
    return rows, f"| {k} | {_num(attr.base_value)} | {_num(attr.prediction)} |"


_SHAP_HEAD = "| Sample | Feature | Value | SHAP value |\n|---|---|---|---|"
_OUTPUT_HEAD = "| Sample | E[f(X)] | f(x) |\n|---|---|---|"


def _shap_table_text(per_row: Sequence[tuple[list[str], str]], total: int) -> str:
    k = len(per_row)
    parts = [_SHAP_HEAD]
    for rows, _ in per_row:
        parts.extend(rows)
    parts.append("")
    parts.append(_OUTPUT_HEAD)
    parts.extend(out for _, out in per_row)
    text = "\n".join(parts)
    if k < total:
        text += f"\n\nShowing the first {k} of {total} instances."
    return text


def _fit_shap_table(attrs, names, max_chars: int) -> tuple[str, int]:
    if not attrs:
        raise InvalidValueError("no attributions to tabulate")
    for a in attrs:
        if len(a.phi) != len(names):
            raise UnknownFeatureError(f"attribution width {len(a.phi)} != {len(names)} features")
    per_row = []
    best = None
    for k, attr in enumerate(attrs, start=1):
        per_row.append(_shap_rows(k, attr, names))
        text = _shap_table_text(per_row, len(attrs))
        if len(text) > max_chars:
            break
        best = (text, k)
    if best is None:
        raise BudgetTooSmallError(
            f"a single instance needs about {estimate_tokens(_shap_table_text(per_row[:1], len(attrs)))} "
            f"tokens, more than the {max_chars // 4} available"
        )
    return best


def build_shap_table(
    attrs: Sequence[Attribution],
    features: FeatureSet,
    ctx: Optional[ExplanationContext] = None,
    budget: int = 4096,
) -> tuple[str, int]:
    """Markdown SHAP-value tables for as many leading instances as fit ``budget`` tokens.

    Returns the text and the number of instances it contains.
    """
    return _fit_shap_table(list(attrs), features.names, 4 * budget)


def build_guard() -> str:
    return template("guard")


def _fill(name: str, **values) -> str:
    return Template(template(name)).substitute(**values)


def assemble(
    kind: str,
    attrs: Sequence[Attribution],
    plots: Sequence[str],
    features: FeatureSet,
    ctx: Optional[ExplanationContext] = None,
    budget: int = 4096,
) -> PromptBundle:
    ctx = ctx or ExplanationContext()
    attrs = list(attrs)
    if kind not in KINDS:
        raise KindArityError(f"kind must be one of {KINDS}, got {kind!r}")
    if kind == "waterfall" and len(attrs) != 1:
        raise KindArityError(f"a waterfall explains exactly one instance, got {len(attrs)}")
    if kind == "bar" and not attrs:
        raise KindArityError("a bar plot needs at least one instance")

    head = [template("task")]
    if ctx.additional_background and ctx.additional_background.strip():
        head.append(_fill("background", background=ctx.additional_background.strip()))
    head.append(_fill("features", table=build_feature_table(features, ctx)))
    if kind == "waterfall":
        plot = template("plot_waterfall")
    else:
        plot = _fill("plot_bar", n_instances=len(attrs))
    tail = [
        plot,
        "## Audience\n\n" + template(f"reader_{ctx.reader}") + "\n" + _fill("language", language=ctx.language),
        template("response_format"),
    ]
    shap_prefix, _ = template("shap_values").split("$table")

    def join(table: str) -> str:
        return "\n\n".join(head + [shap_prefix + table] + tail) + "\n"

    fixed = len(join(""))
    if fixed >= 4 * budget:
        raise BudgetTooSmallError(f"prompt scaffolding alone needs {estimate_tokens(join(''))} tokens of {budget}")
    table, count = _fit_shap_table(attrs, features.names, 4 * budget - fixed)
    user_text = join(table)

    system_text = build_guard()
    assert all(clause in system_text for clause in GUARD_CLAUSES)
    images = tuple(("image/svg+xml", svg.encode("utf-8")) for svg in plots)
    return PromptBundle(kind, system_text, user_text, images, count)


# -- response parsing --------------------------------------------------------------

_HEADING = re.compile(r"^[ \t]*#{1,6}[ \t]*(SUMMARY|PER[_ ]FEATURE|CAVEATS)[ \t]*:?[ \t]*$", re.I | re.M)
_FENCE = re.compile(r"^[ \t]*```[\w+-]*[ \t]*$")
_BULLET = re.compile(r"^[ \t]*[-*+][ \t]+(.*)$")


def _section_name(match: re.Match) -> str:
    return match.group(1).upper().replace(" ", "_")


def _split_bullet(body: str) -> tuple[str, str]:
    if body.startswith("**"):
        end = body.find("**", 2)
        if end > 2:
            name = body[2:end].rstrip().rstrip(":").rstrip()
            rest = body[end + 2 :].lstrip()
            if rest.startswith(":"):
                rest = rest[1:]
            return name, rest.strip()
    name, sep, rest = body.partition(":")
    if not sep or not name.strip():
        raise FormatError("PER_FEATURE", f"bullet is not '- name: text': {body!r}")
    return name.strip().strip("`"), rest.strip()


def _parse_bullets(body: str) -> tuple[tuple[str, str], ...]:
    items: list[list[str]] = []
    for line in body.splitlines():
        m = _BULLET.match(line)
        if m:
            items.append(list(_split_bullet(m.group(1))))
        elif line.strip() and items:
            items[-1][1] = (items[-1][1] + "\n" + line.strip()).strip()
    if not items:
        raise FormatError("PER_FEATURE", "no '- name: text' bullets")
    return tuple((n, t) for n, t in items)


def _norm(s: str) -> str:
    return " ".join(s.replace("*", "").replace("`", "").split()).casefold()


def resolve_feature(name: str, features: FeatureSet, ctx: Optional[ExplanationContext] = None) -> Optional[str]:
    """Map a name written by the LLM back to a model feature, via aliases if needed."""
    ctx = ctx or ExplanationContext()
    lookup = {}
    for f in features.names:
        lookup[_norm(f)] = f
        alias = ctx.feature_aliases.get(f)
        if alias:
            lookup[_norm(alias)] = f
            lookup[_norm(f"{f} ({alias})")] = f
            lookup[_norm(f"{alias} ({f})")] = f
    key = _norm(name)
    if key in lookup:
        return lookup[key]
    # "AST (324)" or "AST (Aspartate ...)": fall back to the text before the bracket
    head = key.split("(", 1)[0].strip()
    return lookup.get(head)


def parse_response(
    raw: str,
    features: Optional[FeatureSet] = None,
    ctx: Optional[ExplanationContext] = None,
) -> ParsedExplanation:
    """Extract the SUMMARY, PER_FEATURE and CAVEATS sections, in any order.

    With ``features`` given, every PER_FEATURE name must resolve to a model
    feature (directly or through an alias).
    """
    text = "\n".join(line for line in raw.splitlines() if not _FENCE.match(line))
    matches = list(_HEADING.finditer(text))
    bodies: dict[str, str] = {}
    for k, m in enumerate(matches):
        name = _section_name(m)
        if name in bodies:
            raise FormatError(name, "section appears more than once")
        end = matches[k + 1].start() if k + 1 < len(matches) else len(text)
        bodies[name] = text[m.end() : end].strip()
    for name in SECTIONS:
        if name not in bodies:
            raise FormatError(name, "section missing")
        if not bodies[name]:
            raise FormatError(name, "section is empty")

    per_feature = _parse_bullets(bodies["PER_FEATURE"])
    resolved: tuple[str, ...] = ()
    if features is not None:
        out = []
        for name, _ in per_feature:
            feat = resolve_feature(name, features, ctx)
            if feat is None:
                raise FormatError("PER_FEATURE", f"{name!r} is not a model feature")
            out.append(feat)
        resolved = tuple(out)
    return ParsedExplanation(bodies["SUMMARY"], per_feature, bodies["CAVEATS"], resolved)


def render_response(summary: str, per_feature: Sequence[tuple[str, str]], caveats: str, order=SECTIONS) -> str:
    """Write a response in the mandated format (used for fixtures and tests)."""
    bodies = {
        "SUMMARY": summary,
        "PER_FEATURE": "\n".join(f"- {n}: {t}" for n, t in per_feature),
        "CAVEATS": caveats,
    }
    return "\n\n".join(f"### {name}\n{bodies[name]}" for name in order) + "\n"
