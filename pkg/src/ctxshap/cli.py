"""``ctxshap`` command line: shap, explain and validate.

Exit codes: 0 ok, 1 validation failed, 2 parse/schema/missing input,
3 width or compatibility, 4 enumeration cap exceeded, 5 gateway failure,
6 malformed LLM response. Written file paths go to stdout, diagnostics to
stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from ctxshap import __version__
from ctxshap.attribution import (
    DEFAULT_MAX_FEATURES,
    CoalitionMask,
    aggregate_global,
    exp_value,
    export_attributions,
    shapley_batch,
)
from ctxshap.errors import (
    CoverageError,
    CtxShapError,
    FormatError,
    GatewayError,
    InvalidValueError,
    SchemaError,
    StructureError,
    TooManyFeaturesError,
    UnknownFeatureError,
    WidthError,
)
from ctxshap.gateway import DEFAULT_KEY_ENV, GatewayConfig, send
from ctxshap.model import (
    Dataset,
    TreeEnsemble,
    fit_coverage,
    instance_from_mapping,
    load_model,
    predict_margin,
    read_csv,
)
from ctxshap.plots import Theme, build_bar, build_waterfall, render_svg
from ctxshap.prompt import TEMPLATE_VERSION, ExplanationContext, assemble, load_context, parse_response

log = logging.getLogger("ctxshap")

EXIT_OK, EXIT_INVALID, EXIT_PARSE, EXIT_WIDTH, EXIT_CAP, EXIT_GATEWAY, EXIT_FORMAT = 0, 1, 2, 3, 4, 5, 6


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, TooManyFeaturesError):
        return EXIT_CAP
    if isinstance(exc, (WidthError, UnknownFeatureError, CoverageError)):
        return EXIT_WIDTH
    if isinstance(exc, GatewayError):
        return EXIT_GATEWAY
    if isinstance(exc, FormatError):
        return EXIT_FORMAT
    return EXIT_PARSE


def _read_model(path) -> TreeEnsemble:
    if path is None:
        raise CliError("--model is required", EXIT_PARSE)
    try:
        return load_model(path)
    except OSError as exc:
        raise CliError(f"cannot read model {path}: {exc.strerror or exc}", EXIT_PARSE) from None


def _read_csv(path, model: TreeEnsemble, what: str) -> Dataset:
    try:
        return read_csv(path, model.features)
    except OSError as exc:
        raise CliError(f"cannot read {what} {path}: {exc.strerror or exc}", EXIT_PARSE) from None


def _read_context(path) -> ExplanationContext:
    if path is None:
        return ExplanationContext()
    try:
        return load_context(path)
    except OSError as exc:
        raise CliError(f"cannot read context {path}: {exc.strerror or exc}", EXIT_PARSE) from None


def _read_theme(path) -> Theme:
    if not path:
        return Theme()
    try:
        return Theme.from_json(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"cannot read theme {path}: {exc.strerror or exc}", EXIT_PARSE) from None
    except (ValueError, TypeError) as exc:
        raise CliError(f"theme {path}: {exc}", EXIT_PARSE) from None


def _instances(args, model: TreeEnsemble, background: Dataset) -> Dataset:
    if args.instance_json is not None:
        try:
            doc = json.loads(args.instance_json)
        except json.JSONDecodeError as exc:
            raise CliError(f"--instance-json is not valid JSON: {exc}", EXIT_PARSE) from None
        if not isinstance(doc, dict):
            raise CliError("--instance-json must be an object of feature: value", EXIT_PARSE)
        x = instance_from_mapping(model.features, doc)
        return Dataset(model.features, [x.values])
    data = _read_csv(args.instances, model, "instances") if args.instances else background
    if args.index is not None:
        if not 0 <= args.index < len(data):
            raise CliError(f"--index {args.index} out of range for {len(data)} rows", EXIT_WIDTH)
        return Dataset(model.features, data.rows[args.index : args.index + 1])
    return data


def _prepare(args):
    model = _read_model(args.model)
    if args.background is None:
        raise CliError("--background is required to fit node coverage", EXIT_PARSE)
    background = _read_csv(args.background, model, "background")
    model = fit_coverage(model, background)
    return model, background


def _write(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8", newline="\n")
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _attribute(args, model, data):
    attrs = shapley_batch(model, data, cap=args.cap, n_jobs=args.jobs)
    worst = max(a.efficiency_residual for a in attrs)
    print(
        f"efficiency check: {len(attrs)} instance(s), max |sum(phi) - (f(x) - E[f(X)])| = {worst:.3g}",
        file=sys.stderr,
    )
    return attrs


def cmd_shap(args) -> int:
    model, background = _prepare(args)
    data = _instances(args, model, background)
    attrs = _attribute(args, model, data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = _write(out / "attributions.json", export_attributions(attrs, model.features.names) + "\n")
    print(path)
    return EXIT_OK


def _gateway_config(args) -> GatewayConfig:
    price = None
    if args.price_input is not None or args.price_output is not None:
        price = {"input_per_1k": args.price_input or 0.0, "output_per_1k": args.price_output or 0.0}
    try:
        return GatewayConfig(
            base_url=args.base_url,
            model_name=args.llm_model,
            api_key_env=args.api_key_env,
            timeout_s=args.timeout,
            max_retries=args.max_retries,
            mode=args.mode,
            fixture_dir=args.fixtures,
            raster=not args.no_raster,
            price_table=price,
        )
    except InvalidValueError as exc:
        raise CliError(f"gateway settings: {exc}", EXIT_PARSE) from None


def cmd_explain(args) -> int:
    model, background = _prepare(args)
    ctx = _read_context(args.context)
    ctx.validate(model.features)
    if args.kind == "waterfall" and args.index is None and args.instance_json is None:
        raise CliError("a waterfall explains one prediction: pass --index or --instance-json", EXIT_PARSE)
    cfg = None if args.no_llm else _gateway_config(args)

    data = _instances(args, model, background)
    attrs = _attribute(args, model, data)
    labels = [ctx.display_name(n) for n in model.features.names]
    theme = _read_theme(args.theme)
    if args.kind == "waterfall":
        spec = build_waterfall(attrs[0], labels, data.rows[0].tolist(), max_steps=args.max_display)
    else:
        spec = build_bar(aggregate_global(attrs), labels, max_bars=args.max_display)
    svg = render_svg(spec, theme)
    bundle = assemble(args.kind, attrs, [svg], model.features, ctx, budget=args.budget)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "attributions": _write(out / "attributions.json", export_attributions(attrs, model.features.names) + "\n"),
        "plot": _write(out / "plot.svg", svg),
        "prompt": _write(out / "prompt.md", bundle.dump()),
    }
    report = {
        "tool": "ctxshap",
        "version": __version__,
        "template_version": TEMPLATE_VERSION,
        "kind": args.kind,
        "sample_count": bundle.sample_count,
        "estimated_prompt_tokens": bundle.estimated_tokens,
        "explanation": None,
        "telemetry": None,
    }

    if cfg is not None:
        result = send(bundle, cfg)
        report["telemetry"] = result.telemetry()
        report["prompt_key"] = result.key
        try:
            parsed = parse_response(result.raw_text, model.features, ctx)
        except FormatError:
            raw_path = _write(out / "raw_response.txt", result.raw_text)
            print(raw_path)
            raise
        report["explanation"] = parsed.to_dict()
        files["explanation"] = _write(out / "explanation.json", json.dumps(parsed.to_dict(), indent=2) + "\n")

    report["files"] = {name: path.name for name, path in files.items()}
    report["hashes"] = {path.name: _sha256(path) for path in files.values()}
    files["report"] = _write(out / "report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    for path in files.values():
        print(path)
    return EXIT_OK


def validate_model(model: TreeEnsemble, background: Optional[Dataset] = None) -> list[tuple[str, bool, str]]:
    """Run the model invariants and return ``(check, passed, detail)`` rows."""
    rows = [("structure", True, f"{len(model.trees)} tree(s), {model.n_features} feature(s)")]

    bad_sums, unknown = [], 0
    for t, tree in enumerate(model.trees):
        covers = {n.id: n.cover for n in tree.nodes}
        for n in tree.nodes:
            if n.is_leaf:
                continue
            left, right = covers[n.left], covers[n.right]
            if left is None or right is None:
                unknown += 1
            elif left + right != n.cover:
                bad_sums.append(f"tree {t} node {n.id}: cover {n.cover} != {left} + {right}")
    detail = "; ".join(bad_sums) if bad_sums else "all known covers add up"
    if unknown:
        detail += f" ({unknown} split(s) without child covers; fit on a background to complete)"
    rows.append(("coverage sums", not bad_sums, detail))

    bad_frac = [
        f"tree {t} node {n.id}: {n.left_fraction}"
        for t, tree in enumerate(model.trees)
        for n in tree.nodes
        if n.left_fraction is not None and not 0.0 <= n.left_fraction <= 1.0
    ]
    rows.append(("left fractions", not bad_frac, "; ".join(bad_frac) or "all within [0, 1]"))

    unused = [model.features.names[i] for i in range(model.n_features) if i not in model.used_features()]
    rows.append(
        (
            "dummy features",
            True,
            f"never split on, attribution is exactly 0: {', '.join(unused)}" if unused else "every feature is used",
        )
    )

    if background is not None:
        fitted = fit_coverage(model, background)
        mismatches = 0
        full = CoalitionMask.full(fitted.n_features)
        for x in background.instances()[:64]:
            if abs(exp_value(fitted, x, full) - predict_margin(fitted, x)) > 1e-12:
                mismatches += 1
        rows.append(("full-coalition value", mismatches == 0, f"{mismatches} row(s) disagree with predict"))
    return rows


def cmd_validate(args) -> int:
    try:
        model = _read_model(args.model)
    except (SchemaError, StructureError, InvalidValueError) as exc:
        print(f"{'structure':<22} FAIL  {type(exc).__name__}: {exc}")
        return EXIT_INVALID
    background = _read_csv(args.background, model, "background") if args.background else None
    rows = validate_model(model, background)
    for name, ok, detail in rows:
        print(f"{name:<22} {'PASS' if ok else 'FAIL':<5} {detail}")
    return EXIT_OK if all(ok for _, ok, _ in rows) else EXIT_INVALID


def _common(p: argparse.ArgumentParser):
    p.add_argument("--model", help="model JSON file")
    p.add_argument("--background", help="background CSV (header row) used to fit node coverage")
    p.add_argument("--instances", help="CSV of instances to explain (default: the background)")
    p.add_argument("--index", type=int, help="row of the instance file to explain")
    p.add_argument("--instance-json", help='inline instance, e.g. \'{"AST": 324, ...}\'')
    p.add_argument("--out", default="ctxshap-out", help="output directory")
    p.add_argument("--cap", type=int, default=DEFAULT_MAX_FEATURES, help="max features for exact enumeration")
    p.add_argument("--jobs", type=int, default=1, help="threads for per-instance attribution")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctxshap", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ctxshap {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("shap", help="compute and export Shapley attributions")
    _common(p)
    p.set_defaults(func=cmd_shap)

    p = sub.add_parser("explain", help="plot, prompt the LLM and write a report")
    _common(p)
    p.add_argument("--kind", choices=("bar", "waterfall"), required=True)
    p.add_argument("--context", help="context JSON (aliases, descriptions, background, language, reader)")
    p.add_argument("--budget", type=int, default=4096, help="token budget for the user prompt")
    p.add_argument("--max-display", type=int, default=9, help="bars/steps shown before folding the rest")
    p.add_argument("--theme", help="theme JSON for the SVG plot")
    p.add_argument("--no-llm", action="store_true", help="stop after writing the plot and prompt")
    p.add_argument("--mode", choices=("live", "record", "replay"), default="live")
    p.add_argument("--fixtures", help="fixture directory for record/replay")
    p.add_argument("--base-url", default="https://api.openai.com/v1")
    p.add_argument("--llm-model", default="gpt-4o")
    p.add_argument("--api-key-env", default=DEFAULT_KEY_ENV)
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--max-retries", type=int, default=3)
    p.add_argument("--no-raster", action="store_true", help="attach SVG instead of PNG")
    p.add_argument("--price-input", type=float, help="price per 1K prompt tokens")
    p.add_argument("--price-output", type=float, help="price per 1K completion tokens")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("validate", help="check model invariants")
    p.add_argument("--model", help="model JSON file")
    p.add_argument("--background", help="optional background CSV for prediction consistency checks")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except CtxShapError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
