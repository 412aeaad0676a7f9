"""Shapley attributions for tree ensembles, explained in context by an LLM."""

__version__ = "0.1.0"

from ctxshap.attribution import (  # noqa: E402
    Attribution,
    CoalitionMask,
    GlobalAttribution,
    aggregate_global,
    exp_value,
    shapley,
    shapley_batch,
)
from ctxshap.model import (  # noqa: E402
    Dataset,
    FeatureSet,
    Instance,
    TreeEnsemble,
    fit_coverage,
    load_model,
    parse_model,
    predict,
    predict_margin,
    read_csv,
    serialize_model,
)
from ctxshap.plots import build_bar, build_waterfall, render_svg  # noqa: E402
from ctxshap.prompt import ExplanationContext, assemble, build_guard, parse_response  # noqa: E402

__all__ = [
    "Attribution",
    "CoalitionMask",
    "Dataset",
    "ExplanationContext",
    "FeatureSet",
    "GlobalAttribution",
    "Instance",
    "TreeEnsemble",
    "aggregate_global",
    "assemble",
    "build_bar",
    "build_guard",
    "build_waterfall",
    "exp_value",
    "fit_coverage",
    "load_model",
    "parse_model",
    "parse_response",
    "predict",
    "predict_margin",
    "read_csv",
    "render_svg",
    "serialize_model",
    "shapley",
    "shapley_batch",
]
