"""Random model generators and independent oracles.

The oracles work on the plain JSON dict of a model and share no code with
ctxshap: routing, coverage counting, coalition values and Shapley weights
are re-derived here from scratch.
"""

import itertools
import math
from fractions import Fraction

import numpy as np


def random_model_dict(
    rng,
    n_features,
    n_trees,
    max_depth,
    path_unique=False,
    dummies=(),
    objective="raw",
    leaf_scale=1.0,
):
    """A random ensemble as a model-schema dict; covers are placeholders (0)."""
    usable = [f for f in range(n_features) if f not in set(dummies)]
    trees = []
    for _ in range(n_trees):
        nodes = []

        def grow(depth, used):
            nid = len(nodes)
            nodes.append(None)
            candidates = [f for f in usable if not (path_unique and f in used)]
            if depth < max_depth and candidates and (depth == 0 or rng.random() < 0.8):
                feat = int(rng.choice(candidates))
                thr = float(np.round(rng.uniform(0.1, 0.9), 2))
                left = grow(depth + 1, used | {feat})
                right = grow(depth + 1, used | {feat})
                nodes[nid] = {"id": nid, "feature": feat, "threshold": thr, "left": left, "right": right, "cover": 0}
            else:
                nodes[nid] = {"id": nid, "leaf": float(np.round(rng.normal(0, leaf_scale), 3))}
            return nid

        grow(0, frozenset())
        trees.append({"root": 0, "nodes": nodes})
    return {
        "features": [f"f{i}" for i in range(n_features)],
        "base_score": float(np.round(rng.normal(0, 0.5), 3)),
        "objective": objective,
        "trees": trees,
    }


def random_background(rng, n_rows, n_features):
    return np.round(rng.uniform(0, 1, size=(n_rows, n_features)), 2)


# -- oracles -------------------------------------------------------------------


def _nodes(tree):
    return {n["id"]: n for n in tree["nodes"]}


def oracle_predict_margin(doc, x):
    """Naive recursive walk over the dict."""

    def walk(nodes, nid):
        n = nodes[nid]
        if "leaf" in n:
            return n["leaf"]
        child = n["left"] if x[n["feature"]] <= n["threshold"] else n["right"]
        return walk(nodes, child)

    total = 0.0
    for tree in doc["trees"]:
        total += walk(_nodes(tree), tree["root"])
    return total + doc["base_score"]


def oracle_covers(tree, background):
    """Count background rows reaching each node, one row at a time."""
    nodes = _nodes(tree)
    counts = {nid: 0 for nid in nodes}
    for row in background:
        nid = tree["root"]
        while True:
            counts[nid] += 1
            n = nodes[nid]
            if "leaf" in n:
                break
            nid = n["left"] if row[n["feature"]] <= n["threshold"] else n["right"]
    return counts


def oracle_exp_value(doc, background, x, S, exact=False):
    """Coverage-weighted expectation; with ``exact`` every quantity is a Fraction."""
    num = Fraction if exact else float
    total = num(0)
    for tree in doc["trees"]:
        nodes = _nodes(tree)
        covers = oracle_covers(tree, background)

        def g(nid):
            n = nodes[nid]
            if "leaf" in n:
                return num(n["leaf"])
            if n["feature"] in S:
                return g(n["left"] if x[n["feature"]] <= n["threshold"] else n["right"])
            c, cl, cr = covers[nid], covers[n["left"]], covers[n["right"]]
            out = num(0)
            if cl:
                out += g(n["left"]) * (Fraction(cl, c) if exact else cl / c)
            if cr:
                out += g(n["right"]) * (Fraction(cr, c) if exact else cr / c)
            return out

        total += g(tree["root"])
    return total + num(doc["base_score"])


def oracle_weight(n, s):
    return Fraction(math.factorial(s) * math.factorial(n - s - 1), math.factorial(n))


def oracle_shapley(doc, background, x, exact=False):
    """Textbook enumeration over subsets of F minus {i}."""
    n = len(doc["features"])
    phi = []
    for i in range(n):
        others = [f for f in range(n) if f != i]
        acc = Fraction(0) if exact else 0.0
        for size in range(n):
            w = oracle_weight(n, size) if exact else float(oracle_weight(n, size))
            for S in itertools.combinations(others, size):
                with_i = oracle_exp_value(doc, background, x, set(S) | {i}, exact)
                without = oracle_exp_value(doc, background, x, set(S), exact)
                acc += w * (with_i - without)
        phi.append(acc)
    return phi


def path_unique(doc):
    """True when no feature repeats along any root-to-leaf path."""
    for tree in doc["trees"]:
        nodes = _nodes(tree)
        stack = [(tree["root"], frozenset())]
        while stack:
            nid, used = stack.pop()
            n = nodes[nid]
            if "leaf" in n:
                continue
            if n["feature"] in used:
                return False
            used = used | {n["feature"]}
            stack += [(n["left"], used), (n["right"], used)]
    return True


def reachable_case(rng, n_features, n_trees, max_depth, n_rows=60, **kw):
    """Draw (doc, background) until every node of every tree is reached by some row."""
    while True:
        doc = random_model_dict(rng, n_features, n_trees, max_depth, **kw)
        bg = random_background(rng, n_rows, n_features)
        if all(min(oracle_covers(t, bg).values()) > 0 for t in doc["trees"]):
            return doc, bg


# -- prompt scenarios ------------------------------------------------------------

GOLDEN_SCENARIOS = ("general_english", "general_japanese", "expert_indonesian")


def golden_bundle(name, model, instances, ctx, budget=None):
    """Assemble one of the fixed prompt scenarios from the liver-panel fixture.

    ``budget`` overrides the scenario's own token budget.
    """
    from dataclasses import replace

    from ctxshap.attribution import aggregate_global, shapley_batch
    from ctxshap.plots import build_bar, build_waterfall, render_svg
    from ctxshap.prompt import assemble

    attrs = shapley_batch(model, instances)
    names = model.features.names
    if name == "general_english":
        plot = render_svg(build_waterfall(attrs[0], names))
        return assemble("waterfall", attrs[:1], [plot], model.features, ctx, budget=budget or 4096)
    if name == "general_japanese":
        plot = render_svg(build_bar(aggregate_global(attrs), names))
        return assemble("bar", attrs, [plot], model.features, replace(ctx, language="Japanese"), budget=budget or 1200)
    if name == "expert_indonesian":
        sparse = replace(
            ctx,
            language="Indonesian",
            reader="expert",
            additional_background=None,
            feature_descriptions={k: v for k, v in ctx.feature_descriptions.items() if k not in ("Age", "Sex")},
        )
        plot = render_svg(build_waterfall(attrs[3], names))
        return assemble("waterfall", attrs[3:4], [plot], model.features, sparse, budget=budget or 2048)
    raise KeyError(name)


def data_driven_case(rng, n_features, n_trees, max_depth, n_rows=128, path_unique=False, dummies=()):
    """Ensemble whose thresholds split the background rows reaching each node.

    Each split sends at least one row each way, so every node has positive cover.
    Returns (doc, background) with a continuous background (no ties).
    """
    bg = rng.uniform(0, 1, size=(n_rows, n_features))
    usable = [f for f in range(n_features) if f not in set(dummies)]
    trees = []
    for _ in range(n_trees):
        nodes = []

        def grow(rows, depth, used):
            nid = len(nodes)
            nodes.append(None)
            candidates = [f for f in usable if not (path_unique and f in used)]
            if depth < max_depth and candidates and len(rows) >= 2 and (depth == 0 or rng.random() < 0.8):
                feat = int(rng.choice(candidates))
                vals = np.sort(bg[rows, feat])
                k = int(np.clip(round(rng.uniform(0.3, 0.7) * len(vals)), 1, len(vals) - 1))
                thr = float(vals[k - 1])
                go_left = bg[rows, feat] <= thr
                left = grow(rows[go_left], depth + 1, used | {feat})
                right = grow(rows[~go_left], depth + 1, used | {feat})
                nodes[nid] = {"id": nid, "feature": feat, "threshold": thr, "left": left, "right": right, "cover": 0}
            else:
                nodes[nid] = {"id": nid, "leaf": float(rng.normal())}
            return nid

        grow(np.arange(n_rows), 0, frozenset())
        trees.append({"root": 0, "nodes": nodes})
    doc = {
        "features": [f"f{i}" for i in range(n_features)],
        "base_score": float(rng.normal(0, 0.5)),
        "objective": "raw",
        "trees": trees,
    }
    return doc, bg
