"""Bar and waterfall plots as deterministic SVG text.

Layout numbers are fixed-point formatted and no timestamps or ids are
emitted, so identical specs always render to identical bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Union
from xml.sax.saxutils import escape, quoteattr

from ctxshap.attribution import Attribution, GlobalAttribution
from ctxshap.errors import InvalidValueError, WidthError

DEFAULT_MAX_BARS = 9
DEFAULT_MAX_STEPS = 9
ENDPOINT_TOL = 1e-9


@dataclass(frozen=True)
class Theme:
    positive_color: str = "#ff0d57"
    negative_color: str = "#1e88e5"
    font_family: str = "DejaVu Sans, Arial, sans-serif"
    width_px: int = 720
    height_px: int = 480

    @classmethod
    def from_dict(cls, doc: dict) -> "Theme":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidValueError(f"unknown theme keys {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def from_json(cls, text: str) -> "Theme":
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BarPlotSpec:
    entries: tuple[tuple[str, float], ...]
    max_bars: int = DEFAULT_MAX_BARS
    other_sum: float = 0.0
    other_count: int = 0

    def __post_init__(self):
        values = [v for _, v in self.entries]
        if any(a < b for a, b in zip(values, values[1:])):
            raise InvalidValueError("bar entries must be sorted by value, descending")
        if len(self.entries) > self.max_bars:
            raise InvalidValueError(f"{len(self.entries)} bars exceed max_bars={self.max_bars}")
        if self.other_sum < 0:
            raise InvalidValueError("other_sum must be non-negative")


@dataclass(frozen=True)
class WaterfallSpec:
    base_value: float
    prediction: float
    steps: tuple[tuple[str, Optional[float], float], ...]
    hidden_sum: float = 0.0
    hidden_count: int = 0

    def __post_init__(self):
        end = self.base_value + math.fsum([c for _, _, c in self.steps] + [self.hidden_sum])
        if abs(end - self.prediction) > ENDPOINT_TOL:
            raise InvalidValueError(
                f"base {self.base_value!r} + steps lands at {end!r}, not at prediction {self.prediction!r}"
            )

    @property
    def endpoint(self) -> float:
        """Where the drawn steps actually end."""
        return self.base_value + math.fsum([c for _, _, c in self.steps] + [self.hidden_sum])


def build_bar(global_attr: GlobalAttribution, labels: Sequence[str], max_bars: int = DEFAULT_MAX_BARS) -> BarPlotSpec:
    values = global_attr.mean_abs_phi
    if len(labels) != len(values):
        raise WidthError(f"{len(labels)} labels for {len(values)} features")
    if max_bars < 1:
        raise InvalidValueError("max_bars must be at least 1")
    order = sorted(range(len(values)), key=lambda i: (-values[i], i))
    shown, rest = order[:max_bars], order[max_bars:]
    return BarPlotSpec(
        entries=tuple((labels[i], values[i]) for i in shown),
        max_bars=max_bars,
        other_sum=math.fsum(values[i] for i in rest),
        other_count=len(rest),
    )


def build_waterfall(
    attr: Attribution,
    labels: Sequence[str],
    raw_values: Optional[Sequence[float]] = None,
    max_steps: int = DEFAULT_MAX_STEPS,
) -> WaterfallSpec:
    phi = attr.phi
    if raw_values is None and attr.instance is not None:
        raw_values = attr.instance.values
    if len(labels) != len(phi):
        raise WidthError(f"{len(labels)} labels for {len(phi)} features")
    if raw_values is not None and len(raw_values) != len(phi):
        raise WidthError(f"{len(raw_values)} raw values for {len(phi)} features")
    if max_steps < 1:
        raise InvalidValueError("max_steps must be at least 1")
    order = sorted(range(len(phi)), key=lambda i: (-abs(phi[i]), i))
    shown, rest = order[:max_steps], order[max_steps:]
    steps = tuple((labels[i], None if raw_values is None else float(raw_values[i]), phi[i]) for i in shown)
    return WaterfallSpec(
        base_value=attr.base_value,
        prediction=attr.prediction,
        steps=steps,
        hidden_sum=math.fsum(phi[i] for i in rest),
        hidden_count=len(rest),
    )


# -- formatting ----------------------------------------------------------------


def fmt_axis(v: float) -> str:
    s = f"{v:.2f}"
    return "0.00" if s == "-0.00" else s


def fmt_step(v: float) -> str:
    s = f"{v:+.3f}"
    return "+0.000" if s == "-0.000" else s


def fmt_base(v: float) -> str:
    s = f"{v:.3f}"
    return "0.000" if s == "-0.000" else s


def fmt_raw(v: float) -> str:
    return f"{v:.6g}"


def step_label(label: str, raw_value: Optional[float]) -> str:
    return label if raw_value is None else f"{label} ({fmt_raw(raw_value)})"


# -- SVG -------------------------------------------------------------------------


def _n(v: float) -> str:
    s = f"{v:.2f}"
    return "0.00" if s == "-0.00" else s


class _Canvas:
    def __init__(self, theme: Theme):
        self.theme = theme
        self.parts: list[str] = []

    def rect(self, x, y, w, h, fill, cls):
        self.parts.append(
            f'<rect class="{cls}" x="{_n(x)}" y="{_n(y)}" width="{_n(w)}" height="{_n(h)}" fill="{fill}"/>'
        )

    def line(self, x1, y1, x2, y2, stroke="#888888", cls="guide", dashed=False):
        dash = ' stroke-dasharray="4,3"' if dashed else ""
        self.parts.append(
            f'<line class="{cls}" x1="{_n(x1)}" y1="{_n(y1)}" x2="{_n(x2)}" y2="{_n(y2)}" '
            f'stroke="{stroke}" stroke-width="1"{dash}/>'
        )

    def text(self, x, y, content, anchor="start", cls="label", size=12, fill="#333333"):
        self.parts.append(
            f'<text class="{cls}" x="{_n(x)}" y="{_n(y)}" text-anchor="{anchor}" '
            f'font-size="{size}" fill="{fill}">{escape(content)}</text>'
        )

    def document(self) -> str:
        t = self.theme
        head = (
            '<?xml version="1.0" encoding="UTF-8" standalone="no"?>\n'
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{t.width_px}" '
            f'height="{t.height_px}" viewBox="0 0 {t.width_px} {t.height_px}" '
            f"font-family={quoteattr(t.font_family)}>\n"
            f'<rect class="background" x="0" y="0" width="{t.width_px}" height="{t.height_px}" fill="#ffffff"/>\n'
        )
        return head + "\n".join(self.parts) + "\n</svg>\n"


class _Scale:
    def __init__(self, lo: float, hi: float, px_lo: float, px_hi: float):
        if hi - lo <= 0:
            pad = max(abs(lo), 1.0) * 0.1
            lo, hi = lo - pad, hi + pad
        else:
            pad = (hi - lo) * 0.08
            lo, hi = lo - pad, hi + pad
        self.lo, self.hi, self.px_lo, self.px_hi = lo, hi, px_lo, px_hi

    def __call__(self, v: float) -> float:
        return self.px_lo + (v - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo)

    def ticks(self, n: int = 5) -> list[float]:
        return [self.lo + (self.hi - self.lo) * k / (n - 1) for k in range(n)]


_LEFT, _RIGHT, _TOP, _BOTTOM = 230.0, 40.0, 50.0, 60.0


def _axis(c: _Canvas, scale: _Scale, y: float, title: str):
    c.line(scale.px_lo, y, scale.px_hi, y, stroke="#333333", cls="axis")
    for tick in scale.ticks():
        x = scale(tick)
        c.line(x, y, x, y + 4, stroke="#333333", cls="tick")
        c.text(x, y + 16, fmt_axis(tick), anchor="middle", cls="tick-label", size=10)
    c.text((scale.px_lo + scale.px_hi) / 2, y + 34, title, anchor="middle", cls="axis-title")


def _render_waterfall(spec: WaterfallSpec, theme: Theme) -> str:
    c = _Canvas(theme)
    rows = [(step_label(lbl, raw), contrib) for lbl, raw, contrib in spec.steps]
    if spec.hidden_count:
        rows.append((f"{spec.hidden_count} other features", spec.hidden_sum))

    # accumulate bottom-up: the last row starts at the base value, the first ends at f(x)
    spans = [None] * len(rows)
    pos = spec.base_value
    for k in range(len(rows) - 1, -1, -1):
        start, pos = pos, pos + rows[k][1]
        spans[k] = (start, pos)
    points = [spec.base_value, spec.prediction] + [p for span in spans for p in span]
    plot_top, plot_bottom = _TOP, theme.height_px - _BOTTOM
    scale = _Scale(min(points), max(points), _LEFT, theme.width_px - _RIGHT)
    row_h = (plot_bottom - plot_top) / max(len(rows), 1)

    x_fx, x_base = scale(spec.prediction), scale(spec.base_value)
    c.line(x_fx, plot_top - 8, x_fx, plot_bottom, dashed=True, cls="endpoint")
    c.line(x_base, plot_top, x_base, plot_bottom + 4, dashed=True, cls="endpoint")

    for k, ((label, contrib), (start, end)) in enumerate(zip(rows, spans)):
        y = plot_top + k * row_h
        sign = "positive" if contrib >= 0 else "negative"
        fill = theme.positive_color if contrib >= 0 else theme.negative_color
        x0, x1 = scale(min(start, end)), scale(max(start, end))
        c.rect(x0, y + row_h * 0.15, x1 - x0, row_h * 0.7, fill, f"step {sign}")
        mid = y + row_h * 0.5 + 4
        c.text(_LEFT - 8, mid, label, anchor="end", cls="feature-label")
        if contrib >= 0:
            c.text(x1 + 4, mid, fmt_step(contrib), anchor="start", cls="step-value", fill=fill)
        else:
            c.text(x0 - 4, mid, fmt_step(contrib), anchor="end", cls="step-value", fill=fill)

    c.text(x_fx - 4, plot_top - 14, "f(x) =", anchor="end", cls="endpoint-label")
    c.text(x_fx, plot_top - 14, fmt_axis(spec.prediction), anchor="start", cls="endpoint-value prediction")
    _axis(c, scale, plot_bottom + 4, "model output (raw margin)")
    c.text(x_base - 4, theme.height_px - 6, "E[f(X)] =", anchor="end", cls="endpoint-label")
    c.text(x_base, theme.height_px - 6, fmt_base(spec.base_value), anchor="start", cls="endpoint-value base")
    return c.document()


def _render_bar(spec: BarPlotSpec, theme: Theme) -> str:
    c = _Canvas(theme)
    rows = list(spec.entries)
    if spec.other_count:
        rows.append((f"Sum of {spec.other_count} other features", spec.other_sum))
    plot_top, plot_bottom = _TOP, theme.height_px - _BOTTOM
    top = max([v for _, v in rows] + [0.0])
    scale = _Scale(0.0, top, _LEFT, theme.width_px - _RIGHT)
    # bars grow from zero, not from the padded domain edge
    scale.lo = 0.0
    row_h = (plot_bottom - plot_top) / max(len(rows), 1)
    x_zero = scale(0.0)
    c.line(x_zero, plot_top, x_zero, plot_bottom, stroke="#333333", cls="zero")
    for k, (label, value) in enumerate(rows):
        y = plot_top + k * row_h
        x1 = scale(value)
        c.rect(x_zero, y + row_h * 0.15, x1 - x_zero, row_h * 0.7, theme.positive_color, "bar positive")
        mid = y + row_h * 0.5 + 4
        c.text(_LEFT - 8, mid, label, anchor="end", cls="feature-label")
        c.text(x1 + 4, mid, fmt_step(value), anchor="start", cls="bar-value", fill=theme.positive_color)
    _axis(c, scale, plot_bottom + 4, "mean(|SHAP value|)")
    return c.document()


def render_svg(spec: Union[BarPlotSpec, WaterfallSpec], theme: Optional[Theme] = None) -> str:
    theme = theme or Theme()
    if isinstance(spec, WaterfallSpec):
        return _render_waterfall(spec, theme)
    if isinstance(spec, BarPlotSpec):
        return _render_bar(spec, theme)
    raise TypeError(f"cannot render {type(spec).__name__}")
