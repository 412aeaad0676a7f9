"""Rasterize the SVG subset emitted by :mod:`ctxshap.plots` to PNG.

Only ``rect``, ``line`` and ``text`` elements are drawn. Output is a plain
PNG with no metadata chunks, so the same SVG always yields the same bytes
for a given Pillow build.
"""

from __future__ import annotations

import io
import xml.etree.ElementTree as ET

from PIL import Image, ImageDraw, ImageFont

_NS = "{http://www.w3.org/2000/svg}"


def _f(el, name, default=0.0) -> float:
    v = el.get(name)
    return float(v) if v is not None else default


def svg_to_png(svg: str | bytes, scale: float = 1.0) -> bytes:
    if isinstance(svg, str):
        svg = svg.encode("utf-8")
    root = ET.fromstring(svg)
    width = int(round(_f(root, "width", 720) * scale))
    height = int(round(_f(root, "height", 480) * scale))
    img = Image.new("RGB", (width, height), "white")
    draw = ImageDraw.Draw(img)
    fonts: dict[int, ImageFont.ImageFont] = {}

    def font(size: float):
        px = max(int(round(size * scale)), 6)
        if px not in fonts:
            try:
                fonts[px] = ImageFont.load_default(size=px)
            except TypeError:  # Pillow < 10.1 has a single bitmap font
                fonts[px] = ImageFont.load_default()
        return fonts[px]

    for el in root.iter():
        tag = el.tag.replace(_NS, "")
        if tag == "rect":
            x, y = _f(el, "x") * scale, _f(el, "y") * scale
            w, h = _f(el, "width") * scale, _f(el, "height") * scale
            if w > 0 and h > 0:
                draw.rectangle([x, y, x + w, y + h], fill=el.get("fill", "#000000"))
        elif tag == "line":
            pts = [_f(el, k) * scale for k in ("x1", "y1", "x2", "y2")]
            draw.line(pts, fill=el.get("stroke", "#000000"), width=max(int(round(scale)), 1))
        elif tag == "text" and el.text:
            anchor = {"start": "ls", "middle": "ms", "end": "rs"}.get(el.get("text-anchor", "start"), "ls")
            fnt = font(_f(el, "font-size", 12))
            pos = (_f(el, "x") * scale, _f(el, "y") * scale)
            try:
                draw.text(pos, el.text, fill=el.get("fill", "#000000"), font=fnt, anchor=anchor)
            except ValueError:  # bitmap fonts do not support anchors
                draw.text(pos, el.text, fill=el.get("fill", "#000000"), font=fnt)

    buf = io.BytesIO()
    img.save(buf, format="PNG", optimize=False)
    return buf.getvalue()
