"""Minimal deterministic SVG line plots.

Hand-rolled so that repeated runs emit byte-identical files: fixed palette,
fixed float formatting, no timestamps or library version strings.
"""

import math

PALETTE = ("#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02")

MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 62, 16, 34, 44


def _f(x):
    return format(float(x), ".6g")


def _nice_ticks(lo, hi, target=6):
    if not math.isfinite(lo) or not math.isfinite(hi):
        return [0.0]
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / target
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        if raw <= mult * mag:
            step = mult * mag
            break
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 1e-12 * step:
        ticks.append(0.0 if abs(t) < 1e-12 * step else t)
        t += step
    return ticks


class LinePlot:
    def __init__(self, title, xlabel, ylabel, width=880, height=360):
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel
        self.width, self.height = width, height
        self.series = []     # (label, xs, ys, color, dash)
        self.hlines = []     # (y, label, color)
        self.vlines = []     # (x, label, color)
        self.band = None     # (lo, hi)

    def add_series(self, label, xs, ys, color=None, dash=None):
        color = color or PALETTE[len(self.series) % len(PALETTE)]
        self.series.append((label, list(map(float, xs)), list(map(float, ys)),
                            color, dash))

    def add_hline(self, y, label, color="#d62728"):
        self.hlines.append((float(y), label, color))

    def add_vline(self, x, label, color="#555555"):
        self.vlines.append((float(x), label, color))

    def set_band(self, lo, hi):
        self.band = (float(lo), float(hi))

    def _limits(self):
        xs = [x for _, sx, _, _, _ in self.series for x in sx]
        ys = [y for _, _, sy, _, _ in self.series for y in sy if math.isfinite(y)]
        ys += [y for y, _, _ in self.hlines]
        if self.band:
            ys += list(self.band)
        if not xs:
            xs = [0.0, 1.0]
        if not ys:
            ys = [0.0, 1.0]
        x_lo, x_hi = min(xs), max(xs)
        y_lo, y_hi = min(ys), max(ys)
        if x_hi == x_lo:
            x_hi = x_lo + 1.0
        pad = 0.06 * (y_hi - y_lo) or 1.0
        return x_lo, x_hi, y_lo - pad, y_hi + pad

    def render(self):
        x_lo, x_hi, y_lo, y_hi = self._limits()
        pw = self.width - MARGIN_L - MARGIN_R
        ph = self.height - MARGIN_T - MARGIN_B

        def sx(x):
            return MARGIN_L + pw * (x - x_lo) / (x_hi - x_lo)

        def sy(y):
            return MARGIN_T + ph * (1.0 - (y - y_lo) / (y_hi - y_lo))

        out = []
        out.append(f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" '
                   f'height="{self.height}" viewBox="0 0 {self.width} {self.height}">')
        out.append('<rect width="100%" height="100%" fill="white"/>')
        out.append(f'<text x="{self.width // 2}" y="20" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="14">{self.title}</text>')

        if self.band is not None:
            lo, hi = self.band
            y0, y1 = sy(min(hi, y_hi)), sy(max(lo, y_lo))
            out.append(f'<rect x="{_f(MARGIN_L)}" y="{_f(y0)}" width="{_f(pw)}" '
                       f'height="{_f(max(y1 - y0, 0.0))}" fill="#dff0df"/>')

        for t in _nice_ticks(x_lo, x_hi):
            px = sx(t)
            out.append(f'<line x1="{_f(px)}" y1="{MARGIN_T}" x2="{_f(px)}" '
                       f'y2="{MARGIN_T + ph}" stroke="#e0e0e0" stroke-width="1"/>')
            out.append(f'<text x="{_f(px)}" y="{MARGIN_T + ph + 16}" text-anchor="middle" '
                       f'font-family="sans-serif" font-size="11">{_f(t)}</text>')
        for t in _nice_ticks(y_lo, y_hi):
            py = sy(t)
            out.append(f'<line x1="{MARGIN_L}" y1="{_f(py)}" x2="{MARGIN_L + pw}" '
                       f'y2="{_f(py)}" stroke="#e0e0e0" stroke-width="1"/>')
            out.append(f'<text x="{MARGIN_L - 6}" y="{_f(py + 4)}" text-anchor="end" '
                       f'font-family="sans-serif" font-size="11">{_f(t)}</text>')

        out.append(f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" '
                   f'fill="none" stroke="#333333" stroke-width="1"/>')

        for x, label, color in self.vlines:
            px = sx(min(max(x, x_lo), x_hi))
            out.append(f'<line x1="{_f(px)}" y1="{MARGIN_T}" x2="{_f(px)}" '
                       f'y2="{MARGIN_T + ph}" stroke="{color}" stroke-width="1.2" '
                       f'stroke-dasharray="3,3"/>')
            out.append(f'<text x="{_f(px + 4)}" y="{MARGIN_T + ph - 6}" '
                       f'font-family="sans-serif" font-size="10" fill="{color}">'
                       f'{label}</text>')

        for y, label, color in self.hlines:
            py = sy(y)
            out.append(f'<line x1="{MARGIN_L}" y1="{_f(py)}" x2="{MARGIN_L + pw}" '
                       f'y2="{_f(py)}" stroke="{color}" stroke-width="1.2" '
                       f'stroke-dasharray="6,4"/>')
            out.append(f'<text x="{MARGIN_L + pw - 4}" y="{_f(py - 4)}" text-anchor="end" '
                       f'font-family="sans-serif" font-size="10" fill="{color}">{label}</text>')

        for label, xs, ys, color, dash in self.series:
            pts = " ".join(f"{_f(sx(x))},{_f(sy(y))}" for x, y in zip(xs, ys)
                           if math.isfinite(y))
            dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
            out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                       f'stroke-width="1.5"{dash_attr}/>')

        for i, (label, _, _, color, _) in enumerate(self.series):
            lx = MARGIN_L + 8
            ly = MARGIN_T + 14 + 14 * i
            out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" y2="{ly - 4}" '
                       f'stroke="{color}" stroke-width="2"/>')
            out.append(f'<text x="{lx + 22}" y="{ly}" font-family="sans-serif" '
                       f'font-size="11">{label}</text>')

        out.append(f'<text x="{MARGIN_L + pw // 2}" y="{self.height - 8}" '
                   f'text-anchor="middle" font-family="sans-serif" font-size="12">'
                   f'{self.xlabel}</text>')
        out.append(f'<text x="16" y="{MARGIN_T + ph // 2}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="12" '
                   f'transform="rotate(-90 16 {MARGIN_T + ph // 2})">{self.ylabel}</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.render())
