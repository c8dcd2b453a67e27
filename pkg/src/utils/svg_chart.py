"""Static SVG bar chart of gated vs un-gated batch percentages per batch size."""
from typing import Sequence
from xml.sax.saxutils import escape

from errors import ReportError

WIDTH = 640
HEIGHT = 360
MARGIN = 50
BAR_WIDTH = 28
GATED_COLOR = '#d62728'
UNGATED_COLOR = '#1f77b4'


def render_gate_chart(batch_sizes: Sequence[int], fractions: Sequence[float], title: str = 'Batches normalized') -> str:
    """
    Two bars per batch size: percentage of batches normalized by the gate
    and percentage left un-normalized. Bar labels carry 2 decimals.

    Args:
        batch_sizes: X-axis groups
        fractions: Gated fraction in [0, 1] for each batch size
        title: Chart title

    Returns:
        str: SVG document
    """
    if len(batch_sizes) != len(fractions):
        raise ReportError(f"{len(batch_sizes)} batch sizes but {len(fractions)} fractions")
    if not batch_sizes:
        raise ReportError("Cannot chart an empty set of batch sizes")

    plot_height = HEIGHT - 2 * MARGIN
    group_width = (WIDTH - 2 * MARGIN) / len(batch_sizes)
    baseline = HEIGHT - MARGIN

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<text x="{WIDTH / 2:.1f}" y="{MARGIN / 2:.1f}" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{MARGIN}" y1="{baseline}" x2="{WIDTH - MARGIN}" y2="{baseline}" stroke="#333"/>',
    ]
    for i, (batch_size, fraction) in enumerate(zip(batch_sizes, fractions)):
        center = MARGIN + group_width * (i + 0.5)
        for offset, percent, color in ((-BAR_WIDTH, fraction * 100, GATED_COLOR),
                                       (0, (1 - fraction) * 100, UNGATED_COLOR)):
            height = plot_height * percent / 100
            x = center + offset
            y = baseline - height
            parts.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{BAR_WIDTH}" height="{height:.1f}" fill="{color}"/>')
            parts.append(f'<text x="{x + BAR_WIDTH / 2:.1f}" y="{y - 4:.1f}" text-anchor="middle">{percent:.2f}</text>')
        parts.append(f'<text x="{center:.1f}" y="{baseline + 18}" text-anchor="middle">batch {batch_size}</text>')

    legend_y = HEIGHT - 12
    parts.append(f'<circle cx="{MARGIN}" cy="{legend_y - 4}" r="5" fill="{GATED_COLOR}"/>')
    parts.append(f'<text x="{MARGIN + 10}" y="{legend_y}">normalized %</text>')
    parts.append(f'<circle cx="{MARGIN + 120}" cy="{legend_y - 4}" r="5" fill="{UNGATED_COLOR}"/>')
    parts.append(f'<text x="{MARGIN + 130}" y="{legend_y}">not normalized %</text>')
    parts.append('</svg>')
    return '\n'.join(parts) + '\n'
