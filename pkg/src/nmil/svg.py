"""Minimal hand-written SVG bar charts of attention weights."""

from xml.sax.saxutils import escape

PALETTE = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c", "#ccb974", "#64b5cd"]

BAR_W = 14
GAP = 10
HEIGHT = 160
PAD = 30


def _bars(groups, title, x0):
    """One panel. ``groups`` is a list of (weights, labels) per bag; returns (svg parts, width)."""
    parts = [f'<text x="{x0}" y="16" font-size="12" font-family="sans-serif">{escape(title)}</text>']
    x = x0
    base = PAD + HEIGHT
    for g, (weights, labels) in enumerate(groups):
        colour = PALETTE[g % len(PALETTE)]
        for w, lab in zip(weights, labels):
            h = max(0.0, float(w)) * HEIGHT
            parts.append(
                f'<rect x="{x}" y="{base - h:.2f}" width="{BAR_W}" height="{h:.2f}" fill="{colour}">'
                f"<title>{w:.4f}</title></rect>"
            )
            parts.append(
                f'<text x="{x + BAR_W / 2}" y="{base + 12}" font-size="9" text-anchor="middle" '
                f'font-family="sans-serif">{escape(str(lab))}</text>'
            )
            x += BAR_W + 2
        x += GAP
    parts.append(f'<line x1="{x0}" y1="{base}" x2="{x - GAP}" y2="{base}" stroke="black" stroke-width="1"/>')
    return parts, x - x0


def member_labels(bag):
    """Latent labels of a latent bag record's members (digits for innermost bags)."""
    return list(bag["digits"]) if "digits" in bag else [m["y"] for m in bag["members"]]


def attention_svg(record, level_titles=None):
    """Render one :class:`~nmil.train.AttentionRecord` with one panel per level.

    Bars are grouped by the enclosing bag (one colour each) and labelled with
    the member's latent label (the digit at the instance level).
    """
    tree = record.tree
    panels = []
    x = PAD
    for level in range(1, len(tree.levels) + 1):
        groups = [(weights, member_labels(bag)) for weights, bag in record.members_at(level)]
        title = (level_titles or {}).get(level, f"level {level}")
        parts, width = _bars(groups, title, x)
        panels.extend(parts)
        x += width + 2 * PAD
    total_w = x
    total_h = HEIGHT + 2 * PAD + 10
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{total_w}" height="{total_h}" '
        f'viewBox="0 0 {total_w} {total_h}">'
    )
    caption = f"sample {record.sample_id} y={record.weak_label} p={record.probability:.3f}"
    footer = f'<text x="{PAD}" y="{total_h - 4}" font-size="10" font-family="sans-serif">{escape(caption)}</text>'
    return "\n".join([head, *panels, footer, "</svg>"]) + "\n"
