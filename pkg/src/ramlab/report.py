"""Markdown pivots over the attack ledger."""

from __future__ import annotations

from collections import defaultdict

import numpy as np

from .config import ConfigError

MISSING = "—"
PIVOTS = (
    ("Target mIoU by method", ("method", "target")),
    ("Target mIoU by patch size", ("size",)),
    ("Target mIoU by patch location", ("location",)),
)


def _split_tag(tag: str) -> tuple[str, str, str]:
    """(mixer, mode, training suffix) from a model tag like ``global-ram-T0.3-p0.5+adv10``."""
    base, _, suffix = tag.partition("+")
    parts = base.split("-")
    mixer = parts[0]
    mode = parts[1] if len(parts) > 1 else "baseline"
    return mixer, mode, suffix


def delta_pairs(tags) -> list[tuple[str, str]]:
    """(baseline tag, ram tag) pairs sharing mixer and training regime."""
    out = []
    for ram in tags:
        mixer, mode, suffix = _split_tag(ram)
        if mode != "ram":
            continue
        base = f"{mixer}-baseline" + (f"+{suffix}" if suffix else "")
        if base in tags:
            out.append((base, ram))
    return out


def _fmt(v) -> str:
    return MISSING if v is None else f"{v:.4f}"


def pivot(rows: list[dict], keys: tuple, value: str = "miou_target") -> tuple[list, list, dict]:
    """Mean of ``value`` per (row key, model tag), averaged over the other axes."""
    acc = defaultdict(list)
    for r in rows:
        acc[(tuple(r[k] for k in keys), r["model_tag"])].append(float(r[value]))
    row_keys = sorted({k for k, _ in acc}, key=lambda k: tuple(_sort_key(x) for x in k))
    tags = sorted({t for _, t in acc})
    cells = {k: float(np.mean(v)) for k, v in acc.items()}
    return row_keys, tags, cells


def _sort_key(x: str):
    try:
        return (0, float(x), "")
    except ValueError:
        return (1, 0.0, x)


def render_pivot(title: str, rows: list[dict], keys: tuple, value: str = "miou_target") -> str:
    row_keys, tags, cells = pivot(rows, keys, value)
    pairs = delta_pairs(tags)
    header = list(keys) + tags + [f"Δ {b} − {r}" for b, r in pairs]
    lines = [f"### {title}", "", "| " + " | ".join(header) + " |",
             "|" + "|".join(["---"] * len(header)) + "|"]
    for rk in row_keys:
        vals = [cells.get((rk, t)) for t in tags]
        deltas = []
        for b, r in pairs:
            vb, vr = cells.get((rk, b)), cells.get((rk, r))
            deltas.append(None if vb is None or vr is None else vb - vr)
        lines.append("| " + " | ".join(list(rk) + [_fmt(v) for v in vals + deltas]) + " |")
    return "\n".join(lines)


def render_report(rows: list[dict]) -> str:
    if not rows:
        raise ConfigError("empty ledger")
    seeds = sorted({r["seed"] for r in rows}, key=_sort_key)
    parts = ["# Attack summary", "",
             f"{len(rows)} ledger rows; seeds {', '.join(seeds)}.  Cells show mean target mIoU "
             "(lower is more robust), averaged over the axes not shown.  "
             f"Missing cells are marked {MISSING}.", ""]
    for title, keys in PIVOTS:
        parts += [render_pivot(title, rows, keys), ""]
    parts += [render_pivot("Masked pixel accuracy by method", rows, ("method", "target"),
                           "pacc_masked"), ""]
    return "\n".join(parts)
