import pytest

from ramlab.config import ConfigError
from ramlab.report import MISSING, delta_pairs, pivot, render_pivot, render_report


def row(tag, method="dag", target="permute", size="8", location="lower_right", value=0.5, pacc=0.9):
    return {"run_id": "x", "config_hash": "h", "seed": "0", "model_tag": tag, "method": method,
            "target": target, "size": size, "location": location, "steps": "400", "images": "20",
            "miou_target": repr(value), "miou_gt": "0.1", "pacc_masked": repr(pacc)}


def test_delta_pairs():
    tags = ["global-baseline", "global-ram-T0.3-p0.5", "window-ram-T0.3-p0.5",
            "global-baseline+adv10", "global-ram-T0.3-p0.5+adv10", "pool"]
    assert delta_pairs(tags) == [("global-baseline", "global-ram-T0.3-p0.5"),
                                 ("global-baseline+adv10", "global-ram-T0.3-p0.5+adv10")]


def test_pivot_averages_other_axes():
    rows = [row("g", size="8", value=0.2), row("g", size="16", value=0.4)]
    keys, tags, cells = pivot(rows, ("method", "target"))
    assert keys == [("dag", "permute")] and tags == ["g"]
    assert cells[(("dag", "permute"), "g")] == pytest.approx(0.3)
    keys, _, _ = pivot(rows, ("size",))
    assert keys == [("8",), ("16",)]   # numeric order


def test_two_rows_per_model_for_two_targets():
    rows = [row("global-baseline", target=t) for t in ("permute", "strip")]
    rows += [row("global-ram-T0.3-p0.5", target=t, value=0.1) for t in ("permute", "strip")]
    text = render_pivot("t", rows, ("method", "target"))
    body = [ln for ln in text.splitlines() if ln.startswith("| dag")]
    assert len(body) == 2
    assert "Δ global-baseline − global-ram-T0.3-p0.5" in text
    assert body[0].endswith("| 0.5000 | 0.1000 | 0.4000 |")


def test_missing_cells_marked():
    rows = [row("global-baseline", method="dag"), row("global-ram-T0.3-p0.5", method="pgd")]
    text = render_pivot("t", rows, ("method", "target"))
    lines = [ln for ln in text.splitlines() if ln.startswith("| dag") or ln.startswith("| pgd")]
    assert all(MISSING in ln for ln in lines)


def test_report_sections_and_empty_ledger():
    text = render_report([row("pool"), row("global-baseline", value=0.7)])
    assert text.startswith("# Attack summary")
    for title in ("by method", "by patch size", "by patch location", "Masked pixel accuracy"):
        assert title in text
    assert "0.9000" in text
    with pytest.raises(ConfigError, match="empty ledger"):
        render_report([])
