"""Filter circularity report: per-layer ring variance under both patterns."""

from __future__ import annotations

from . import rings
from .model import collect_filter_bank

REPORT_HEADER = "layer,slices,ring_var_floor,ring_var_ceil"


def filter_report(net):
    """Per conv layer, the mean ring-deviation of its slices under the floor
    and ceil patterns, plus the bank-wide penalty values.

    Accepts a Network or a Checkpoint. Returns a dict with "rows"
    ([{layer, slices, floor, ceil}, ...] in bank order),
    "overall_floor"/"overall_ceil" and "parameters".
    """
    if hasattr(net, "restore_network"):
        net = net.restore_network()
    bank = collect_filter_bank(net)
    floor = rings.build_hash_pattern("floor")
    ceil = rings.build_hash_pattern("ceil")
    by_layer_floor = dict(rings.per_entry_values(bank, floor))
    by_layer_ceil = dict(rings.per_entry_values(bank, ceil))
    rows = []
    for layer_id, w in bank.entries:
        rows.append(
            {
                "layer": layer_id,
                "slices": w.shape[0] * w.shape[1],
                "floor": by_layer_floor[layer_id],
                "ceil": by_layer_ceil[layer_id],
            }
        )
    return {
        "rows": rows,
        "overall_floor": rings.r2_value(bank, floor),
        "overall_ceil": rings.r2_value(bank, ceil),
        "parameters": net.parameter_count(),
    }


def report_table(report):
    lines = [f"{'layer':<22} {'slices':>7} {'ring var (floor)':>17} {'ring var (ceil)':>16}"]
    for row in report["rows"]:
        lines.append(
            f"{row['layer']:<22} {row['slices']:>7}"
            f" {row['floor']:>17.6e} {row['ceil']:>16.6e}"
        )
    lines.append(
        f"{'(all slices)':<22} {sum(r['slices'] for r in report['rows']):>7}"
        f" {report['overall_floor']:>17.6e} {report['overall_ceil']:>16.6e}"
    )
    lines.append(f"parameters: {report['parameters']}")
    return "\n".join(lines)


def write_report_csv(report, path):
    with open(path, "w") as f:
        f.write(REPORT_HEADER + "\n")
        for row in report["rows"]:
            f.write(f"{row['layer']},{row['slices']},{row['floor']!r},{row['ceil']!r}\n")
        total = sum(r["slices"] for r in report["rows"])
        f.write(
            f"(all),{total},{report['overall_floor']!r},{report['overall_ceil']!r}\n"
        )
