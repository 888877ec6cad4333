"""Median over seeds for each config in one or more ablation CSVs.

    python3 scripts/aggregate.py results/table2.csv [--markdown]
"""

import argparse
import csv
import statistics
import sys

METRICS = ("map50", "map5095", "ap_small", "precision", "recall")


def aggregate(rows):
    by_config: dict[str, list[dict]] = {}
    for row in rows:
        by_config.setdefault(row["config_id"], []).append(row)
    out = []
    for config_id, group in by_config.items():
        rec = {"config_id": config_id, "seeds": len(group)}
        for m in METRICS:
            vals = [float(r[m]) for r in group if r[m] != ""]
            rec[m] = statistics.median(vals) if vals else None
        out.append(rec)
    return out


def main() -> int:
    p = argparse.ArgumentParser()
    p.add_argument("csv", nargs="+")
    p.add_argument("--markdown", action="store_true")
    args = p.parse_args()
    rows = []
    for path in args.csv:
        with open(path, newline="") as f:
            rows.extend(csv.DictReader(f))
    table = aggregate(rows)
    cols = ["config_id", "seeds", *METRICS]
    fmt = lambda v: "" if v is None else (f"{v:.4f}" if isinstance(v, float) else str(v))
    if args.markdown:
        print("| " + " | ".join(cols) + " |")
        print("|" + "---|" * len(cols))
        for rec in table:
            print("| " + " | ".join(fmt(rec[c]) for c in cols) + " |")
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(cols)
        for rec in table:
            w.writerow([fmt(rec[c]) for c in cols])
    return 0


if __name__ == "__main__":
    sys.exit(main())
