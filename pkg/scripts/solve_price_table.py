#!/usr/bin/env python3
"""Re-derive the bundled price table from recorded per-fix cost averages.

Each recorded row gives a mean dollar cost and mean token counts per billing
class; three independent rows pin the three per-million-token rates via a
3x3 linear solve. The result is what src/nbrevive/data/prices.json ships.

Usage: python scripts/solve_price_table.py [--write PATH]
"""

import argparse
import json

# (mean_cost_usd, input_uncached, input_cached, output) per fix type
RECORDED_ROWS = [
    ("error_repair", 0.0499, 5191.70, 2930.77, 2877.34),
    ("score_calibration", 0.0497, 4434.95, 3329.98, 2953.75),
    ("runtime_reduction", 0.0596, 4191.27, 2134.31, 3705.66),
]


def solve_3x3(a, b):
    """Gaussian elimination with partial pivoting; a is 3x3, b length 3."""
    m = [row[:] + [rhs] for row, rhs in zip(a, b)]
    n = 3
    for col in range(n):
        pivot = max(range(col, n), key=lambda r: abs(m[r][col]))
        if abs(m[pivot][col]) < 1e-12:
            raise ValueError("singular system")
        m[col], m[pivot] = m[pivot], m[col]
        for r in range(n):
            if r == col:
                continue
            factor = m[r][col] / m[col][col]
            m[r] = [v - factor * p for v, p in zip(m[r], m[col])]
    return [m[i][n] / m[i][i] for i in range(n)]


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--write", help="write the solved table to this JSON path")
    args = parser.parse_args()

    a = [[r[2], r[3], r[4]] for r in RECORDED_ROWS]
    b = [r[1] * 1e6 for r in RECORDED_ROWS]  # rates are per 1M tokens
    rates = solve_3x3(a, b)

    names = ("input_uncached", "input_cached", "output")
    print("solved rates (USD per 1M tokens):")
    for name, rate in zip(names, rates):
        print(f"  {name:16s} {rate:.8f}")

    print("round trip against the recorded costs:")
    for label, dollars, *tokens in RECORDED_ROWS:
        back = sum(t * r for t, r in zip(tokens, rates)) / 1e6
        status = "ok" if round(back, 4) == dollars else "MISMATCH"
        print(f"  {label:18s} {back:.4f} vs {dollars:.4f}  {status}")

    if args.write:
        table = {
            "currency": "USD",
            "per_tokens": 1_000_000,
            "rates": {name: rate for name, rate in zip(names, rates)},
            "note": "solved from recorded per-fix cost and token averages",
        }
        with open(args.write, "w", encoding="utf-8") as fh:
            json.dump(table, fh, indent=1)
            fh.write("\n")
        print(f"wrote {args.write}")


if __name__ == "__main__":
    main()
