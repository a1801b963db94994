"""Effective receptive fields at random init, averaged over seeds.

The theoretical RF only says where gradient can reach; the ERF says how
much arrives.  RFB spreads mass over a wide footprint while keeping a
concentrated center; a plain stack of equal parameter count stays small,
and a single dilated conv (ASPP-S-like) is wide but hollow.

    python3 demos/03_effective_receptive_field.py [out_dir]
"""
import sys

import numpy as np

from rfbnet.blocks import make_comparison_block, make_rfb
from rfbnet.erf import compare, erf, export, format_report

ref = make_rfb(32, 32)
blocks = {"rfb": ref, "plain": make_comparison_block("plain", 32, 32, reference=ref),
          "aspp_s": make_comparison_block("aspp_s", 32, 32)}
report = compare(blocks, input_size=31, seeds=range(10), samples=8)
print(format_report(report))

# coarse text rendering of one normalized map per block
shades = " .:-=+*#%@"
for name, spec in blocks.items():
    m = erf(spec, input_size=31, samples=16, seed=0)
    grid = m.grid[7:24, 7:24]
    print(f"\n{name}")
    for row in grid:
        print("".join(shades[min(int(v * len(shades)), len(shades) - 1)] * 2 for v in row))
    if len(sys.argv) > 1:
        export(m, sys.argv[1], stem=f"erf_{name}")
