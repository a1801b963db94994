"""Receptive-field arithmetic for the block family.

Each block is a declarative spec; theoretical_rf composes kernel, dilation
and stride per branch, and the measured footprint (pixels with nonzero
gradient from the center output) should agree with the widest branch.

    python3 demos/02_receptive_fields.py
"""
from rfbnet.blocks import make_comparison_block, make_rfb, make_rfb_s, param_count, theoretical_rf, widest_rf
from rfbnet.erf import erf

blocks = {
    "rfb": make_rfb(32, 32),
    "rfb_s": make_rfb_s(32, 32),
    "inception": make_comparison_block("inception", 32, 32),
    "inception_l": make_comparison_block("inception_l", 32, 32),
    "aspp_s": make_comparison_block("aspp_s", 32, 32),
}
blocks["plain"] = make_comparison_block("plain", 32, 32, reference=blocks["rfb"])

print(f"{'block':<12}{'params':>8}  branch RFs (h x w)        widest  measured")
for name, spec in blocks.items():
    rfs = " ".join(f"{r.size[0]}x{r.size[1]}" for r in theoretical_rf(spec))
    measured = erf(spec, input_size=31, samples=4, seed=0).footprint_size
    wide = widest_rf(spec).size
    print(f"{name:<12}{param_count(spec):>8}  {rfs:<26}{wide[0]}x{wide[1]:<5} {measured[0]}x{measured[1]}")
