"""Rebuild every reference configuration at full width and reconcile parameter totals.

Prints each built total next to the published one, with the closed-form
attention count and its share of the published baseline.  Each full-width
build allocates about 130 MB and takes under a second.
"""

from densattn.attention import TABLE_CONFIGS, budget_audit, param_count
from densattn.model import ModelConfig, build

PUBLISHED = {
    "None": 16_263_041, "PFCA": 16_263_041, "SA": 16_263_041, "PFCASA": 16_263_041, "SimAM": 16_263_041,
    "SE(r=4)": 16_394_561, "CAM(r=8)": 16_363_009, "CBAM(r=4)": 16_394_659,
    "SE(r=16)": 16_296_257, "CAM(r=16)": 16_313_761, "CBAM(r=16)": 16_296_355,
}

if __name__ == "__main__":
    print(f"{'config':<12}{'built':>14}{'published':>14}{'diff':>8}{'added':>10}{'ratio':>9}")
    for cfg in TABLE_CONFIGS:
        added = param_count(cfg, 512)
        built = build(ModelConfig(width_scale=1.0, attention=cfg)).count_params()
        rep = budget_audit(PUBLISHED["None"], cfg, 512)
        print(f"{cfg.label:<12}{built:>14,}{PUBLISHED[cfg.label]:>14,}{built - PUBLISHED[cfg.label]:>+8}"
              f"{added:>10,}{rep.ratio:>9.4%}")
