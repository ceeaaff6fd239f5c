"""Regenerate the committed reference JSONs under tests/reference/.

Run from the repository root:

    python3 tools/make_references.py

Outputs are deterministic (counter-based RNGs, sorted JSON keys), so rerunning
on an unchanged tree reproduces the files byte for byte. The acceptance tests
compare fresh runs against these files at tight tolerance; regenerate them
only when an intentional algorithm change shifts the numbers, and say why in
the commit message.
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))
sys.path.insert(0, str(ROOT / "tests"))

from pointmatch.io import dump_json  # noqa: E402

from reference_fixtures import (  # noqa: E402
    FIT_CONFIG,
    HEADS_CONFIG,
    TREND_CONFIG,
    matched_vs_rigid_apds,
    run_fit,
    window_trend_apds,
)

REFERENCE_DIR = ROOT / "tests" / "reference"


def make_fit_curve() -> dict:
    res = run_fit()
    return {
        "config": FIT_CONFIG,
        "losses": res.losses,
        "final_over_initial": res.losses[-1] / res.losses[0],
    }


def make_ablation_trend() -> dict:
    trend_rows = [window_trend_apds(s) for s in range(TREND_CONFIG["seeds"])]
    head_rows = [matched_vs_rigid_apds(s) for s in range(HEADS_CONFIG["seeds"])]
    return {
        "trend_config": TREND_CONFIG,
        "heads_config": HEADS_CONFIG,
        "window_means": {
            name: float(np.mean([r[name] for r in trend_rows]))
            for name in TREND_CONFIG["windows"]
        },
        "matched_mean": float(np.mean([a for a, _ in head_rows])),
        "rigid_mean": float(np.mean([b for _, b in head_rows])),
        "matched_wins": int(sum(a > b for a, b in head_rows)),
    }


def main() -> int:
    REFERENCE_DIR.mkdir(parents=True, exist_ok=True)
    fit = make_fit_curve()
    dump_json(REFERENCE_DIR / "fit_curve.json", fit)
    print(f"fit_curve.json: {len(fit['losses'])} samples, "
          f"final/initial = {fit['final_over_initial']:.4f}")
    trend = make_ablation_trend()
    dump_json(REFERENCE_DIR / "ablation_trend.json", trend)
    print(f"ablation_trend.json: windows {trend['window_means']}, "
          f"matched {trend['matched_mean']:.2f} vs rigid {trend['rigid_mean']:.2f} "
          f"({trend['matched_wins']} wins)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
