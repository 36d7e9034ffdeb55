"""Run the th65 study and write results/th65.csv and .json."""

import argparse
import logging
from pathlib import Path

from homoglab.experiments import STUDIES, emit_report, load_config

ROOT = Path(__file__).resolve().parent.parent

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(ROOT / "configs" / "th65.cfg"))
    ap.add_argument("--out", default=str(ROOT / "results" / "th65.csv"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    report = STUDIES["th65"](load_config(args.config, record_seconds=True))
    csv_path, json_path = emit_report(report, args.out)
    for name, fit in report.slopes.items():
        print(name, getattr(fit, "slope", fit))
    print("wrote", csv_path, json_path)
