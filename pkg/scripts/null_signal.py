"""Check that every model is near chance when the synthetic labels carry no signal.

    python scripts/null_signal.py --seeds 10
"""

import argparse
import tempfile
from pathlib import Path

import numpy as np

from riskforge import models as M
from riskforge.pipeline import config_from_dict, run_pipeline
from riskforge.synth import SynthSpec, generate_synthetic


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--n-patients", type=int, default=1000)
    args = ap.parse_args()

    aucs = {}
    with tempfile.TemporaryDirectory() as tmp:
        for seed in range(args.seeds):
            data = Path(tmp) / f"d{seed}"
            spec = SynthSpec(n_patients=args.n_patients, seed=seed, knowledge_signal_strength=0.0, data_signal_strength=0.0)
            generate_synthetic(spec, data)
            cfg = config_from_dict({"data_dir": str(data), "models": list(M.KINDS), "seed": seed, "save_models": False})
            report, _ = run_pipeline(cfg, Path(tmp) / f"run{seed}")
            for row in report.auc_grid:
                aucs.setdefault(f"{row.experiment}/{row.model}", []).append(row.test_auc)
            aucs.setdefault("PCE", []).append(report.baseline_auc["pce_test"])
    print("model,mean_test_auc,sd")
    for k, v in sorted(aucs.items()):
        print(f"{k},{np.mean(v):.4f},{np.std(v):.4f}")


if __name__ == "__main__":
    main()
