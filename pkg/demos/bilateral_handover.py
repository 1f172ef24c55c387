"""Two hospitals, one hand-over.

Center I trains a model on its own volumes and ships it (with its SI
bookkeeping) to center II, which continues training.  The script prints
lesion-level metrics on the shared test set after each visit, for plain
fine-tuning and for SI, next to the two isolated models, then the
communication ledger.  Takes about a minute on one core.

    python demos/bilateral_handover.py [seed]
"""
import sys

from ringfed.config import bundled_config, load_config
from ringfed.experiment import run_seed


def line(label, report):
    print(f"  {label:<22} sens {report.sensitivity:.3f}  prec {report.precision:.3f}"
          f"  afpr {report.afpr:5.2f}  dsc {report.mean_tp_dsc:.3f}")


def main(seed=0):
    cfg = load_config(bundled_config("bilateral.cfg"))
    result = run_seed(cfg, seed, ["isolated", "svcl", "svcl+si"])
    print(f"seed {seed}, test set {result.test_hash[:12]}")
    for i, h in enumerate(result.isolated(), start=1):
        line(f"isolated at center {i}", h.final_report)
    for kind in ("svcl", "svcl+si"):
        h = result.get(kind)
        for snap in h.snapshots:
            line(f"{kind} after center {snap.center}", snap.report)
    print("ledger (svcl+si):")
    print(result.get("svcl+si").ledger.to_csv())


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
