"""Memorise a 64-sample linear-mode bundle with the toy model.

    python3 scripts/overfit.py --variant sag
"""

import argparse

from mcf.experiments import overfit_run


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--variant", choices=("mha", "sag"), default="mha")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--epochs", type=int, default=300)
    args = parser.parse_args()
    report, secs = overfit_run(args.seed, args.variant, epochs=args.epochs)
    print(f"train mAP {report.map:.4f}  AVD MSE {' '.join(f'{v:.2e}' for v in report.avd_mse)}  ({secs:.1f}s)")


if __name__ == "__main__":
    main()
