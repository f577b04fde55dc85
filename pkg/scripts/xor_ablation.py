"""Full model vs. single-stream models on the synthetic agreement task.

    python3 scripts/xor_ablation.py --seeds 5
"""

import argparse
import dataclasses

from mcf.experiments import XorSetup, format_table, xor_ablation


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--variant", choices=("mha", "sag"), default="mha")
    parser.add_argument("--epochs", type=int, default=XorSetup.epochs)
    parser.add_argument("--head-hidden", type=int, default=XorSetup.head_hidden,
                        help="0 gives linear heads, which cannot represent agreement")
    args = parser.parse_args()
    setup = dataclasses.replace(XorSetup(), variant=args.variant, epochs=args.epochs,
                                head_hidden=args.head_hidden)
    results, secs = xor_ablation(range(args.seeds), setup=setup, log=print)
    print(f"\nvalidation accuracy, mean (std) over {args.seeds} seeds, {secs:.0f}s")
    print(format_table(results))


if __name__ == "__main__":
    main()
