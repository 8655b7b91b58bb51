"""Virtual slices until 50% accuracy for sync FedAvg and FedAsync with
30 clients at speeds 1.0, 0.2 and 0.1 (ten each).

    python scripts/speed_async.py [--target 0.5]
"""

import argparse

from fedsim.scenarios import speed_async


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--target", type=float, default=0.5)
    parser.add_argument("--seed", type=int, default=42)
    args = parser.parse_args()

    slices = speed_async(target=args.target, seed=args.seed)
    for name, value in slices.items():
        shown = "not reached" if value is None else f"{value} slices"
        print(f"{name:<10}{shown}")


if __name__ == "__main__":
    main()
