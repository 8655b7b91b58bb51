"""Wall time of the concurrent 10-client run with and without the preload store.

    python scripts/preload.py [--io-latency-us 1000] [--rounds 20]
"""

import argparse

from fedsim.scenarios import preload_speedup


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--io-latency-us", type=int, default=1000, help="simulated per-read disk latency")
    parser.add_argument("--rounds", type=int, default=20)
    parser.add_argument("--clients", type=int, default=10)
    args = parser.parse_args()

    times = preload_speedup(io_latency_us=args.io_latency_us, rounds=args.rounds, clients=args.clients)
    print(f"simulated disk: {times[False]:.2f}s")
    print(f"preload store:  {times[True]:.2f}s")
    print(f"speedup:        {times[False] / times[True]:.1f}x")


if __name__ == "__main__":
    main()
