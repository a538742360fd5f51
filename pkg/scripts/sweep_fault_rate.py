"""Verified fraction and identity score of the full run across drift rates."""

from __future__ import annotations

import argparse
import tempfile
from pathlib import Path

from reshoot.demo import FULL, NO_VERIFY, DemoSettings, mock_demo


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--rates", type=float, nargs="+", default=[0.0, 0.1, 0.2, 0.3, 0.5])
    p.add_argument("--shots", type=int, default=20)
    p.add_argument("--max-retries", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    print(f"{'rate':>5}  {'verified':>8}  {'ID-VLM':>6}  {'ID-VLM w/o loop':>15}")
    with tempfile.TemporaryDirectory() as tmp:
        for rate in args.rates:
            settings = DemoSettings(shots=args.shots, fault_rate=rate,
                                    max_retries=args.max_retries, seed=args.seed)
            result = mock_demo(Path(tmp) / f"rate_{rate}", settings)
            full, base = result.rows[FULL], result.rows[NO_VERIFY]
            print(f"{rate:>5.2f}  {full['verified_fraction']:>8.2f}  "
                  f"{full['metrics']['ID-VLM']:>6.2f}  {base['metrics']['ID-VLM']:>15.2f}")


if __name__ == "__main__":
    main()
