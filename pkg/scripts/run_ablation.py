"""Full run plus ablations on the offline mock world; writes report.md/json."""

from __future__ import annotations

import argparse

from reshoot.demo import DemoSettings, mock_demo


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--shots", type=int, default=20)
    p.add_argument("--fault-rate", type=float, default=0.15)
    p.add_argument("--max-retries", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    settings = DemoSettings(shots=args.shots, fault_rate=args.fault_rate,
                            max_retries=args.max_retries, seed=args.seed, global_context=True)
    result = mock_demo(args.out, settings)
    print("\n".join(result.summary_lines()))
    print(f"report: {args.out}/report.md")


if __name__ == "__main__":
    main()
