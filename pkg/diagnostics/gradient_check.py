#!/usr/bin/env python3
"""
Gradient Check
Compare the hand-written adapter/classifier gradients against central
finite differences on random small backbones
"""

import argparse
import os
import sys
from functools import partial

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

try:
    import numpy as np  # noqa: F401
    from bicrcl.gradcheck import check_classification, check_radical, random_problem
except ImportError as error:
    print(f"ERROR: {error}")
    print("Install with: pip3 install -r requirements.txt")
    sys.exit(1)

COSINE_SCALE = 4.0


def run_checks(configs=20, seed=0):
    """Check every loss, raw and cosine, on `configs` random problems; one line each"""
    print("Gradient check (central differences, h=1e-5)")
    print("-" * 50)

    all_ok = True
    for index in range(configs):
        problem = random_problem(seed + index)
        for name, check in (("cls", check_classification), ("radical", check_radical),
                            ("cos-cls", partial(check_classification, scale=COSINE_SCALE)),
                            ("cos-rad", partial(check_radical, scale=COSINE_SCALE))):
            report = check(problem)
            mark = "✓" if report.ok else "✗"
            print(f"{mark} config {index:2d} {name:<8} checked={report.checked:4d} "
                  f"skipped={report.skipped:3d} max_rel={report.max_relative_error:.2e}")
            for param, position, analytic, numeric in report.failures[:5]:
                print(f"    {param}{list(position)}: analytic {analytic:.6e} numeric {numeric:.6e}")
            all_ok = all_ok and report.ok

    print()
    print("✓ All gradients match" if all_ok else "ERROR: gradient mismatch")
    return all_ok


def main():
    parser = argparse.ArgumentParser(description='Finite-difference gradient check')
    parser.add_argument('--configs', type=int, default=20,
                        help='Number of random configurations (default: 20)')
    parser.add_argument('--seed', type=int, default=0, help='First seed (default: 0)')
    args = parser.parse_args()
    return 0 if run_checks(args.configs, args.seed) else 1


if __name__ == "__main__":
    sys.exit(main())
