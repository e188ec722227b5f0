#!/usr/bin/env python3
"""
Forgetting Benchmark
Runs Bi-CRCL (seeded shuffled order, the same partition reversed, one class
per task) and the finetune / joint baselines on one dataset, times every run,
checks the acceptance thresholds and writes benchmark.json
"""

import argparse
import copy
import json
import logging
import os
import sys
import time

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from bicrcl.config import validate_config  # noqa: E402
from bicrcl.errors import CRCLError  # noqa: E402
from bicrcl.experiment import run_experiment  # noqa: E402

FINETUNE_MAX_LAST = 40.0
BICRCL_MIN_LAST = 75.0
BICRCL_MIN_AVG = 85.0
ORDER_MAX_GAP = 5.0
TASK_COUNT_MAX_DROP = 10.0
RUNTIME_MAX_SECONDS = 900.0


def _variant(config, output_dir, name, **changes):
    variant = copy.deepcopy(config)
    variant.output = os.path.join(output_dir, name)
    for key, value in changes.items():
        if key in ("tasks", "order"):
            setattr(variant.stream, key, value)
        else:
            setattr(variant, key, value)
    return variant


def check_thresholds(runs, seconds=None):
    """
    Acceptance checks over the benchmark runs

    Args:
        runs: {name: {'acc_avg': ..., 'acc_last': ...}}
        seconds: {name: wall-clock seconds}; adds the runtime check for the
            main Bi-CRCL run when it is timed

    Returns:
        {check name: {'value', 'threshold', 'passed'}}
    """
    primary, reversed_, single = (runs["bicrcl_shuffled"], runs["bicrcl_reversed"],
                                  runs["bicrcl_single"])
    order_gap = abs(primary['acc_last'] - reversed_['acc_last'])
    task_drop = primary['acc_last'] - single['acc_last']
    checks = {
        'finetune_acc_last_max': (runs["finetune"]['acc_last'], FINETUNE_MAX_LAST,
                                  runs["finetune"]['acc_last'] <= FINETUNE_MAX_LAST),
        'bicrcl_acc_last_min': (primary['acc_last'], BICRCL_MIN_LAST,
                                primary['acc_last'] >= BICRCL_MIN_LAST),
        'bicrcl_acc_avg_min': (primary['acc_avg'], BICRCL_MIN_AVG,
                               primary['acc_avg'] >= BICRCL_MIN_AVG),
        'order_gap_max': (order_gap, ORDER_MAX_GAP, order_gap <= ORDER_MAX_GAP),
        'task_count_drop_max': (task_drop, TASK_COUNT_MAX_DROP, task_drop <= TASK_COUNT_MAX_DROP),
    }
    if seconds and "bicrcl_shuffled" in seconds:
        elapsed = seconds["bicrcl_shuffled"]
        checks['runtime_max'] = (elapsed, RUNTIME_MAX_SECONDS, elapsed <= RUNTIME_MAX_SECONDS)
    return {name: {'value': value, 'threshold': threshold, 'passed': bool(passed)}
            for name, (value, threshold, passed) in checks.items()}


def run_benchmark(config_path, output_dir, max_train_per_class=2000, quiet=False):
    """
    Run every benchmark variant from one base config

    Args:
        config_path: Base experiment INI (its [stream] tasks is the main split)
        output_dir: Directory receiving one sub-directory per run
        max_train_per_class: Cap on training samples per class
        quiet: Suppress the printed table

    Returns:
        Benchmark record (also written to output_dir/benchmark.json)
    """
    config = validate_config(config_path)
    config.stream.max_train_per_class = max_train_per_class
    os.makedirs(output_dir, exist_ok=True)

    runs, timings = {}, {}

    def timed(name, **changes):
        start = time.perf_counter()
        outcome = run_experiment(_variant(config, output_dir, name, **changes))
        timings[name] = time.perf_counter() - start
        runs[name] = outcome.result
        return outcome

    primary = timed("bicrcl_shuffled", method="bicrcl", order="shuffled")
    timed("bicrcl_reversed", method="bicrcl", order="reversed")
    timed("bicrcl_single", method="bicrcl", order="shuffled",
          tasks=len(primary.spec.class_order))
    timed("finetune", method="finetune", order="shuffled")
    timed("joint", method="joint", order="shuffled")

    summary = {name: {'method': result.method, 'tasks': len(result.accuracies),
                      'acc_avg': result.acc_avg, 'acc_last': result.acc_last}
               for name, result in runs.items()}
    record = {'runs': summary, 'checks': check_thresholds(summary, timings),
              'seconds': {name: round(value, 1) for name, value in timings.items()}}

    with open(os.path.join(output_dir, "benchmark.json"), "w") as f:
        json.dump(record, f, sort_keys=True, indent=2)
        f.write("\n")

    if not quiet:
        print("=" * 50)
        print("Forgetting Benchmark")
        print("=" * 50)
        for name, row in summary.items():
            avg = "-" if row['acc_avg'] is None else f"{row['acc_avg']:.2f}"
            print(f"  {name:<16} T={row['tasks']:<3} Acc_Avg={avg:>6}  "
                  f"Acc_Last={row['acc_last']:.2f}")
        print()
        for name, check in record['checks'].items():
            mark = "✓" if check['passed'] else "✗"
            print(f"{mark} {name}: {check['value']:.2f} (threshold {check['threshold']})")

    return record


def main(argv=None):
    parser = argparse.ArgumentParser(
        description='Run the class-incremental forgetting benchmark'
    )
    parser.add_argument('config', help='Base experiment INI (e.g. data/desk/experiment.ini)')
    parser.add_argument(
        '-o', '--output',
        type=str,
        default='benchmark',
        help='Output directory (default: benchmark)'
    )
    parser.add_argument(
        '--max-train-per-class',
        type=int,
        default=2000,
        help='Training samples kept per class (default: 2000)'
    )
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.WARNING, stream=sys.stderr)
    try:
        record = run_benchmark(args.config, args.output, args.max_train_per_class)
    except CRCLError as error:
        print(json.dumps(error.to_record(), sort_keys=True), file=sys.stderr)
        return 1

    return 0 if all(check['passed'] for check in record['checks'].values()) else 1


if __name__ == "__main__":
    sys.exit(main())
