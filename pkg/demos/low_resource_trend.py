"""AdapterFusion vs AdvFusion on the low-resource language, several seeds.

Writes one JSON line per seed to ``trend.jsonl`` (or the path given as the
first argument) and prints the two scores side by side.

    python demos/low_resource_trend.py [log.jsonl] [n_seeds]
"""

import json
import sys

from advfusion.experiment import run_trend

path = sys.argv[1] if len(sys.argv) > 1 else "trend.jsonl"
n_seeds = int(sys.argv[2]) if len(sys.argv) > 2 else 3


def log(row):
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(row) + "\n")
    print(f"seed {row['seed']}  {row['language']}  AdapterFusion {row['adapterfusion_bleu']:6.2f}  "
          f"AdvFusion {row['advfusion_bleu']:6.2f}  ({row['seconds']}s)")


rows = [run_trend(s, log=log) for s in range(n_seeds)]
af = sum(r["adapterfusion_bleu"] for r in rows) / len(rows)
adv = sum(r["advfusion_bleu"] for r in rows) / len(rows)
print(f"mean  AdapterFusion {af:6.2f}  AdvFusion {adv:6.2f}")
