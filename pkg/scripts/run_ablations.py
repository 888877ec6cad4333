"""Generate the default benchmark (if missing) and run ablation suites into results/<suite>.csv.

    python3 scripts/run_ablations.py --suites table2,table5 --seeds 0,1,2
"""

import argparse
import sys
from pathlib import Path

from saresdet import cli


def main() -> int:
    p = argparse.ArgumentParser()
    p.add_argument("--data", default="data/default")
    p.add_argument("--out-dir", default="results")
    p.add_argument("--suites", default="table2,table3,table5,table6")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--epochs", default="30")
    args = p.parse_args()

    data = Path(args.data)
    if not (data / "meta.json").exists():
        code = cli.main(["gen", "--out", str(data)])
        if code:
            return code
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for suite in args.suites.split(","):
        target = out_dir / f"{suite}.csv"
        print(f"running {suite} -> {target}", file=sys.stderr)
        code = cli.main(["ablate", suite, "--data", str(data), "--seeds", args.seeds,
                         "--epochs", args.epochs, "--out", str(target)])
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
