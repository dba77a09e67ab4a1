"""Run every config in configs/ through the CLI, writing CSVs to an output directory.

    python scripts/run_all_configs.py [--out results]
"""

import argparse
import time
from pathlib import Path

from entropic_gap.cli import main as cli_main
from entropic_gap.config import load_config

ROOT = Path(__file__).resolve().parents[1]
COMMAND = {"euclid": "euclid-sweep", "dirichlet": "dirichlet-sweep", "bridge": "bridge-check"}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="results", help="directory for the CSV files")
    parser.add_argument("--configs", default=str(ROOT / "configs"))
    args = parser.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    worst = 0
    for cfg_path in sorted(Path(args.configs).glob("*.cfg")):
        cfg = load_config(cfg_path)
        target = out / (cfg.output_path or cfg_path.with_suffix(".csv").name)
        t0 = time.perf_counter()
        code = cli_main([COMMAND[cfg.problem], "--config", str(cfg_path), "--out", str(target)])
        print(f"{cfg_path.name:32s} exit {code}  {time.perf_counter() - t0:6.1f} s  -> {target}")
        worst = max(worst, code)
    return worst


if __name__ == "__main__":
    raise SystemExit(main())
