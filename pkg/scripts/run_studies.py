"""Run every study config in ``scripts/configs`` (or the ones named) and print the fits.

    python scripts/run_studies.py --out-dir runs
    python scripts/run_studies.py --out-dir runs configs/rate_boundary.toml --workers 4

Each config writes into ``<out-dir>/<config stem>/`` through the ``rwtree study``
command, so every run also leaves a manifest.
"""

import argparse
import sys
import time
from pathlib import Path

from rwtree.cli import main as rwtree

HERE = Path(__file__).resolve().parent


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("configs", nargs="*", type=Path)
    p.add_argument("--out-dir", type=Path, default=Path("runs"))
    p.add_argument("--workers", type=int)
    args = p.parse_args(argv)
    configs = args.configs or sorted((HERE / "configs").glob("*.toml"))
    status = 0
    for cfg in configs:
        out = args.out_dir / cfg.stem
        cmd = ["study", "--study", str(cfg), "--out-dir", str(out)]
        if args.workers is not None:
            cmd += ["--workers", str(args.workers)]
        print(f"== {cfg.name} -> {out}", flush=True)
        start = time.perf_counter()
        code = rwtree(cmd)
        print(f"== {cfg.name}: exit {code}, {time.perf_counter() - start:.0f}s", flush=True)
        status = status or code
    return status


if __name__ == "__main__":
    sys.exit(main())
