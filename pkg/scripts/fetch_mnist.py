#!/usr/bin/env python3
"""Download the four MNIST IDX files into a data directory.

The library itself never touches the network; it reads IDX files from a
configurable directory. This helper fetches and decompresses them once:

    python scripts/fetch_mnist.py [--out data/mnist]
"""

import argparse
import gzip
import urllib.request
from pathlib import Path

MIRRORS = [
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
]

FILES = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
]


def fetch(name: str, out_dir: Path) -> None:
    target = out_dir / name
    if target.exists():
        print(f"{target} already present")
        return
    last_error = None
    for mirror in MIRRORS:
        url = mirror + name + ".gz"
        try:
            print(f"fetching {url}")
            with urllib.request.urlopen(url, timeout=60) as response:
                compressed = response.read()
            target.write_bytes(gzip.decompress(compressed))
            print(f"wrote {target} ({target.stat().st_size} bytes)")
            return
        except OSError as exc:
            last_error = exc
            print(f"  failed: {exc}")
    raise SystemExit(f"could not fetch {name}: {last_error}")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="data/mnist", help="target directory")
    args = parser.parse_args()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in FILES:
        fetch(name, out_dir)


if __name__ == "__main__":
    main()
