#!/usr/bin/env python3
"""Download and unpack the CIFAR-10 binary batches.

Usage:
    python scripts/fetch_cifar10.py [--dest data]

Places data_batch_{1..5}.bin and test_batch.bin under
<dest>/cifar-10-batches-bin/, the layout expected by --data-dir / DATA_DIR.
"""

import argparse
import hashlib
import sys
import tarfile
import urllib.request
from pathlib import Path

URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"
TGZ_MD5 = "c32a1d4ab5d03f1284b67883e8d87530"
FILES = [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--dest", default="data", help="destination directory")
    args = parser.parse_args()

    dest = Path(args.dest)
    out_dir = dest / "cifar-10-batches-bin"
    if all((out_dir / f).is_file() for f in FILES):
        print(f"already present: {out_dir}")
        return 0

    dest.mkdir(parents=True, exist_ok=True)
    archive = dest / "cifar-10-binary.tar.gz"
    if not archive.is_file():
        print(f"downloading {URL} ...")
        urllib.request.urlretrieve(URL, archive)

    md5 = hashlib.md5(archive.read_bytes()).hexdigest()
    if md5 != TGZ_MD5:
        print(f"checksum mismatch: got {md5}, expected {TGZ_MD5}", file=sys.stderr)
        return 1

    print(f"extracting to {out_dir} ...")
    with tarfile.open(archive) as tar:
        tar.extractall(dest)

    missing = [f for f in FILES if not (out_dir / f).is_file()]
    if missing:
        print(f"extraction incomplete, missing: {missing}", file=sys.stderr)
        return 1
    print(f"done: {out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
