#!/usr/bin/env python3
"""Fetch the MNIST IDX files through npm and store them gzipped under data/.

Usage: python3 scripts/fetch_mnist.py [output_dir]

The npm package `mnist-data` ships the four original uncompressed IDX files.
Requires `npm` on PATH. Header magics and counts are checked before writing.
"""
import gzip
import os
import shutil
import struct
import subprocess
import sys
import tarfile
import tempfile

PACKAGE = "mnist-data@1.2.6"
FILES = {
    "train-images-idx3-ubyte": (0x803, 60000),
    "train-labels-idx1-ubyte": (0x801, 60000),
    "t10k-images-idx3-ubyte": (0x803, 10000),
    "t10k-labels-idx1-ubyte": (0x801, 10000),
}


def main():
    out_dir = sys.argv[1] if len(sys.argv) > 1 else os.path.join(os.path.dirname(__file__), "..", "data")
    os.makedirs(out_dir, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(["npm", "pack", PACKAGE], cwd=tmp, check=True, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
        tgz = [f for f in os.listdir(tmp) if f.endswith(".tgz")][0]
        with tarfile.open(os.path.join(tmp, tgz)) as tar:
            tar.extractall(tmp)
        for name, (magic, count) in FILES.items():
            src = os.path.join(tmp, "package", "data", name)
            with open(src, "rb") as fh:
                found_magic, found_count = struct.unpack(">II", fh.read(8))
            if (found_magic, found_count) != (magic, count):
                sys.exit(f"{name}: unexpected header {found_magic:#x}/{found_count}")
            with open(src, "rb") as fin, gzip.GzipFile(os.path.join(out_dir, name + ".gz"), "wb", mtime=0) as fout:
                shutil.copyfileobj(fin, fout)
            print(f"{name}.gz: {count} items")


if __name__ == "__main__":
    main()
