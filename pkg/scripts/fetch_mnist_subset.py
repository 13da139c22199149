"""Build the MNIST subset under data/mnist/ from the original IDX files.

The tool itself only reads local IDX files. This script documents how the
checked-in subset was produced:

    npm pack mnist-data@1.2.6      # ships the four original MNIST IDX files
    python3 scripts/fetch_mnist_subset.py mnist-data-1.2.6.tgz

It keeps the first ``--train`` training images and the complete official
test split, and writes gzip-compressed IDX files.
"""

import argparse
import gzip
import os
import tarfile

import numpy as np

from trice.data import encode_idx, parse_idx


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("tgz")
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--train", type=int, default=20000)
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    with tarfile.open(args.tgz) as tar:
        for split, limit in (("train", args.train), ("t10k", None)):
            images = parse_idx(tar.extractfile(f"package/data/{split}-images-idx3-ubyte").read())
            labels = parse_idx(tar.extractfile(f"package/data/{split}-labels-idx1-ubyte").read())
            images, labels = images[:limit], labels[:limit]
            raw = np.rint(images[:, 0] * 255).astype(np.uint8)
            for stem, arr in ((f"{split}-images-idx3-ubyte", raw),
                              (f"{split}-labels-idx1-ubyte", labels.astype(np.uint8))):
                with gzip.GzipFile(os.path.join(args.out, stem + ".gz"), "wb", mtime=0) as fh:
                    fh.write(encode_idx(arr))
            print(f"{split}: {len(labels)} images, class counts "
                  f"{np.bincount(labels, minlength=10).tolist()}")


if __name__ == "__main__":
    main()
