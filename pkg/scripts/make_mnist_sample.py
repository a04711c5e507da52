"""Write the bundled 5000-digit MNIST sample as IDX files.

Usage: python3 scripts/make_mnist_sample.py OUT_DIR
Produces 2500 training and 2500 disjoint test images (balanced) under the
standard MNIST file names; point DCGP_DATA_DIR or --data-dir at OUT_DIR.
"""
import sys

from dcgp._sample_data import write_mnist_sample

if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else "data/mnist"
    if write_mnist_sample(out) is None:
        sys.exit("mlxtend is not installed; pip install mlxtend --no-deps")
    print(f"wrote MNIST sample to {out}")
