"""Convert the 5000-sample MNIST subset bundled with mlxtend into IDX files.

Usage: python tools/fetch_mnist.py [WHEEL_OR_CSV] [OUT_DIR]

Without arguments the mlxtend wheel is downloaded with pip. The CSV has one
row per image: 784 pixel values followed by the digit label.
"""

import gzip
import io
import struct
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def load_csv_bytes(source):
    if source is None:
        tmp = Path(tempfile.mkdtemp())
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "mlxtend==0.24.0", "-d", str(tmp)],
            check=True,
        )
        source = next(tmp.glob("mlxtend-*.whl"))
    source = Path(source)
    if source.suffix == ".whl":
        with zipfile.ZipFile(source) as zf:
            raw = zf.read(MEMBER)
    else:
        raw = source.read_bytes()
    return gzip.decompress(raw)


def main():
    source = sys.argv[1] if len(sys.argv) > 1 else None
    out = Path(sys.argv[2] if len(sys.argv) > 2 else "data/mnist5k")
    out.mkdir(parents=True, exist_ok=True)
    rows = [line.split(",") for line in io.StringIO(load_csv_bytes(source).decode()) if line.strip()]
    pixels = bytearray()
    labels = bytearray()
    for row in rows:
        values = [int(float(v)) for v in row]
        assert len(values) == 785, len(values)
        pixels.extend(values[:784])
        labels.append(values[784])
    n = len(rows)
    images = struct.pack(">IIII", 0x803, n, 28, 28) + bytes(pixels)
    label_file = struct.pack(">II", 0x801, n) + bytes(labels)
    # mtime=0 keeps the archives byte-for-byte reproducible
    with gzip.GzipFile(out / "train-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(images)
    with gzip.GzipFile(out / "train-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(label_file)
    print(f"wrote {n} images to {out}")


if __name__ == "__main__":
    main()
