"""Build the class-balanced FashionMNIST subset shipped under data/.

Input: the per-class JSON dumps from the `fashion-mnist` npm package
(package/src/clothes/<class>.json, each {"data": [[784 bytes], ...]}).
Output: IDX files (train 600/class, test 100/class) in class-interleaved order.
"""
import json
import struct
import sys
from pathlib import Path

TRAIN_PER_CLASS = 600
TEST_PER_CLASS = 100


def write_images(path, rows):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(rows), 28, 28))
        for r in rows:
            f.write(bytes(r))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(bytes(labels))


def main(src, dst):
    src, dst = Path(src), Path(dst)
    per_class = []
    for c in range(10):
        data = json.loads((src / f"{c}.json").read_text())["data"]
        rows = [r for r in data if len(r) == 784]
        per_class.append(rows[: TRAIN_PER_CLASS + TEST_PER_CLASS])
    train, train_y, test, test_y = [], [], [], []
    for i in range(TRAIN_PER_CLASS):
        for c in range(10):
            train.append(per_class[c][i])
            train_y.append(c)
    for i in range(TRAIN_PER_CLASS, TRAIN_PER_CLASS + TEST_PER_CLASS):
        for c in range(10):
            test.append(per_class[c][i])
            test_y.append(c)
    dst.mkdir(parents=True, exist_ok=True)
    write_images(dst / "train-images-idx3-ubyte", train)
    write_labels(dst / "train-labels-idx1-ubyte", train_y)
    write_images(dst / "t10k-images-idx3-ubyte", test)
    write_labels(dst / "t10k-labels-idx1-ubyte", test_y)


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
