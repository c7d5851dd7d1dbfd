"""Write the first-test-record fixture used by the data-fidelity check.

Parses test.bin with plain byte slicing (no use of the package loader) and
stores the fine label and a 16-byte BLAKE2b digest of the 3072 pixel bytes.

    python3 scripts/make_cifar_fixture.py /data/cifar-100-binary tests/fixtures/cifar100_test_record0.json
"""
import hashlib
import json
import sys
from pathlib import Path


def main():
    root, out = Path(sys.argv[1]), Path(sys.argv[2])
    if (root / "cifar-100-binary").is_dir():
        root = root / "cifar-100-binary"
    with open(root / "test.bin", "rb") as fh:
        rec = fh.read(3074)
    fixture = {"coarse_label": rec[0], "fine_label": rec[1],
               "pixels_blake2b_16": hashlib.blake2b(rec[2:], digest_size=16).hexdigest()}
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(fixture, indent=2, sort_keys=True) + "\n")
    print(fixture)


if __name__ == "__main__":
    main()
