"""Writes a two-utterance word-feature file and prints per-record checksums.

Usage: python3 write_uft1.py OUT.uft1 > OUT.sha256
"""
import hashlib
import math
import struct
import sys

DIM = 8
# (id, token count); rows = tokens + 1 with the summary row first
RECORDS = [("42_1", 3), ("42_2", 1)]


def values(key, rows):
    out = []
    for r in range(rows):
        for c in range(DIM):
            out.append(math.sin(0.37 * (r + 1) + 0.11 * (c + 1) + len(key)) / (r + 1))
    return out


def main(path):
    blob = bytearray(b"UFT1")
    blob += struct.pack("<III", 1, DIM, len(RECORDS))
    lines = []
    for key, tokens in RECORDS:
        rows = tokens + 1
        data = struct.pack("<%df" % (rows * DIM), *values(key, rows))
        raw = key.encode("utf-8")
        blob += struct.pack("<I", len(raw)) + raw + struct.pack("<I", rows) + data
        lines.append("%s %d %s" % (key, rows, hashlib.sha256(data).hexdigest()))
    with open(path, "wb") as f:
        f.write(blob)
    print("\n".join(lines))


if __name__ == "__main__":
    main(sys.argv[1])
