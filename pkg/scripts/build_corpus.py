#!/usr/bin/env python3
"""Regenerate the bundled training corpus from the local CPython stdlib.

The corpus is a fixed-size ASCII concatenation of standard-library source
files (PSF-2.0 licensed text that ships with every Python install). The
output is committed at src/bitnm/data/corpus.txt so training runs do not
depend on the generating interpreter's version.
"""

import os
import sys
import sysconfig

TARGET_BYTES = 2_500_000
OUT = os.path.join(os.path.dirname(__file__), "..", "src", "bitnm", "data", "corpus.txt")


def main() -> int:
    stdlib = sysconfig.get_paths()["stdlib"]
    names = sorted(f for f in os.listdir(stdlib) if f.endswith(".py"))
    chunks = []
    total = 0
    for name in names:
        with open(os.path.join(stdlib, name), "rb") as fh:
            raw = fh.read()
        text = raw.decode("utf-8", errors="ignore")
        text = "".join(ch for ch in text if ch == "\n" or ch == "\t" or 32 <= ord(ch) < 127)
        chunk = f"\n\n# ==== {name} ====\n\n" + text
        chunks.append(chunk)
        total += len(chunk)
        if total >= TARGET_BYTES:
            break
    corpus = "".join(chunks)[:TARGET_BYTES]
    os.makedirs(os.path.dirname(OUT), exist_ok=True)
    with open(OUT, "w", encoding="ascii") as fh:
        fh.write(corpus)
    print(f"wrote {len(corpus)} bytes, {len(set(corpus))} distinct chars -> {os.path.normpath(OUT)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
