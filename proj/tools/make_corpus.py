#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
"""Generate the bundled sample corpus.

The text comes from a small seeded probabilistic grammar over lowercase
English. It has enough local structure for a character model to learn,
and the alphabet stays well under 64 symbols.

    python3 tools/make_corpus.py --out data/sample_corpus.txt --bytes 1000000
"""

import argparse
import random

SUBJECTS = [
    "the farmer", "a young clerk", "the old miller", "my neighbour", "the captain",
    "a quiet student", "the baker", "her brother", "the river pilot", "a tired doctor",
    "the weaver", "our teacher", "the night guard", "a travelling singer", "the mayor",
]
VERBS = [
    "carried", "painted", "found", "sold", "repaired", "watched", "counted", "borrowed",
    "opened", "cleaned", "measured", "hid", "described", "followed", "built",
]
OBJECTS = [
    "a wooden box", "the broken gate", "three copper coins", "the blue boat",
    "a heavy lantern", "the long letter", "two loaves of bread", "an empty barrel",
    "the narrow bridge", "a map of the hills", "the winter coat", "a basket of apples",
]
PLACES = [
    "near the market", "by the old mill", "across the valley", "under the bridge",
    "before sunrise", "after the storm", "at the harbour", "behind the chapel",
    "along the canal", "in the north field",
]
CONNECTIVES = ["and then", "but later", "so", "because", "while", "although"]
ADVERBS = ["slowly", "carefully", "twice", "quietly", "again", "at last", "without a word"]


def clause(rng):
    parts = [rng.choice(SUBJECTS), rng.choice(VERBS), rng.choice(OBJECTS)]
    if rng.random() < 0.5:
        parts.append(rng.choice(PLACES))
    if rng.random() < 0.3:
        parts.insert(2, rng.choice(ADVERBS))
    return " ".join(parts)


def sentence(rng):
    text = clause(rng)
    while rng.random() < 0.35:
        text += ", " + rng.choice(CONNECTIVES) + " " + clause(rng)
    text = text[0].upper() + text[1:]
    return text + rng.choice([".", ".", ".", "!", "?"])


def paragraph(rng):
    return " ".join(sentence(rng) for _ in range(rng.randint(3, 7)))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--bytes", type=int, default=1_000_000)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    rng = random.Random(args.seed)
    chunks, size = [], 0
    while size < args.bytes:
        p = paragraph(rng) + "\n\n"
        chunks.append(p)
        size += len(p)
    text = "".join(chunks)[: args.bytes]
    with open(args.out, "w", encoding="ascii", newline="\n") as f:
        f.write(text)
    print(f"wrote {len(text)} bytes, {len(set(text))} distinct characters to {args.out}")


if __name__ == "__main__":
    main()
