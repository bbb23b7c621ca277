#!/usr/bin/env python3
"""Builds the bundled desk-scale corpus from two public-domain texts.

Inputs (data/desk/raw):
  alice29.txt   Lewis Carroll, Alice's Adventures in Wonderland (Canterbury corpus copy)
  plrabn12.txt  John Milton, Paradise Lost (Canterbury corpus copy)

Output (data/desk): train.txt, valid.txt, test.txt in word-level PTB style:
lower-cased, punctuation split into separate tokens, digits mapped to "N",
rare words replaced by "<unk>", one sentence-ish line per output line.
"""

import argparse
import collections
import pathlib
import re

TOKEN_RE = re.compile(r"[a-z]+(?:'[a-z]+)?|[0-9]+|[.,;:!?()\-]")


def body(path: pathlib.Path, start: str, end: str) -> list[str]:
    lines = path.read_text(encoding="latin-1").splitlines()
    first = next(i for i, l in enumerate(lines) if l.strip().startswith(start))
    last = next(i for i, l in enumerate(lines) if l.strip().startswith(end))
    return lines[first:last]


def tokenize(line: str) -> list[str]:
    line = line.lower().replace("`", "'").replace("--", " - ")
    out = []
    for tok in TOKEN_RE.findall(line):
        if tok.isdigit():
            out.append("N")
        elif tok.startswith("'"):
            out.append(tok[1:])
        else:
            out.append(tok)
    return [t for t in out if t]


def sentences(lines: list[str]) -> list[list[str]]:
    """Joins wrapped lines and breaks after sentence-final punctuation."""
    result, current = [], []
    for line in lines:
        for tok in tokenize(line):
            current.append(tok)
            if tok in {".", "!", "?", ";"} and len(current) >= 4:
                result.append(current)
                current = []
    if current:
        result.append(current)
    return result


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--root", default=pathlib.Path(__file__).resolve().parents[1] / "data" / "desk")
    ap.add_argument("--min-count", type=int, default=2)
    args = ap.parse_args()
    root = pathlib.Path(args.root)

    alice = sentences(body(root / "raw" / "alice29.txt", "CHAPTER I", "THE END"))
    milton = sentences(body(root / "raw" / "plrabn12.txt", "Book I", "[The End]"))

    # Contiguous tails of each book become validation and test text.
    def split(sents):
        n = len(sents)
        a, b = int(n * 0.9), int(n * 0.95)
        return sents[:a], sents[a:b], sents[b:]

    parts = [split(alice), split(milton)]
    train = parts[0][0] + parts[1][0]
    valid = parts[0][1] + parts[1][1]
    test = parts[0][2] + parts[1][2]

    counts = collections.Counter(t for s in train for t in s)
    keep = {t for t, c in counts.items() if c >= args.min_count}

    def write(name, sents):
        with open(root / name, "w", encoding="utf-8") as f:
            for s in sents:
                f.write(" ".join(t if t in keep else "<unk>" for t in s) + "\n")
        return sum(len(s) + 1 for s in sents)

    sizes = {n: write(n + ".txt", s) for n, s in (("train", train), ("valid", valid), ("test", test))}
    print(f"types kept: {len(keep)}; tokens incl. <eos>: {sizes}")


if __name__ == "__main__":
    main()
