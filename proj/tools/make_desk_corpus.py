#!/usr/bin/env python3
"""Generates the bundled desk corpus (data/desk/{train,valid,test}.txt).

The text is produced by a small stochastic grammar so the corpus is
license-free and byte-for-byte reproducible from the seed. It has enough
word- and phrase-level structure for a small character-level Transformer
to learn well below the uniform-model perplexity.
"""

import argparse
import pathlib
import random

NOUNS = [
    "farmer", "river", "village", "teacher", "garden", "window", "letter", "horse", "market",
    "child", "bridge", "doctor", "kitchen", "forest", "sailor", "table", "road", "mother",
    "station", "winter", "story", "king", "lamp", "mountain", "baker", "field", "ship", "house",
]
VERBS_T = [
    "found", "watched", "carried", "opened", "painted", "followed", "visited", "crossed",
    "cleaned", "remembered", "built", "sold", "read", "answered", "closed", "loved",
]
VERBS_I = ["slept", "waited", "laughed", "arrived", "listened", "walked", "rested", "sang"]
ADJS = [
    "old", "quiet", "small", "bright", "cold", "green", "young", "tired", "happy", "long",
    "dark", "warm", "heavy", "gentle", "narrow", "busy",
]
ADVS = ["slowly", "again", "today", "early", "alone", "softly", "once", "later"]
PREPS = ["near", "under", "behind", "across", "beside", "through", "over"]
NAMES = ["anna", "tom", "maria", "peter", "lucy", "jack", "emma", "paul"]
CONJ = ["and", "but", "so", "while", "because"]


def noun_phrase(rng):
    if rng.random() < 0.15:
        return rng.choice(NAMES)
    det = rng.choice(["the", "the", "a", "this", "that", "every"])
    words = [det]
    if rng.random() < 0.5:
        words.append(rng.choice(ADJS))
    words.append(rng.choice(NOUNS))
    if rng.random() < 0.2:
        words += [rng.choice(PREPS), "the", rng.choice(NOUNS)]
    return " ".join(words)


def clause(rng):
    subject = noun_phrase(rng)
    if rng.random() < 0.6:
        words = [subject, rng.choice(VERBS_T), noun_phrase(rng)]
    else:
        words = [subject, rng.choice(VERBS_I)]
        if rng.random() < 0.5:
            words += [rng.choice(PREPS), noun_phrase(rng)]
    if rng.random() < 0.3:
        words.append(rng.choice(ADVS))
    return " ".join(words)


def sentence(rng):
    parts = [clause(rng)]
    while rng.random() < 0.3:
        parts += [rng.choice(CONJ), clause(rng)]
    text = " ".join(parts)
    end = "." if rng.random() < 0.85 else ("?" if rng.random() < 0.5 else "!")
    return text[0].upper() + text[1:] + end


def paragraph(rng):
    return " ".join(sentence(rng) for _ in range(rng.randint(1, 3)))


def generate(rng, size):
    lines, total = [], 0
    while total < size:
        line = paragraph(rng)
        lines.append(line)
        total += len(line) + 1
    return "\n".join(lines) + "\n"


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default=str(pathlib.Path(__file__).resolve().parent.parent / "data" / "desk"))
    parser.add_argument("--seed", type=int, default=20211)
    parser.add_argument("--train-bytes", type=int, default=48000)
    parser.add_argument("--eval-bytes", type=int, default=6000)
    args = parser.parse_args()

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # Separate generators per split keep the splits disjoint draws.
    for name, size, offset in (("train", args.train_bytes, 0), ("valid", args.eval_bytes, 1), ("test", args.eval_bytes, 2)):
        rng = random.Random(args.seed * 10 + offset)
        (out / f"{name}.txt").write_text(generate(rng, size), encoding="utf-8")


if __name__ == "__main__":
    main()
