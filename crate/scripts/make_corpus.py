#!/usr/bin/env python3
"""Generate the small synthetic English-like corpus shipped in data/.

The text comes from a fixed probabilistic grammar so the file is
reproducible byte for byte: python3 scripts/make_corpus.py > data/sample.txt
"""
import random
import sys

NOUNS = """river mountain village farmer lantern harbor garden teacher window bridge
forest letter kettle sailor meadow market orchard painter candle valley
shepherd carriage island library traveler blanket fountain merchant cottage
clock engine storm feather mirror soldier basket pilot ladder castle""".split()
ADJS = """quiet old small bright heavy gentle narrow golden cold distant young
patient crooked silver broad dusty careful hollow green tired""".split()
VERBS_T = """watched carried found followed painted repaired opened crossed
remembered measured borrowed visited described lifted counted""".split()
VERBS_I = """waited slept wandered laughed listened rested paused returned
vanished trembled sang""".split()
ADVS = "slowly quietly again carefully early suddenly softly often".split()
PREPS = "near under beyond beside across behind toward through".split()
NAMES = "Anna Tomas Elin Marek Rosa Ivo Clara Henrik".split()
CONJ = ["and", "but", "so", "while", "because"]
TIMES = ["in the morning", "at dusk", "before the rain", "after supper",
         "in the winter", "on the first day", "at noon"]


def np(rng):
    if rng.random() < 0.15:
        return rng.choice(NAMES)
    det = rng.choice(["the", "the", "a", "every", "that"])
    parts = [det]
    if rng.random() < 0.5:
        parts.append(rng.choice(ADJS))
    parts.append(rng.choice(NOUNS))
    if rng.random() < 0.2:
        parts += [rng.choice(PREPS), "the", rng.choice(NOUNS)]
    return " ".join(parts)


def clause(rng):
    subj = np(rng)
    if rng.random() < 0.6:
        body = f"{subj} {rng.choice(VERBS_T)} {np(rng)}"
    else:
        body = f"{subj} {rng.choice(VERBS_I)}"
    if rng.random() < 0.3:
        body += " " + rng.choice(ADVS)
    if rng.random() < 0.25:
        body += " " + rng.choice(TIMES)
    return body


def sentence(rng):
    s = clause(rng)
    if rng.random() < 0.35:
        s += ", " + rng.choice(CONJ) + " " + clause(rng)
    s = s[0].upper() + s[1:]
    end = "." if rng.random() < 0.85 else rng.choice(["!", "?", "."])
    if rng.random() < 0.1:
        return f'"{s}{end}" said {rng.choice(NAMES)}.'
    return s + end


def main():
    target = int(sys.argv[1]) if len(sys.argv) > 1 else 300_000
    rng = random.Random(20240607)
    out = []
    size = 0
    while size < target:
        para = " ".join(sentence(rng) for _ in range(rng.randint(3, 7)))
        out.append(para)
        size += len(para) + 2
    sys.stdout.write("\n\n".join(out) + "\n")


if __name__ == "__main__":
    main()
