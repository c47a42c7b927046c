#!/usr/bin/env python3
"""Regenerates crates/core/assets/corpus.txt.

The bundled corpus is synthetic: short "village chronicle" paragraphs built
from a small grammar with a fixed seed. It is dedicated to the public domain
(CC0). One paragraph per line; each line is one document.

    python3 scripts/gen_corpus.py > crates/core/assets/corpus.txt
"""

import random

SEED = 20240611
TARGET_BYTES = 200_000

NAMES = [
    "anna", "boris", "clara", "david", "elena", "felix", "greta", "henry",
    "irene", "jonas", "karla", "lucas", "marta", "nils", "olga", "peter",
    "rosa", "simon", "tilda", "victor",
]
PLACES = [
    "market", "river", "mill", "church", "bakery", "forest", "harbor",
    "school", "garden", "bridge", "tavern", "farm", "meadow", "library",
]
ANIMALS = ["dog", "cat", "horse", "goat", "sheep", "cow", "hen", "fox", "owl", "duck"]
THINGS = [
    "bread", "apples", "letters", "wood", "cheese", "fish", "flowers", "books",
    "tools", "milk", "honey", "candles", "wool", "salt",
]
ADJ = ["old", "small", "quiet", "busy", "green", "cold", "bright", "long", "warm", "dark"]
TIMES = ["in the morning", "at noon", "in the evening", "at night", "before dawn", "after supper"]
WEATHER = ["rain", "snow", "wind", "fog", "sun", "frost"]
SEASONS = ["spring", "summer", "autumn", "winter"]
VERBS_GO = ["walked", "ran", "rode", "went", "hurried", "wandered"]
VERBS_CARRY = ["carried", "brought", "sold", "bought", "found", "lost"]
FEEL = ["happy", "tired", "hungry", "worried", "proud", "calm"]
NUM = ["two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"]


def sentence(r: random.Random, who: str) -> str:
    k = r.randrange(10)
    place = r.choice(PLACES)
    if k == 0:
        return f"{who} {r.choice(VERBS_GO)} to the {r.choice(ADJ)} {place} {r.choice(TIMES)}."
    if k == 1:
        n = r.choice(NUM)
        return f"{who} {r.choice(VERBS_CARRY)} {n} baskets of {r.choice(THINGS)} at the {place}."
    if k == 2:
        a = r.choice(ANIMALS)
        return f"the {a} followed {who} to the {place}, and {who} gave the {a} some {r.choice(THINGS)}."
    if k == 3:
        s = r.choice(SEASONS)
        return f"in {s} the {place} is {r.choice(ADJ)}, and the {r.choice(WEATHER)} comes {r.choice(TIMES)}."
    if k == 4:
        other = r.choice(NAMES)
        return f"{who} met {other} near the {place}; they talked about the {r.choice(WEATHER)}."
    if k == 5:
        return f"{who} was {r.choice(FEEL)} because the {r.choice(THINGS)} were {r.choice(ADJ)}."
    if k == 6:
        return f"\"we need more {r.choice(THINGS)},\" said {who} at the {place}."
    if k == 7:
        a = r.choice(ANIMALS)
        return f"a {r.choice(ADJ)} {a} slept by the {place} while the {r.choice(WEATHER)} fell."
    if k == 8:
        other = r.choice(NAMES)
        t = r.choice(THINGS)
        return f"{other} asked {who} for {t}, and {who} said yes."
    return f"{who} counted {r.choice(NUM)} {r.choice(ANIMALS)}s on the way to the {place}."


def paragraph(r: random.Random) -> str:
    who = r.choice(NAMES)
    n = r.randint(2, 5)
    return " ".join(sentence(r, who) for _ in range(n))


def main() -> None:
    r = random.Random(SEED)
    out = []
    size = 0
    while size < TARGET_BYTES:
        p = paragraph(r)
        out.append(p)
        size += len(p) + 1
    print("\n".join(out))


if __name__ == "__main__":
    main()
