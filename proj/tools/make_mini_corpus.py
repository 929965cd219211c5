#!/usr/bin/env python3
"""Writes the bundled synthetic story corpus and prompt set.

Stories are short children's tales assembled from a small grammar, in the
style of TinyStories. The output is deterministic for a given --seed.

    python3 tools/make_mini_corpus.py --out data/mini_corpus.txt --prompts data/prompts.txt
"""

import argparse
import random

NAMES = ["Lily", "Tom", "Mia", "Ben", "Sue", "Max", "Anna", "Sam", "Lucy", "Jack", "Emma", "Tim"]
ANIMALS = ["dog", "cat", "bird", "bunny", "frog", "duck", "fox", "bear"]
PLACES = ["park", "garden", "forest", "beach", "farm", "pond", "hill", "yard"]
OBJECTS = ["ball", "kite", "box", "hat", "boat", "book", "toy car", "red cup", "blue shell", "big stick"]
ADJ = ["happy", "little", "kind", "brave", "shy", "silly", "sleepy", "curious"]
WEATHER = ["sunny", "rainy", "windy", "warm", "cold", "bright"]
FEELINGS = ["happy", "sad", "scared", "proud", "surprised", "excited"]
ACTIONS = ["play", "run", "jump", "look for shells", "build a tower", "sing a song", "read a book", "dance"]


def sentence_pool(rng, hero, friend, pet, place, thing):
    adj = rng.choice(ADJ)
    return {
        "open": [
            f"Once upon a time, there was a {adj} {kid(hero)} named {hero}.",
            f"One day, {hero} went to the {place} with {hero_pron(hero)} {pet}.",
            f"There was a {adj} {pet} who lived near the {place}.",
            f"It was a {rng.choice(WEATHER)} day, and {hero} wanted to {rng.choice(ACTIONS)}.",
        ],
        "middle": [
            f"{hero} found a {thing} under a tree.",
            f"{hero} saw {friend} by the {place}.",
            f"{friend} said, \"Can I play with your {thing}?\"",
            f"{hero} said, \"Yes, we can share it.\"",
            f"They liked to {rng.choice(ACTIONS)} together.",
            f"The {pet} ran after the {thing} and barked.",
            f"Then the {thing} fell into the water.",
            f"{hero} felt {rng.choice(FEELINGS)}.",
            f"{friend} wanted to help.",
            f"They looked and looked, but they could not find it.",
            f"Mom said, \"Be careful, {hero}!\"",
            f"The sun was warm and the sky was blue.",
            f"A big wind came and took the {thing} up high.",
            f"{hero} and {friend} laughed and played all day.",
        ],
        "close": [
            f"In the end, {hero} and {friend} were best friends.",
            f"{hero} learned that sharing makes everyone happy.",
            f"They went home and had a nice nap.",
            f"From that day on, {hero} always took care of the {thing}.",
            f"The {pet} was happy, and so was {hero}.",
        ],
    }


GIRLS = {"Lily", "Mia", "Sue", "Anna", "Lucy", "Emma"}


def hero_pron(name):
    return "her" if name in GIRLS else "his"


def kid(name):
    return "girl" if name in GIRLS else "boy"


def story_sentences(rng):
    hero, friend = rng.sample(NAMES, 2)
    pool = sentence_pool(rng, hero, friend, rng.choice(ANIMALS), rng.choice(PLACES), rng.choice(OBJECTS))
    parts = [rng.choice(pool["open"])]
    parts += rng.sample(pool["middle"], rng.randint(5, 9))
    parts.append(rng.choice(pool["close"]))
    return parts


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/mini_corpus.txt")
    ap.add_argument("--prompts", default="data/prompts.txt")
    ap.add_argument("--count", type=int, default=200)
    ap.add_argument("--seed", type=int, default=20240)
    args = ap.parse_args()

    rng = random.Random(args.seed)
    stories = [" ".join(story_sentences(rng)) for _ in range(args.count)]
    with open(args.out, "w", encoding="utf-8") as f:
        f.write("\n\n".join(stories) + "\n")

    # Story beginnings: the first two sentences of fresh stories.
    beginnings = [" ".join(story_sentences(rng)[:2]) for _ in range(8)]
    with open(args.prompts, "w", encoding="utf-8") as f:
        f.write("\n".join(beginnings) + "\n")


if __name__ == "__main__":
    main()
