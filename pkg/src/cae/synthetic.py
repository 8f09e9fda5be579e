"""Template-grammar corpora where style lives in a marker slot and content in shared slots."""

from __future__ import annotations

import numpy as np

FOODS = ["pizza", "pasta", "burger", "salad", "steak", "soup", "sushi", "tacos",
         "chicken", "fries", "noodles", "curry"]
PLACES = ["restaurant", "cafe", "diner", "bistro", "bar", "bakery"]
STREETS = ["main", "oak", "park", "river", "market", "king"]
PEOPLE = ["waiter", "server", "manager", "chef", "host", "cashier"]
DAYS = ["monday", "tuesday", "friday", "saturday", "sunday"]

MARKERS = {
    1: ["great", "delicious", "amazing", "excellent", "wonderful", "fantastic"],
    2: ["awful", "terrible", "bland", "horrible", "disgusting", "mediocre"],
}

TEMPLATES = [
    "the {food} at the {place} on {street} street was {m} .",
    "we had the {food} on {day} and it was {m} .",
    "the {person} at this {place} was {m} to us on {day} .",
    "i think the {food} from the {place} near {street} is {m} .",
    "our {person} brought the {food} and it tasted {m} .",
]

SLOTS = {"food": FOODS, "place": PLACES, "street": STREETS, "person": PEOPLE, "day": DAYS}


def _weights(n, zipf):
    w = 1.0 / np.arange(1, n + 1) ** zipf
    return w / w.sum()


def generate_sentence(rng, style, zipf=0.5):
    tmpl = TEMPLATES[rng.choice(len(TEMPLATES), p=_weights(len(TEMPLATES), zipf))]
    fill = {k: v[rng.choice(len(v), p=_weights(len(v), zipf))] for k, v in SLOTS.items()}
    fill["m"] = MARKERS[style][rng.integers(len(MARKERS[style]))]
    return tmpl.format(**fill).split()


def generate_corpus(n, style, seed, zipf=0.5):
    rng = np.random.default_rng([seed, style])
    return [generate_sentence(rng, style, zipf) for _ in range(n)]


def generate_pair(n, seed=0, zipf=0.5):
    """Two independent (non-parallel) corpora of ``n`` sentences each."""
    return generate_corpus(n, 1, seed, zipf), generate_corpus(n, 2, seed, zipf)


def marker_style(tokens):
    """1 or 2 if the sentence carries only that style's markers, else 0."""
    toks = set(tokens)
    has = [s for s in (1, 2) if toks & set(MARKERS[s])]
    return has[0] if len(has) == 1 else 0


def content_tokens(tokens):
    markers = set(MARKERS[1]) | set(MARKERS[2])
    return [t for t in tokens if t not in markers]
