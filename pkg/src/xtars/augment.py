"""Character-level misspelling operators for data augmentation.

Both operators are edits of exactly 1: ``word_split`` inserts a single space
inside a word, ``char_change`` substitutes a single non-space character.
"""

import string

import numpy as np


def word_split(text: str, rng: np.random.Generator) -> str:
    """Insert one space at a random interior position of a random word.

    Only words of length >= 2 can be split; if none exists the character-change
    operator is applied instead.
    """
    words = text.split(" ")
    splittable = [i for i, w in enumerate(words) if len(w) >= 2]
    if not splittable:
        return char_change(text, rng)
    wi = splittable[int(rng.integers(len(splittable)))]
    word = words[wi]
    pos = 1 + int(rng.integers(len(word) - 1))
    words[wi] = word[:pos] + " " + word[pos:]
    return " ".join(words)


def char_change(text: str, rng: np.random.Generator) -> str:
    """Replace one random non-space character with a different lowercase letter."""
    positions = [i for i, c in enumerate(text) if c != " "]
    if not positions:
        raise ValueError("cannot apply char_change to all-space text")
    i = positions[int(rng.integers(len(positions)))]
    alphabet = [c for c in string.ascii_lowercase if c != text[i]]
    repl = alphabet[int(rng.integers(len(alphabet)))]
    return text[:i] + repl + text[i + 1 :]
