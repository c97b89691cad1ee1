"""Planted-group synthetic rating logs with keyword-bearing item descriptions."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

GENRES = {
    "mystery": ("detective", "murder", "clue", "suspect", "alibi", "crime", "secret", "inspector"),
    "romance": ("love", "wedding", "heart", "kiss", "passion", "courtship", "longing", "bride"),
    "scifi": ("robot", "galaxy", "starship", "alien", "android", "orbit", "laser", "planet"),
    "fantasy": ("dragon", "wizard", "quest", "sword", "kingdom", "spell", "elf", "prophecy"),
    "history": ("empire", "war", "revolution", "dynasty", "treaty", "battle", "monarch", "colony"),
    "horror": ("ghost", "haunted", "curse", "demon", "graveyard", "vampire", "nightmare", "ritual"),
}
TITLE_NOUNS = {
    "mystery": ("case", "file", "trail", "verdict"),
    "romance": ("vow", "summer", "letter", "promise"),
    "scifi": ("signal", "colony", "horizon", "machine"),
    "fantasy": ("crown", "realm", "oath", "throne"),
    "history": ("chronicle", "siege", "banner", "march"),
    "horror": ("shadow", "crypt", "whisper", "hollow"),
}
ADJECTIVES = ("silent", "crimson", "broken", "golden", "hidden", "last", "distant", "quiet",
              "iron", "wild", "pale", "bright")
FILLER = ("story", "journey", "world", "life", "people", "time")


@dataclass(frozen=True)
class SyntheticSpec:
    n_users: int = 500
    n_items: int = 300
    n_groups: int = 2
    n_genres: int = 4
    min_events: int = 36
    max_events: int = 44
    noise: float = 0.1
    horizon: int = 1_000_000
    seed: int = 0


def liked(group: int, genre: int, n_groups: int) -> bool:
    """Genre ``c`` with ``c % (n_groups + 2) == g`` is liked by group g only;
    the residue ``n_groups`` is liked by everyone and ``n_groups + 1`` by nobody.
    """
    c = genre % (n_groups + 2)
    return c == group or c == n_groups


def generate(spec: SyntheticSpec = SyntheticSpec()):
    """Return (ratings rows, item rows, user groups, item genres).

    See :func:`liked` for the preference pattern; a liked item is rated 4-5
    with probability ``1 - noise`` and 1-3 otherwise.
    """
    if spec.n_genres > len(GENRES):
        raise ValueError(f"at most {len(GENRES)} genres available")
    rng = np.random.default_rng(spec.seed)
    names = list(GENRES)[: spec.n_genres]
    genres = rng.permutation(np.arange(spec.n_items) % spec.n_genres)
    items = []
    for i, g in enumerate(genres):
        name = names[g]
        kws = rng.choice(GENRES[name], size=4, replace=False)
        fill = rng.choice(FILLER, size=2, replace=False)
        title = f"{ADJECTIVES[rng.integers(len(ADJECTIVES))]} {TITLE_NOUNS[name][rng.integers(4)]}"
        desc = (f"A {kws[0]} {fill[0]} of {kws[1]} and {kws[2]}, with {kws[3]} at every turn "
                f"and a {kws[0]} {kws[1]} {fill[1]}.")
        items.append((i + 1, title, desc))
    groups = rng.permutation(np.arange(spec.n_users) % spec.n_groups)
    ratings = []
    for u in range(spec.n_users):
        n = min(int(rng.integers(spec.min_events, spec.max_events + 1)), spec.n_items)
        chosen = rng.choice(spec.n_items, size=n, replace=False)
        times = np.sort(rng.choice(spec.horizon, size=n, replace=False))
        for it, t in zip(chosen, times):
            pref = liked(int(groups[u]), int(genres[it]), spec.n_groups)
            positive = rng.random() < (1 - spec.noise if pref else spec.noise)
            rating = int(rng.integers(4, 6)) if positive else int(rng.integers(1, 4))
            ratings.append((u + 1, int(it) + 1, rating, int(t)))
    return ratings, items, groups, genres


def write(directory: str | Path, spec: SyntheticSpec = SyntheticSpec()) -> dict[str, Path]:
    """Write ``ratings.dat`` (``::``-delimited), ``items.tsv`` and ``groups.tsv``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ratings, items, groups, genres = generate(spec)
    paths = {"ratings": d / "ratings.dat", "items": d / "items.tsv", "groups": d / "groups.tsv"}
    paths["ratings"].write_text("".join(f"{u}::{i}::{r}::{t}\n" for u, i, r, t in ratings))
    paths["items"].write_text("".join(f"{i}\t{t}\t{desc}\n" for i, t, desc in items), encoding="utf-8")
    paths["groups"].write_text("".join(f"{u + 1}\t{g}\n" for u, g in enumerate(groups)))
    return paths
