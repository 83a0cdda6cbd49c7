"""Deterministic synthetic encyclopedia used as the bundled desk corpus.

Each document describes one fictional person. Persons carry fixed facts
(birthplace, birth year, occupation, field, mentor, signature object) that
are restated across documents with varied templates, while popularity follows
a Zipf law. Frequent persons are easy to learn; rare ones are the long tail a
small decoder underfits and a retrieval memory can recall. Output is already
whitespace-tokenized, WikiText style.
"""
from __future__ import annotations

import random
from dataclasses import dataclass

_ONSETS = ["b", "c", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
           "br", "dr", "gr", "kr", "st", "th", "sh", "ch", "tr", "pl"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ei", "ou", "ia"]
_CODAS = ["", "", "n", "r", "l", "s", "th", "nd", "rk", "x"]

OCCUPATIONS = [
    "painter", "sculptor", "poet", "novelist", "composer", "violinist", "architect", "engineer",
    "chemist", "physicist", "astronomer", "botanist", "surgeon", "physician", "lawyer", "judge",
    "diplomat", "merchant", "banker", "sailor", "explorer", "cartographer", "historian",
    "philosopher", "mathematician", "teacher", "printer", "weaver", "potter", "goldsmith",
    "soldier", "general", "priest", "actor", "singer", "dancer", "journalist", "photographer",
    "inventor", "geologist",
]
FIELDS = [
    "optics", "harmony", "anatomy", "rhetoric", "geometry", "metallurgy", "botany", "navigation",
    "astronomy", "grammar", "theology", "mechanics", "chemistry", "poetry", "law", "medicine",
    "algebra", "painting", "architecture", "music", "history", "logic", "zoology", "economics",
]
OBJECTS = [
    "bridge", "cathedral", "telescope", "symphony", "portrait", "map", "treatise", "clock",
    "fountain", "statue", "opera", "lighthouse", "atlas", "engine", "garden", "library",
    "chronicle", "tapestry", "observatory", "canal", "organ", "manuscript", "mural", "harbour",
]
ADJECTIVES = [
    "famous", "great", "old", "new", "small", "large", "northern", "southern", "quiet", "bright",
    "ancient", "modern", "celebrated", "forgotten", "unfinished", "golden", "stone", "wooden",
]
_NOUNS = ["city", "river", "house", "road", "market", "school", "church", "valley", "harbour",
          "village", "court", "museum", "festival", "family", "council", "university", "war",
          "winter", "summer", "journey", "letter", "book", "song", "year", "people"]
_VERBS = ["visited", "crossed", "described", "opened", "closed", "praised", "left", "joined",
          "built", "remembered", "admired", "restored", "entered", "followed", "welcomed"]


@dataclass(frozen=True)
class Person:
    first: str
    last: str
    female: bool
    city: str
    year: int
    occupation: str
    field: str
    obj: str
    obj_adj: str
    mentor: tuple[str, str]

    @property
    def name(self) -> str:
        return f"{self.first} {self.last}"


def _word(rng: random.Random, syllables: int) -> str:
    return "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(syllables)) + rng.choice(_CODAS)


def _distinct_words(rng: random.Random, n: int, syllables: tuple[int, int], taken: set[str]) -> list[str]:
    out: list[str] = []
    while len(out) < n:
        w = _word(rng, rng.randint(*syllables)).capitalize()
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


class SyntheticEncyclopedia:
    def __init__(self, seed: int = 0, n_persons: int = 2000, n_first: int = 300,
                 n_last: int = 400, n_cities: int = 80, n_countries: int = 16,
                 zipf_s: float = 1.0) -> None:
        rng = random.Random(seed)
        taken: set[str] = set()
        firsts = _distinct_words(rng, n_first, (1, 2), taken)
        lasts = _distinct_words(rng, n_last, (2, 3), taken)
        self.cities = _distinct_words(rng, n_cities, (2, 3), taken)
        countries = _distinct_words(rng, n_countries, (2, 3), taken)
        self.country_of = {c: rng.choice(countries) for c in self.cities}

        names: set[tuple[str, str]] = set()
        while len(names) < n_persons:
            names.add((rng.choice(firsts), rng.choice(lasts)))
        ordered = sorted(names)
        rng.shuffle(ordered)
        self.persons: list[Person] = []
        for i, (first, last) in enumerate(ordered):
            mentor = ordered[rng.randrange(len(ordered))] if i else ordered[-1]
            self.persons.append(Person(
                first=first, last=last, female=rng.random() < 0.5,
                city=rng.choice(self.cities), year=rng.randint(1600, 1899),
                occupation=rng.choice(OCCUPATIONS), field=rng.choice(FIELDS),
                obj=rng.choice(OBJECTS), obj_adj=rng.choice(ADJECTIVES), mentor=mentor,
            ))
        self.weights = [1.0 / (r + 5) ** zipf_s for r in range(n_persons)]
        self._rng = rng

    def _fact_sentences(self, p: Person, rng: random.Random) -> list[str]:
        """One sentence per fact group, each in a randomly chosen template."""
        pron = "she" if p.female else "he"
        poss = "her" if p.female else "his"
        mentor = " ".join(p.mentor)
        art = "an" if p.occupation[0] in "aeiou" else "a"
        country = self.country_of[p.city]

        def subj() -> str:
            return p.name if rng.random() < 0.5 else pron.capitalize()

        groups = [
            [f"{subj()} was born in {p.city} in {p.year} .",
             f"born in {p.year} , {p.name} grew up in {p.city} , {country} ."],
            [f"{subj()} worked as {art} {p.occupation} for most of {poss} life .",
             f"{subj()} is best known as {art} {p.occupation} ."],
            [f"{subj()} studied {p.field} under {mentor} .",
             f"{p.name} was a student of {mentor} and wrote on {p.field} ."],
            [f"{subj()} is remembered for the {p.obj_adj} {p.obj} of {p.city} .",
             f"the {p.obj_adj} {p.obj} of {p.city} was the work of {p.name} ."],
            [f"in {p.year + rng.randint(18, 40)} {pron} moved to {rng.choice(self.cities)} ."],
        ]
        chosen = rng.sample(groups, rng.randint(2, len(groups)))
        return [rng.choice(g) for g in chosen]

    def _filler_sentence(self, rng: random.Random) -> str:
        a, b = rng.choice(ADJECTIVES), rng.choice(ADJECTIVES)
        n1, n2 = rng.choice(_NOUNS), rng.choice(_NOUNS)
        v = rng.choice(_VERBS)
        city = rng.choice(self.cities)
        templates = [
            f"the {a} {n1} {v} the {b} {n2} .",
            f"in {city} the {n1} {v} the {n2} .",
            f"{city} is a city in {self.country_of[city]} .",
            f"many people {v} the {a} {n1} of {city} .",
            f"the {n1} of {city} was {a} and {b} .",
        ]
        return rng.choice(templates)

    def document(self, rng: random.Random) -> str:
        p = rng.choices(self.persons, weights=self.weights)[0]
        sentences = self._fact_sentences(p, rng)
        for _ in range(rng.randint(0, 2)):
            sentences.insert(rng.randint(1, len(sentences)), self._filler_sentence(rng))
        return f"= {p.name} =\n" + " ".join(sentences)

    def generate(self, n_tokens: int, seed: int | None = None) -> str:
        """Return whitespace-tokenized text with at least ``n_tokens`` tokens."""
        rng = random.Random(seed) if seed is not None else self._rng
        docs, count = [], 0
        while count < n_tokens:
            doc = self.document(rng)
            docs.append(doc)
            count += len(doc.split())
        return "\n\n".join(docs) + "\n"


def generate_corpus(n_tokens: int, seed: int = 0, **kwargs) -> str:
    return SyntheticEncyclopedia(seed=seed, **kwargs).generate(n_tokens, seed=seed + 1)
