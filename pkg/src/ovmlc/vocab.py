"""Closed word bank shared by the tokenizer, dataset generator and pipeline stubs."""
from __future__ import annotations

# name -> (kind, open-vocabulary synonym name)
ENTITY_CONCEPTS = {
    "red car": "crimson automobile",
    "water slide": "aqua chute",
    "dog": "hound",
    "guitar": "lute",
    "bicycle": "bike",
    "tree": "sapling",
    "boat": "vessel",
    "horse": "stallion",
    "ball": "sphere",
    "lamp": "lantern",
}

# Consecutive entries are time reversals of each other.
ACTION_CONCEPTS = {
    "opening door": "unsealing gate",
    "closing door": "shutting gate",
    "rising balloon": "ascending blimp",
    "falling balloon": "descending blimp",
    "moving left": "shifting west",
    "moving right": "shifting east",
}

PROMPT_TEMPLATE_WORDS = (
    "q what are useful features for distinguishing a in photo there several visual to tell about"
).split()

PROMPT_WORDS = "video of clip showing footage recording which has the is an and with on at".split()

FILLER_WORDS = """
big small tall short long round square bright dark shiny wooden metal plastic furry wet dry
green blue yellow black white brown orange purple gray pink striped spotted fast slow loud quiet
legs wheels wings mane tail fur leaves branches handle strings sail mast engine seat window roof
wall floor sky grass road river sea beach field street park room stage light lights night day
person people man woman child group hand arm face head eyes water sand snow rain sun cloud
riding playing walking running jumping swimming sliding singing performing parked holding writing
putting cooking grilling barbecue lotion ring nail polish pen paper motorcycle motorcycles band
microphone bright lit dimly shining frame screen ferris wheel amusement ride arcade playground
""".split()

DIGITS = [str(i) for i in range(1, 10)]

# word-level synonym table: synonym word -> canonical word
WORD_SYNONYMS = {}
for _canon, _syn in {**ENTITY_CONCEPTS, **ACTION_CONCEPTS}.items():
    for _c, _s in zip(_canon.split(), _syn.split()):
        if _c != _s:
            WORD_SYNONYMS[_s] = _c


def default_words() -> list[str]:
    """Deterministic ordered word list (duplicates removed, first occurrence kept)."""
    words = []
    for name in [*ENTITY_CONCEPTS, *ENTITY_CONCEPTS.values(), *ACTION_CONCEPTS, *ACTION_CONCEPTS.values()]:
        words.extend(name.split())
    words += PROMPT_TEMPLATE_WORDS + PROMPT_WORDS + DIGITS + FILLER_WORDS
    return list(dict.fromkeys(words))
