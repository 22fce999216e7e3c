"""Synthetic desk-scale languages and NLI data.

Every language shares one grammar: noun and verb classes with selectional
agreement (a noun of group g takes verbs of group g). Languages differ only
in their lexicon, so a model pretrained on one has reusable structure for
another once it learns the new surface forms. ``script="hangul"`` spells
words with Hangul syllables, bytes a Latin-script model never saw.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .evaluation import NLIExample, PromptTemplate, write_nli_tsv
from .tokenizer import BpeVocab, encode_corpus, train_bpe

N_GROUPS = 4
CLASSES = {"det": 3, "adj": 8, "noun": 5 * N_GROUPS, "verb": 4 * N_GROUPS, "conj": 2, "neg": 1, "right": 1,
           "yes": 1, "no": 1, "also": 1}

_LATIN_ONSETS = "bdfgklmnprstvz"
_LATIN_VOWELS = "aeiou"


@dataclass
class SyntheticLanguage:
    name: str
    lexicon: dict[str, list[str]]

    def word(self, cls: str, i: int = 0) -> str:
        return self.lexicon[cls][i]

    def template(self) -> PromptTemplate:
        return PromptTemplate(
            f"[premise], {self.word('right')}? [MASK], [hypothesis]",
            {
                "entailment": self.word("yes"),
                "contradiction": self.word("no"),
                "neutral": self.word("also"),
            },
        )


def _latin_word(rng: np.random.Generator, n_syl: int) -> str:
    return "".join(rng.choice(list(_LATIN_ONSETS)) + rng.choice(list(_LATIN_VOWELS)) for _ in range(n_syl))


def _hangul_word(rng: np.random.Generator, n_syl: int) -> str:
    # syllables from a fixed 48-syllable inventory keep the byte alphabet small
    inventory = [chr(0xAC00 + 28 * k) for k in range(0, 48 * 7, 7)]
    return "".join(rng.choice(inventory) for _ in range(n_syl))


def make_language(name: str, seed: int, script: str = "latin") -> SyntheticLanguage:
    rng = np.random.default_rng(seed)
    maker = _latin_word if script == "latin" else _hangul_word
    used: set[str] = set()
    lexicon = {}
    for cls, n in CLASSES.items():
        words = []
        while len(words) < n:
            w = maker(rng, int(rng.integers(1, 4)) if script == "latin" else int(rng.integers(1, 3)))
            if w not in used:
                used.add(w)
                words.append(w)
        lexicon[cls] = words
    return SyntheticLanguage(name, lexicon)


def _clause(lang: SyntheticLanguage, rng: np.random.Generator, negate: bool = False) -> list[str]:
    g = int(rng.integers(N_GROUPS))
    per_noun = CLASSES["noun"] // N_GROUPS
    per_verb = CLASSES["verb"] // N_GROUPS
    out = [lang.word("det", int(rng.integers(CLASSES["det"])))]
    if rng.random() < 0.5:
        out.append(lang.word("adj", int(rng.integers(CLASSES["adj"]))))
    out.append(lang.word("noun", g * per_noun + int(rng.integers(per_noun))))
    if negate:
        out.append(lang.word("neg"))
    out.append(lang.word("verb", g * per_verb + int(rng.integers(per_verb))))
    out.append(lang.word("det", int(rng.integers(CLASSES["det"]))))
    out.append(lang.word("noun", int(rng.integers(CLASSES["noun"]))))
    return out


def sentence(lang: SyntheticLanguage, rng: np.random.Generator) -> str:
    words = _clause(lang, rng)
    if rng.random() < 0.3:
        words.append(lang.word("conj", int(rng.integers(CLASSES["conj"]))))
        words += _clause(lang, rng)
    return " ".join(words) + "."


def corpus(lang: SyntheticLanguage, n_sentences: int, seed: int) -> list[str]:
    """Corpus lines, each terminated by a newline."""
    rng = np.random.default_rng(seed)
    return [sentence(lang, rng) + "\n" for _ in range(n_sentences)]


def nli_dataset(lang: SyntheticLanguage, n: int, seed: int) -> list[NLIExample]:
    """Balanced NLI pairs: the hypothesis repeats a premise clause
    (entailment), repeats it negated (contradiction) or is unrelated (neutral)."""
    rng = np.random.default_rng(seed)
    labels = ["entailment", "contradiction", "neutral"]
    out = []
    for i in range(n):
        label = labels[i % 3]
        state = rng.bit_generator.state
        c1 = _clause(lang, rng)
        c2 = _clause(lang, rng)
        premise = " ".join(c1 + [lang.word("conj", 0)] + c2) + "."
        if label == "entailment":
            hyp = c1
        elif label == "contradiction":
            rng.bit_generator.state = state
            hyp = _clause(lang, rng, negate=True)
            _clause(lang, rng)
        else:
            hyp = _clause(lang, rng)
        out.append(NLIExample(premise, " ".join(hyp) + ".", label))
    order = rng.permutation(n)
    return [out[i] for i in order]


@dataclass
class DeskSuite:
    """Language A (Latin script, pretraining) and language B (Hangul, target)
    with byte-level vocabularies, token streams and NLI splits."""

    lang_a: SyntheticLanguage
    lang_b: SyntheticLanguage
    text_a: list[str]
    text_b: list[str]
    heldout_b: list[str]
    vocab_a: BpeVocab
    vocab_b: BpeVocab
    train_a: list[NLIExample]
    train_b: list[NLIExample]
    test_b: list[NLIExample]

    @property
    def ids_a(self) -> np.ndarray:
        return np.array(encode_corpus(self.vocab_a, self.text_a), dtype=np.int64)

    @property
    def ids_b(self) -> np.ndarray:
        return np.array(encode_corpus(self.vocab_b, self.text_b), dtype=np.int64)

    def write(self, root) -> dict[str, Path]:
        """Files for the CLI and config-driven runs."""
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        paths = {k: root / k for k in ("a.txt", "b.txt", "heldout_b.txt", "a.bpe", "b.bpe", "a_train.tsv",
                                       "b_train.tsv", "b_test.tsv", "b_template.txt")}
        paths["a.txt"].write_text("".join(self.text_a), encoding="utf-8")
        paths["b.txt"].write_text("".join(self.text_b), encoding="utf-8")
        paths["heldout_b.txt"].write_text("".join(self.heldout_b), encoding="utf-8")
        self.vocab_a.save(paths["a.bpe"])
        self.vocab_b.save(paths["b.bpe"])
        write_nli_tsv(paths["a_train.tsv"], self.train_a)
        write_nli_tsv(paths["b_train.tsv"], self.train_b)
        write_nli_tsv(paths["b_test.tsv"], self.test_b)
        paths["b_template.txt"].write_text(self.lang_b.template().to_text(), encoding="utf-8")
        return paths


def desk_suite(vocab_size: int = 512, n_train: int = 900, n_test: int = 300) -> DeskSuite:
    a = make_language("A", 1, "latin")
    b = make_language("B", 2, "hangul")
    text_a = corpus(a, 6000, 10)
    text_b = corpus(b, 3000, 11)
    return DeskSuite(
        lang_a=a,
        lang_b=b,
        text_a=text_a,
        text_b=text_b,
        heldout_b=corpus(b, 300, 12),
        vocab_a=train_bpe(text_a, vocab_size),
        vocab_b=train_bpe(text_b, vocab_size),
        train_a=nli_dataset(a, n_train, 22),
        train_b=nli_dataset(b, n_train, 20),
        test_b=nli_dataset(b, n_test, 21),
    )
