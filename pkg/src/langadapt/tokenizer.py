"""Byte-level BPE: training, encoding, decoding and the ``bpe-v1`` vocab file."""

from __future__ import annotations

import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import ConfigurationError, ContractError, FormatError

PAD = "<pad>"
_GPT2_SPLIT = re.compile(rb" ?[^\s]+|\s+")


@dataclass(frozen=True)
class BpeVocab:
    merges: tuple[tuple[int, int], ...] = ()
    specials: tuple[str, ...] = ()
    _ranks: dict = field(default=None, init=False, repr=False, compare=False)
    _bytes: tuple = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        table: list[bytes] = [bytes([i]) for i in range(256)]
        ranks = {}
        for rank, (a, b) in enumerate(self.merges):
            new = 256 + rank
            if not (0 <= a < new and 0 <= b < new):
                raise FormatError(f"merge {rank} references undefined id ({a}, {b})")
            if (a, b) in ranks:
                raise FormatError(f"duplicate merge ({a}, {b})")
            ranks[(a, b)] = rank
            table.append(table[a] + table[b])
        object.__setattr__(self, "_ranks", ranks)
        object.__setattr__(self, "_bytes", tuple(table))

    @property
    def vocab_size(self) -> int:
        return 256 + len(self.merges) + len(self.specials)

    @property
    def n_tokens(self) -> int:
        """Ids below this are byte/merge tokens; the rest are specials."""
        return 256 + len(self.merges)

    def special_id(self, name: str) -> int:
        try:
            return self.n_tokens + self.specials.index(name)
        except ValueError:
            raise ContractError(f"vocab has no special {name!r}") from None

    @property
    def pad_id(self) -> int:
        return self.special_id(PAD)

    def token_bytes(self, idx: int) -> bytes:
        return self._bytes[idx]

    # -- application -------------------------------------------------------

    def encode(self, text: bytes | str) -> list[int]:
        if isinstance(text, str):
            text = text.encode("utf-8")
        ids = list(text)
        ranks = self._ranks
        while len(ids) > 1:
            best = None
            for pair in zip(ids, ids[1:]):
                r = ranks.get(pair)
                if r is not None and (best is None or r < best):
                    best = r
            if best is None:
                break
            ids = _merge(ids, self.merges[best], 256 + best)
        return ids

    def decode(self, ids: Iterable[int], allow_specials: bool = False) -> bytes:
        out = []
        n = self.n_tokens
        for i in ids:
            i = int(i)
            if i < 0 or i >= self.vocab_size:
                raise ContractError(f"token id {i} out of range [0, {self.vocab_size})")
            if i >= n:
                if not allow_specials:
                    raise ContractError(f"special id {i} in decode input")
                out.append(self.specials[i - n].encode("utf-8"))
            else:
                out.append(self._bytes[i])
        return b"".join(out)

    # -- serialisation -----------------------------------------------------

    def to_text(self) -> str:
        lines = [f"bpe-v1 {self.vocab_size} {len(self.specials)}"]
        lines += [f"{a} {b}" for a, b in self.merges]
        lines.append("#specials")
        lines += list(self.specials)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "BpeVocab":
        lines = text.splitlines()
        if not lines:
            raise FormatError("empty vocab file")
        head = lines[0].split()
        if len(head) != 3 or head[0] != "bpe-v1":
            raise FormatError(f"bad vocab header {lines[0]!r}")
        vocab_size, n_specials = int(head[1]), int(head[2])
        try:
            sep = lines.index("#specials")
        except ValueError:
            raise FormatError("vocab file lacks '#specials' line") from None
        merges = []
        for ln in lines[1:sep]:
            parts = ln.split()
            if len(parts) != 2:
                raise FormatError(f"bad merge line {ln!r}")
            merges.append((int(parts[0]), int(parts[1])))
        specials = tuple(lines[sep + 1 :])
        vocab = cls(tuple(merges), specials)
        if len(specials) != n_specials or vocab.vocab_size != vocab_size:
            raise FormatError(
                f"header says vocab_size={vocab_size} n_specials={n_specials}, "
                f"body gives {vocab.vocab_size} / {len(specials)}"
            )
        return vocab

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "BpeVocab":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _merge(ids: list[int], pair: tuple[int, int], new: int) -> list[int]:
    a, b = pair
    out = []
    i, n = 0, len(ids)
    while i < n:
        if i + 1 < n and ids[i] == a and ids[i + 1] == b:
            out.append(new)
            i += 2
        else:
            out.append(ids[i])
            i += 1
    return out


def train_bpe(
    corpus: Iterable[bytes | str],
    target_vocab: int,
    specials: Iterable[str] = (),
    pretokenize: bool = False,
) -> BpeVocab:
    """Greedy BPE over a byte stream.

    Each step merges the most frequent adjacent pair (ties go to the smallest
    ``(left_id, right_id)``); training stops early once no pair occurs twice.
    With ``pretokenize`` each item is split GPT-2 style on whitespace first,
    which only changes which pairs get counted.
    """
    specials = tuple(specials)
    if target_vocab < 256 + len(specials):
        raise ConfigurationError(
            f"target_vocab {target_vocab} < 256 + {len(specials)} specials"
        )
    words: Counter[tuple[int, ...]] = Counter()
    n_items = 0
    for item in corpus:
        n_items += 1
        if isinstance(item, str):
            item = item.encode("utf-8")
        chunks = _GPT2_SPLIT.findall(item) if pretokenize else [item]
        for chunk in chunks:
            if chunk:
                words[tuple(chunk)] += 1
    if n_items == 0:
        raise ConfigurationError("empty training corpus")

    seqs = [list(w) for w in words]
    freqs = list(words.values())
    counts: Counter[tuple[int, int]] = Counter()
    where: dict[tuple[int, int], set[int]] = defaultdict(set)
    for si, seq in enumerate(seqs):
        for pair in zip(seq, seq[1:]):
            counts[pair] += freqs[si]
            where[pair].add(si)

    merges: list[tuple[int, int]] = []
    budget = target_vocab - 256 - len(specials)
    while len(merges) < budget and counts:
        pair = max(counts, key=lambda p: (counts[p], -p[0], -p[1]))
        if counts[pair] < 2:
            break
        new = 256 + len(merges)
        merges.append(pair)
        for si in list(where[pair]):
            seq, f = seqs[si], freqs[si]
            for p in zip(seq, seq[1:]):
                counts[p] -= f
                if counts[p] <= 0:
                    del counts[p]
            seq = _merge(seq, pair, new)
            seqs[si] = seq
            for p in zip(seq, seq[1:]):
                counts[p] += f
                where[p].add(si)
        where.pop(pair, None)
        counts.pop(pair, None)
    return BpeVocab(tuple(merges), specials)


def encode(vocab: BpeVocab, text: bytes | str) -> list[int]:
    return vocab.encode(text)


def decode(vocab: BpeVocab, ids: Iterable[int], allow_specials: bool = False) -> bytes:
    return vocab.decode(ids, allow_specials)


def encode_corpus(vocab: BpeVocab, lines: Iterable[bytes | str]) -> list[int]:
    """Encode line by line and concatenate; repeated lines hit a cache."""
    cache: dict[bytes | str, list[int]] = {}
    out: list[int] = []
    for ln in lines:
        ids = cache.get(ln)
        if ids is None:
            ids = cache[ln] = vocab.encode(ln)
        out.extend(ids)
    return out
