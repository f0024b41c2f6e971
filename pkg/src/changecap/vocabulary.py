"""Token vocabulary with fixed special ids shared by data and decoders."""

from __future__ import annotations

from dataclasses import dataclass, field

PAD = 0
BOS = 1
EOS = 2
UNK = 3

SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")


@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the four special tokens")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def from_words(cls, words) -> "Vocabulary":
        ordered = sorted(set(words) - set(SPECIAL_TOKENS))
        return cls(tokens=list(SPECIAL_TOKENS) + ordered)

    def __len__(self) -> int:
        return len(self.tokens)

    def encode_words(self, words) -> list[int]:
        return [self.index.get(w, UNK) for w in words]

    def decode_ids(self, ids) -> list[str]:
        """Words for the given ids, dropping pad/bos/eos markers."""
        out = []
        for i in ids:
            if i in (PAD, BOS, EOS):
                continue
            out.append(self.tokens[i])
        return out
