"""Character-level tokenizer over a fixed alphabet."""

from __future__ import annotations

import string

from .templates import HINT_MARKER

PAD, BOS, EOS, HINT = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", HINT_MARKER)

ALPHABET = (
    " "
    + string.ascii_lowercase
    + string.ascii_uppercase
    + string.digits
    + ".,?!:;'\"-()[]/\n"
)


class UnknownCharacterError(ValueError):
    def __init__(self, char: str, position: int):
        super().__init__(f"unknown character {char!r} (U+{ord(char):04X}) at position {position}")
        self.char = char
        self.position = position


class Tokenizer:
    def __init__(self, alphabet: str = ALPHABET):
        if len(set(alphabet)) != len(alphabet):
            raise ValueError("alphabet has repeated characters")
        self.alphabet = alphabet
        self._ids = {c: i + len(RESERVED) for i, c in enumerate(alphabet)}

    @property
    def vocab_size(self) -> int:
        return len(RESERVED) + len(self.alphabet)

    def encode(self, s: str) -> list[int]:
        """The hint marker becomes a single HINT id; every other char maps 1:1."""
        ids: list[int] = []
        i = 0
        while i < len(s):
            if s.startswith(HINT_MARKER, i):
                ids.append(HINT)
                i += len(HINT_MARKER)
                continue
            c = s[i]
            try:
                ids.append(self._ids[c])
            except KeyError:
                raise UnknownCharacterError(c, i) from None
            i += 1
        return ids

    def decode(self, ids) -> str:
        out = []
        for t in ids:
            t = int(t)
            if t == HINT:
                out.append(HINT_MARKER)
            elif t < len(RESERVED):
                continue
            else:
                out.append(self.alphabet[t - len(RESERVED)])
        return "".join(out)

    def unknown_chars(self, s: str) -> set[str]:
        return {c for c in s.replace(HINT_MARKER, "") if c not in self._ids}
