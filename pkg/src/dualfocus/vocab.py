"""Word-level vocabulary shared by captions and attribute prompts."""

from __future__ import annotations

from dataclasses import dataclass, field

__all__ = ["Vocabulary", "SOS", "EOS", "MASK"]

SOS = "<sos>"
EOS = "<eos>"
MASK = "<mask>"

_SPECIALS = (SOS, EOS, MASK)


@dataclass(frozen=True)
class Vocabulary:
    """Immutable word -> id map; specials occupy the first three ids."""

    words: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.words[:3]) != _SPECIALS:
            raise ValueError("vocabulary must start with <sos>, <eos>, <mask>")
        if len(set(self.words)) != len(self.words):
            raise ValueError("duplicate words in vocabulary")
        object.__setattr__(self, "index", {w: i for i, w in enumerate(self.words)})

    @classmethod
    def from_words(cls, words) -> "Vocabulary":
        """Build from content words; specials are prepended automatically."""
        content = sorted(set(words) - set(_SPECIALS))
        return cls(tuple(_SPECIALS) + tuple(content))

    def __len__(self) -> int:
        return len(self.words)

    @property
    def sos_id(self) -> int:
        return 0

    @property
    def eos_id(self) -> int:
        return 1

    @property
    def mask_id(self) -> int:
        return 2

    def encode(self, tokens: list[str]) -> list[int]:
        """Words to ids; unknown words raise naming the offender."""
        try:
            return [self.index[w] for w in tokens]
        except KeyError as exc:
            raise KeyError(f"word {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids: list[int]) -> list[str]:
        return [self.words[i] for i in ids]
