import re
import string
from typing import Iterable, List, Sequence

from fabgpt.core.errors import ConfigurationError

PAD, BOS, EOS, SEP, UNK = "<pad>", "<bos>", "<eos>", "<sep>", "<unk>"
SPECIALS = (PAD, BOS, EOS, SEP, UNK)
PAD_ID, BOS_ID, EOS_ID, SEP_ID, UNK_ID = range(len(SPECIALS))

# words, single digits, single punctuation marks
TOKEN_RE = re.compile(r"[a-z]+|[0-9]|[^\sa-z0-9]")
_NO_SPACE_BEFORE = set(".,?!;:)'")


def tokenize(text: str) -> List[str]:
    return TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Word-level vocabulary. Ids: specials, digits, ASCII punctuation, then sorted words."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:len(SPECIALS)]) != SPECIALS:
            raise ConfigurationError("vocabulary must start with the special tokens")
        self.tokens: List[str] = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ConfigurationError("vocabulary has duplicate tokens")

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int = 1024) -> "Vocabulary":
        fixed = list(SPECIALS) + list(string.digits) + list(string.punctuation)
        words = set()
        for t in texts:
            words.update(w for w in tokenize(t) if w not in fixed)
        tokens = fixed + sorted(words)
        if len(tokens) > max_size:
            raise ConfigurationError(f"vocabulary needs {len(tokens)} entries, limit is {max_size}")
        return cls(tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str, *, bos: bool = False, eos: bool = False) -> List[int]:
        ids = [self.index.get(t, UNK_ID) for t in tokenize(text)]
        return ([BOS_ID] if bos else []) + ids + ([EOS_ID] if eos else [])

    def decode(self, ids: Iterable[int]) -> str:
        out = ""
        prev = ""
        for i in ids:
            i = int(i)
            if i == EOS_ID:
                break
            if i < len(SPECIALS) or i >= len(self.tokens):
                continue
            tok = self.tokens[i]
            glue = (not out or tok in _NO_SPACE_BEFORE or tok == "-" or prev == "-"
                    or (tok.isdigit() and prev.isdigit()))
            out += tok if glue else " " + tok
            prev = tok
        return out

    def pad(self, ids: Sequence[int], length: int) -> List[int]:
        ids = list(ids)[:length]
        return ids + [PAD_ID] * (length - len(ids))
