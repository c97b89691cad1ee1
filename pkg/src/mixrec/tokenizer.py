"""Word-level tokenizer with reserved answer/placeholder tokens and byte fallback."""

from __future__ import annotations

import re
from collections import Counter
from pathlib import Path
from typing import Iterable

PAD, BOS, EOS, FEAT, USER, WORD = "<pad>", "<bos>", "<eos>", "<feat>", "<user>", "<w>"
YES, NO = "yes", "no"
RESERVED = (PAD, BOS, EOS, FEAT, USER, WORD, YES, NO)
BYTES = tuple(f"<0x{b:02x}>" for b in range(256))

_PIECE = re.compile(r"〈(FEAT|USER):(\d+)〉|[^\W_]+|\S")
_NO_SPACE_BEFORE = set(".,:;!?)'")
_NO_SPACE_AFTER = set("(#'")


class Tokenizer:
    """Lowercased word-level vocabulary.

    Placeholders ``〈FEAT:n〉``/``〈USER:n〉`` become the reserved ``<feat>``/``<user>``
    ids; :meth:`encode_with_slots` also reports which key sits at each slot.
    Out-of-vocabulary words are spelled as ``<w>`` followed by byte tokens.
    """

    def __init__(self, words: Iterable[str] = ()):
        self.vocab: list[str] = list(RESERVED) + list(BYTES)
        for w in words:
            if w not in RESERVED and w not in BYTES:
                self.vocab.append(w)
        self.index = {w: i for i, w in enumerate(self.vocab)}
        if len(self.index) != len(self.vocab):
            raise ValueError("duplicate vocabulary entries")
        self.pad_id, self.bos_id, self.eos_id = self.index[PAD], self.index[BOS], self.index[EOS]
        self.feat_id, self.user_id, self.word_id = self.index[FEAT], self.index[USER], self.index[WORD]
        self.yes_id, self.no_id = self.index[YES], self.index[NO]
        self._byte0 = self.index[BYTES[0]]

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int = 4096) -> "Tokenizer":
        counts: Counter[str] = Counter()
        for t in texts:
            for m in _PIECE.finditer(t):
                if m.group(1) is None:
                    counts[m.group(0).lower()] += 1
        budget = max(0, max_size - len(RESERVED) - len(BYTES))
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls(w for w, _ in ranked[:budget])

    def __len__(self) -> int:
        return len(self.vocab)

    def encode_with_slots(self, text: str) -> tuple[list[int], list[tuple[int, str]]]:
        ids: list[int] = []
        slots: list[tuple[int, str]] = []
        for m in _PIECE.finditer(text):
            if m.group(1) is not None:
                slots.append((len(ids), f"{m.group(1)}:{m.group(2)}"))
                ids.append(self.feat_id if m.group(1) == "FEAT" else self.user_id)
                continue
            w = m.group(0).lower()
            if w in self.index and w not in RESERVED[:6] and w not in BYTES:
                ids.append(self.index[w])
            else:
                ids.append(self.word_id)
                ids.extend(self._byte0 + b for b in w.encode("utf-8"))
        return ids, slots

    def encode(self, text: str) -> list[int]:
        return self.encode_with_slots(text)[0]

    def decode(self, ids: Iterable[int]) -> str:
        words: list[str] = []
        pending: bytearray | None = None
        for i in ids:
            tok = self.vocab[i]
            if self._byte0 <= i < self._byte0 + 256:
                if pending is None:
                    pending = bytearray()
                pending.append(i - self._byte0)
                continue
            if pending is not None:
                words.append(pending.decode("utf-8", errors="replace"))
                pending = None
            if tok in (PAD, BOS, EOS, WORD):
                if tok == WORD:
                    pending = bytearray()
                continue
            words.append({FEAT: "〈FEAT〉", USER: "〈USER〉"}.get(tok, tok))
        if pending is not None:
            words.append(pending.decode("utf-8", errors="replace"))
        return _join(words)

    def save(self, path: str | Path) -> None:
        extra = self.vocab[len(RESERVED) + len(BYTES):]
        Path(path).write_text("\n".join(extra) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Tokenizer":
        return cls(w for w in Path(path).read_text(encoding="utf-8").splitlines() if w)


def _join(words: list[str]) -> str:
    out = ""
    for w in words:
        if out and not (w in _NO_SPACE_BEFORE or out[-1] in _NO_SPACE_AFTER):
            out += " "
        out += w
    return out
