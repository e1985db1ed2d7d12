"""
This Source Code Form is subject to the terms of the Mozilla Public
License, v. 2.0. If a copy of the MPL was not distributed with this
file, You can obtain one at http://mozilla.org/MPL/2.0/.
"""

from __future__ import annotations

import re
from typing import Iterable, NamedTuple, Sequence

import torch

from .errors import EmptySequenceError, ShapeMismatchError


__all__ = ('TextBatch', 'Tokenizer', 'PAD', 'UNK')

PAD = '<pad>'
UNK = '<unk>'

_word_regex = re.compile(r"[a-z0-9]+(?:'[a-z]+)?")


def split_words(text: str) -> list[str]:
    return _word_regex.findall(text.casefold())


class TextBatch(NamedTuple):
    token_ids: torch.Tensor
    lengths: torch.Tensor

    def validate(self, vocab_size: int) -> None:
        if self.token_ids.ndim != 2:
            raise ShapeMismatchError(f'token_ids must be [B, L], got {tuple(self.token_ids.shape)}')
        if self.lengths.shape != (self.token_ids.shape[0],):
            raise ShapeMismatchError('lengths must have one entry per row of token_ids')
        if self.token_ids.shape[0] == 0:
            raise EmptySequenceError('Text batch is empty.')
        if int(self.lengths.min()) < 1:
            raise EmptySequenceError('Every prompt needs at least one token.')
        if int(self.lengths.max()) > self.token_ids.shape[1]:
            raise ShapeMismatchError('A length exceeds the padded sequence width.')
        if int(self.token_ids.min()) < 0 or int(self.token_ids.max()) >= vocab_size:
            raise ShapeMismatchError('Token id outside of the vocabulary.')


class Tokenizer:
    """Whitespace tokenizer over a fixed vocabulary.

    Words are case-folded runs of letters and digits. Anything outside the
    vocabulary maps to ``<unk>``; sequences longer than ``max_length`` are cut.
    """

    __slots__ = ('vocab', 'max_length', '_index')

    def __init__(self, vocab: Sequence[str], *, max_length: int = 16) -> None:
        if list(vocab[:2]) != [PAD, UNK]:
            raise ValueError('Vocabulary must start with the padding and unknown tokens.')
        self.vocab: list[str] = list(vocab)
        self.max_length: int = max_length
        self._index: dict[str, int] = {word: i for i, word in enumerate(self.vocab)}

    @classmethod
    def from_corpus(cls, texts: Iterable[str], *, max_length: int = 16) -> Tokenizer:
        words: set[str] = set()
        for text in texts:
            words.update(split_words(text))
        return cls([PAD, UNK, *sorted(words)], max_length=max_length)

    def __len__(self) -> int:
        return len(self.vocab)

    def __repr__(self) -> str:
        return f'<Tokenizer vocab={len(self.vocab)} max_length={self.max_length}>'

    @property
    def unk_id(self) -> int:
        return 1

    def tokenize(self, text: str) -> list[int]:
        words = split_words(text)[: self.max_length]
        return [self._index.get(word, 1) for word in words]

    def encode(self, texts: Sequence[str]) -> TextBatch:
        if not texts:
            raise EmptySequenceError('No texts to encode.')
        rows = [self.tokenize(text) for text in texts]
        for text, row in zip(texts, rows):
            if not row:
                raise EmptySequenceError(f'Prompt {text!r} has no tokens.')
        width = max(len(row) for row in rows)
        token_ids = torch.zeros((len(rows), width), dtype=torch.long)
        for i, row in enumerate(rows):
            token_ids[i, : len(row)] = torch.tensor(row, dtype=torch.long)
        lengths = torch.tensor([len(row) for row in rows], dtype=torch.long)
        return TextBatch(token_ids, lengths)
