"""Prompt token bookkeeping: words, per-token source tags, embeddings."""

from __future__ import annotations

import dataclasses

import torch

from ..errors import InputError

TAG_OBJECT = "object"
TAG_FORE_COND = "fore_cond"
TAG_BACK_COND = "back_cond"
TAG_FILLER = "filler"
TAG_NULL = "null"
TAGS = (TAG_OBJECT, TAG_FORE_COND, TAG_BACK_COND, TAG_FILLER, TAG_NULL)
CONDITION_TAGS = (TAG_FORE_COND, TAG_BACK_COND)


@dataclasses.dataclass
class PromptTokens:
    """A tokenized prompt with per-token source tags.

    Object tokens must precede condition tokens: the environment text goes
    at the end of the prompt, where a causally-masked text encoder lets it
    see the object words.
    """

    words: list[str]
    tags: list[str]
    token_ids: list[int]
    embeddings: torch.Tensor  # (n_tokens, dim)

    def __post_init__(self):
        n = len(self.words)
        if not (len(self.tags) == len(self.token_ids) == n):
            raise InputError("words, tags, and token_ids must align")
        if self.embeddings.shape[0] != n:
            raise InputError(
                f"embedding rows {self.embeddings.shape[0]} != {n} tokens")
        for tag in self.tags:
            if tag not in TAGS:
                raise InputError(f"unknown token tag {tag!r}")
        cond_positions = [i for i, t in enumerate(self.tags)
                          if t in CONDITION_TAGS]
        object_positions = [i for i, t in enumerate(self.tags)
                            if t == TAG_OBJECT]
        if cond_positions and object_positions:
            if max(object_positions) > min(cond_positions):
                raise InputError(
                    "object tokens must precede condition tokens")

    def positions(self, tag: str) -> list[int]:
        return [i for i, t in enumerate(self.tags) if t == tag]

    def condition_positions(self) -> list[int]:
        return [i for i, t in enumerate(self.tags) if t in CONDITION_TAGS]

    def with_embeddings(self, embeddings: torch.Tensor) -> "PromptTokens":
        """Copy with a replaced embedding matrix (same words/tags)."""
        return PromptTokens(list(self.words), list(self.tags),
                            list(self.token_ids), embeddings)

    def replace_condition_embedding(self, embedding: torch.Tensor
                                    ) -> "PromptTokens":
        """Copy with every condition-tagged row swapped for `embedding`.

        Used by the edit pass: the foreground's condition slots all receive
        the fused background embedding.
        """
        positions = self.condition_positions()
        if not positions:
            from ..errors import NoConditionTokens

            raise NoConditionTokens("prompt has no condition tokens to swap")
        new = self.embeddings.detach().clone()
        for p in positions:
            new[p] = embedding
        return self.with_embeddings(new)


def make_prompt(backend, object_words: list[str], condition_words: list[str],
                condition_tag: str = TAG_FORE_COND) -> PromptTokens:
    """Assemble '<object> <condition>' prompt tokens on a backend."""
    if condition_tag not in CONDITION_TAGS:
        raise InputError(f"condition_tag must be one of {CONDITION_TAGS}")
    words = list(object_words) + list(condition_words)
    tags = [TAG_OBJECT] * len(object_words) + [condition_tag] * len(condition_words)
    if not words:
        raise InputError("prompt needs at least one word")
    return backend.embed_text(words, tags)
