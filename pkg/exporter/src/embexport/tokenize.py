"""Offset-tracking WordPiece tokenization.

With a pretrained checkpoint directory the real tokenizer is used.  Without
one (offline), a deterministic character-coverage WordPiece vocabulary is
built so any ASCII text tokenizes without information loss; offsets always
point into the original (un-normalized) text in Unicode codepoints.
"""

import string

from tokenizers import Tokenizer, models, normalizers, pre_tokenizers

SPECIALS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]


def fallback_vocab():
    """Deterministic vocabulary: specials, printable non-space characters as
    word starts, and their ## continuations."""
    vocab = {}
    for tok in SPECIALS:
        vocab[tok] = len(vocab)
    chars = [c for c in string.printable if not c.isspace()]
    for c in chars:
        vocab[c] = len(vocab)
    for c in chars:
        vocab["##" + c] = len(vocab)
    return vocab


def build_fallback_tokenizer():
    tok = Tokenizer(models.WordPiece(fallback_vocab(), unk_token="[UNK]",
                                     max_input_chars_per_word=200))
    tok.normalizer = normalizers.Lowercase()
    tok.pre_tokenizer = pre_tokenizers.Whitespace()
    return tok


class OffsetTokenizer:
    """Uniform interface: encode(text) -> (ids, tokens, offsets), with
    offsets into the original text and no special tokens included."""

    def __init__(self, tokenizer):
        self._tok = tokenizer
        self.cls_id = tokenizer.token_to_id("[CLS]")
        self.sep_id = tokenizer.token_to_id("[SEP]")
        self.vocab_size = tokenizer.get_vocab_size()

    def encode(self, text):
        enc = self._tok.encode(text, add_special_tokens=False)
        return list(enc.ids), list(enc.tokens), [tuple(o) for o in enc.offsets]


def load_tokenizer(weights_dir=None):
    if weights_dir is not None:
        from transformers import AutoTokenizer
        fast = AutoTokenizer.from_pretrained(weights_dir, use_fast=True)
        return OffsetTokenizer(fast.backend_tokenizer)
    return OffsetTokenizer(build_fallback_tokenizer())
