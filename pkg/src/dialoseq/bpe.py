"""Lower-cased byte-pair-encoding tokenizer.

Words are split on whitespace after lowercasing; the end-of-word marker
"</w>" is appended to the final character symbol of each word so decoding is
lossless over the learned alphabet. Merges are greedy on pair frequency with
lexicographic tie-breaking, which makes learning deterministic and gives the
prefix property: learning k+1 merges extends the merge list of learning k.

Seven special tokens occupy ids [0, 7) and never collide with learned ones.
"""

from __future__ import annotations

import hashlib
from collections import Counter

from .errors import DataError

EOW = "</w>"

# (name, literal) in id order; ids 0..6
SPECIALS = (
    ("pad", "<pad>"),
    ("start", "<bos>"),
    ("end", "<eos>"),
    ("unk", "<unk>"),
    ("sep_persona", "<persona>"),
    ("sep_knowledge", "<knowledge>"),
    ("sep_turn", "<turn>"),
)
N_SPECIALS = len(SPECIALS)

_FORMAT_LINE = "dialoseq-vocab v1"


def normalize(text: str) -> str:
    """Lowercase and collapse all whitespace runs to single spaces."""
    return " ".join(text.lower().split())


def _word_symbols(word: str) -> tuple[str, ...]:
    return tuple(word[:-1]) + (word[-1] + EOW,)


class Vocabulary:
    def __init__(self, merges: list[tuple[str, str]], tokens: list[str]):
        self.merges = list(merges)
        self.id_to_token = list(tokens)
        self.token_to_id = {tok: i for i, tok in enumerate(tokens)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise DataError("vocabulary contains duplicate tokens")
        self.specials = {name: i for i, (name, _) in enumerate(SPECIALS)}
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}
        self._word_cache: dict[str, list[int]] = {}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Vocabulary)
            and self.merges == other.merges
            and self.id_to_token == other.id_to_token
        )

    @property
    def pad_id(self) -> int:
        return self.specials["pad"]

    @property
    def start_id(self) -> int:
        return self.specials["start"]

    @property
    def end_id(self) -> int:
        return self.specials["end"]

    @property
    def unk_id(self) -> int:
        return self.specials["unk"]

    def encode(self, text: str) -> list[int]:
        return encode(text, self)

    def decode(self, ids) -> str:
        return decode(ids, self)

    def content_hash(self) -> str:
        return hashlib.sha256(dumps(self).encode("utf-8")).hexdigest()


def learn(corpus, num_merges: int) -> Vocabulary:
    """Greedy BPE over lowercased, whitespace-normalized lines.

    Stops early when no adjacent pair remains; otherwise performs exactly
    num_merges merges. Ties on pair frequency break lexicographically.
    """
    if num_merges < 0:
        raise DataError(f"num_merges must be >= 0, got {num_merges}")
    word_freq: Counter[str] = Counter()
    for line in corpus:
        for word in normalize(line).split(" "):
            if word:
                word_freq[word] += 1
    if not word_freq:
        raise DataError("cannot learn a vocabulary from an empty corpus")

    words = {w: list(_word_symbols(w)) for w in word_freq}
    # both plain and word-final forms of every character, so any string over
    # the corpus alphabet roundtrips regardless of character position
    chars = {c for w in word_freq for c in w}
    base = sorted(chars | {c + EOW for c in chars})

    merges: list[tuple[str, str]] = []
    merged_tokens: list[str] = []
    for _ in range(num_merges):
        pair_counts: Counter[tuple[str, str]] = Counter()
        for w, syms in words.items():
            f = word_freq[w]
            for i in range(len(syms) - 1):
                pair_counts[(syms[i], syms[i + 1])] += f
        if not pair_counts:
            break
        best = min(pair_counts, key=lambda p: (-pair_counts[p], p))
        merges.append(best)
        merged_tokens.append(best[0] + best[1])
        a, b = best
        for syms in words.values():
            i = 0
            while i < len(syms) - 1:
                if syms[i] == a and syms[i + 1] == b:
                    syms[i : i + 2] = [a + b]
                else:
                    i += 1

    tokens = [lit for _, lit in SPECIALS] + base + merged_tokens
    return Vocabulary(merges, tokens)


def _apply_merges(symbols: list[str], ranks: dict) -> list[str]:
    while len(symbols) > 1:
        best_rank = None
        best_i = -1
        for i in range(len(symbols) - 1):
            r = ranks.get((symbols[i], symbols[i + 1]))
            if r is not None and (best_rank is None or r < best_rank):
                best_rank, best_i = r, i
        if best_rank is None:
            break
        symbols[best_i : best_i + 2] = [symbols[best_i] + symbols[best_i + 1]]
    return symbols


def encode(text: str, vocab: Vocabulary) -> list[int]:
    """Deterministic tokenization; unknown characters become the unk id."""
    ids: list[int] = []
    for word in normalize(text).split(" "):
        if not word:
            continue
        cached = vocab._word_cache.get(word)
        if cached is None:
            syms = _apply_merges(list(_word_symbols(word)), vocab._ranks)
            cached = [vocab.token_to_id.get(s, vocab.unk_id) for s in syms]
            vocab._word_cache[word] = cached
        ids.extend(cached)
    return ids


def decode(ids, vocab: Vocabulary) -> str:
    """Inverse of encode over the learned alphabet; specials are dropped."""
    pieces = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(vocab.id_to_token):
            raise DataError(f"token id {i} outside vocabulary of size {len(vocab)}")
        if i < N_SPECIALS:
            continue
        pieces.append(vocab.id_to_token[i])
    return "".join(pieces).replace(EOW, " ").strip()


# ------------------------------------------------------------- file format


def dumps(vocab: Vocabulary) -> str:
    lines = [
        _FORMAT_LINE,
        f"merges {len(vocab.merges)}",
        f"tokens {len(vocab.id_to_token)}",
    ]
    lines.extend(f"{a} {b}" for a, b in vocab.merges)
    lines.extend(vocab.id_to_token)
    return "\n".join(lines) + "\n"


def loads(text: str) -> Vocabulary:
    lines = text.splitlines()
    if not lines or lines[0] != _FORMAT_LINE:
        raise DataError("not a dialoseq vocabulary file (bad or missing header)")
    try:
        n_merges = int(lines[1].split(" ")[1])
        n_tokens = int(lines[2].split(" ")[1])
        merge_lines = lines[3 : 3 + n_merges]
        token_lines = lines[3 + n_merges : 3 + n_merges + n_tokens]
        if len(merge_lines) != n_merges or len(token_lines) != n_tokens:
            raise IndexError
        merges = []
        for ln in merge_lines:
            a, b = ln.split(" ")
            merges.append((a, b))
    except (IndexError, ValueError) as e:
        raise DataError(f"malformed vocabulary file: {e}") from e
    expected = [lit for _, lit in SPECIALS]
    if token_lines[:N_SPECIALS] != expected:
        raise DataError("vocabulary file does not reserve the special-token ids")
    return Vocabulary(merges, token_lines)


def save_vocab(vocab: Vocabulary, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps(vocab))


def load_vocab(path) -> Vocabulary:
    with open(path, encoding="utf-8") as f:
        return loads(f.read())
