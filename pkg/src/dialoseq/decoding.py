"""Generation strategies: greedy, beam search with length bounds and n-gram
blocking, and nucleus sampling.

Scoring contract (shared with the oracle tests): while fewer than min_len
tokens have been generated the end-token LOGIT is masked to -inf before the
log-softmax (the remaining distribution renormalizes); n-gram blocking sets
the offending continuation's LOG-PROB to -inf after the log-softmax, without
renormalizing. Beam scores are cumulative log-probs with no length
normalization; finished hypotheses are frozen and compete by final score.
A hypothesis whose every continuation is blocked emits the end token
forcibly (contributing 0 to its score) so decoding always terminates.

Any model exposing encode(context_ids, image_feature=None) -> enc and
next_logits(prefix_ids, enc) -> (V,) array can be decoded.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import ConfigError

START_ID = 1
END_ID = 2

STRATEGIES = ("greedy", "beam", "nucleus")


@dataclass
class DecodeConfig:
    strategy: str = "beam"
    beam_size: int = 3
    min_len: int = 10
    max_len: int = 128
    block_ngram: int = 3  # 0 disables blocking
    nucleus_p: float = 0.9
    seed: int = 0

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got '{self.strategy}'")
        if self.beam_size < 1:
            raise ConfigError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.min_len < 0:
            raise ConfigError(f"min_len must be >= 0, got {self.min_len}")
        if self.max_len <= self.min_len:
            raise ConfigError(
                f"max_len ({self.max_len}) must exceed min_len ({self.min_len})"
            )
        if self.block_ngram != 0 and self.block_ngram < 2:
            raise ConfigError(f"block_ngram must be 0 or >= 2, got {self.block_ngram}")
        if not 0.0 < self.nucleus_p <= 1.0:
            raise ConfigError(f"nucleus_p must be in (0, 1], got {self.nucleus_p}")


@dataclass
class Hypothesis:
    ids: tuple
    logp: float
    finished: bool


def step_logprobs(model, enc, generated: list[int], min_len: int) -> np.ndarray:
    """Log-probabilities for the next token after `generated`."""
    logits = model.next_logits([START_ID] + list(generated), enc).astype(np.float64)
    if len(generated) < min_len:
        logits[END_ID] = -np.inf
    m = logits.max()
    return logits - (m + np.log(np.sum(np.exp(logits - m))))


def greedy(model, context_ids, config: DecodeConfig, image_feature=None) -> list[int]:
    """Argmax decoding; ties resolve to the lowest token id."""
    config.validate()
    enc = model.encode(context_ids, image_feature)
    out: list[int] = []
    while len(out) < config.max_len:
        lp = step_logprobs(model, enc, out, config.min_len)
        tok = int(np.argmax(lp))
        if tok == END_ID:
            break
        out.append(tok)
    return out


def beam(model, context_ids, config: DecodeConfig, image_feature=None) -> list[int]:
    """Best finished sequence by cumulative log-prob (no length normalization)."""
    config.validate()
    enc = model.encode(context_ids, image_feature)
    n = config.block_ngram
    live = [Hypothesis(ids=(), logp=0.0, finished=False)]
    blocked_map: dict[tuple, dict] = {(): {}}  # hyp ids -> {prefix: set(next)}
    finished: list[Hypothesis] = []

    for _ in range(config.max_len):
        candidates = []  # (score, parent_idx, token, ids, forced_end)
        for pi, hyp in enumerate(live):
            lp = step_logprobs(model, enc, list(hyp.ids), config.min_len)
            if n:
                prefix = hyp.ids[-(n - 1):] if n > 1 else ()
                for tok in blocked_map[hyp.ids].get(prefix, ()):
                    lp[tok] = -np.inf
            if not np.isfinite(lp).any():
                # every continuation blocked: force the end token at no cost
                candidates.append((hyp.logp, pi, END_ID, hyp.ids, True))
                continue
            for tok in np.flatnonzero(lp > -np.inf):
                candidates.append((hyp.logp + lp[tok], pi, int(tok), hyp.ids, False))
        if not candidates:
            break
        # ties: prefer earlier parent then lower token id, matching argmax
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        next_live = []
        next_blocked = {}
        for score, pi, tok, ids, forced in candidates:
            if len(next_live) >= config.beam_size:
                break
            if tok == END_ID:
                finished.append(Hypothesis(ids=ids, logp=score, finished=True))
                continue
            new_ids = ids + (tok,)
            grams = {p: set(s) for p, s in blocked_map[ids].items()}
            if n and len(new_ids) >= n:
                pre = new_ids[-n:-1]
                grams.setdefault(pre, set()).add(tok)
            next_blocked[new_ids] = grams
            next_live.append(Hypothesis(ids=new_ids, logp=score, finished=False))
        live = next_live
        blocked_map = next_blocked
        if not live:
            break
        best_live = max(h.logp for h in live)
        if finished and max(f.logp for f in finished) >= best_live:
            break  # log-probs only decrease; no live hypothesis can win

    finished.extend(Hypothesis(ids=h.ids, logp=h.logp, finished=True) for h in live)
    best = max(finished, key=lambda h: (h.logp, -len(h.ids)))
    return list(best.ids)


def nucleus(model, context_ids, config: DecodeConfig, image_feature=None,
            rng: np.random.Generator | None = None) -> list[int]:
    """Top-p sampling; deterministic for a fixed config.seed."""
    config.validate()
    if rng is None:
        rng = np.random.default_rng(config.seed)
    enc = model.encode(context_ids, image_feature)
    out: list[int] = []
    while len(out) < config.max_len:
        lp = step_logprobs(model, enc, out, config.min_len)
        probs = np.exp(lp)
        order = np.lexsort((np.arange(len(probs)), -probs))
        sorted_p = probs[order]
        k = int(np.searchsorted(np.cumsum(sorted_p), config.nucleus_p) + 1)
        k = min(k, len(order))
        support = order[:k]
        weights = probs[support] / probs[support].sum()
        tok = int(rng.choice(support, p=weights))
        if tok == END_ID:
            break
        out.append(tok)
    return out


def decode(model, context_ids, config: DecodeConfig, image_feature=None) -> list[int]:
    if config.strategy == "greedy":
        return greedy(model, context_ids, config, image_feature)
    if config.strategy == "beam":
        return beam(model, context_ids, config, image_feature)
    return nucleus(model, context_ids, config, image_feature)


# ------------------------------------------------------------ decode table

TABLE_COLUMNS = ("task", "strategy", "beam_size", "min_len", "max_len",
                 "block_ngram", "nucleus_p", "seed")

# a beam of 3, at least 10 tokens, tri-gram blocking: the single-configuration
# setting used when no per-task table entry exists
DEFAULT_DECODE = DecodeConfig(strategy="beam", beam_size=3, min_len=10,
                              max_len=128, block_ngram=3)


class DecodeTable:
    def __init__(self, configs: dict[str, DecodeConfig],
                 default: DecodeConfig = DEFAULT_DECODE):
        self.configs = configs
        self.default = default

    def for_task(self, task: str) -> DecodeConfig:
        return self.configs.get(task, self.default)


def load_decode_table(path) -> DecodeTable:
    """CSV, one row per task; blank cells fall back to the field default."""
    configs = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or tuple(reader.fieldnames) != TABLE_COLUMNS:
            raise ConfigError(
                f"{path}: decode table header must be {','.join(TABLE_COLUMNS)}"
            )
        parsers = {"strategy": str, "nucleus_p": float}
        for row in reader:
            task = row["task"]
            kwargs = {}
            for f_ in fields(DecodeConfig):
                raw = (row.get(f_.name) or "").strip()
                if not raw:
                    continue
                try:
                    kwargs[f_.name] = parsers.get(f_.name, int)(raw)
                except ValueError as e:
                    raise ConfigError(
                        f"{path}: task '{task}': bad value for field '{f_.name}': {raw!r}"
                    ) from e
            cfg = replace(DEFAULT_DECODE, **kwargs)
            try:
                cfg.validate()
            except ConfigError as e:
                raise ConfigError(f"{path}: task '{task}': {e}") from e
            configs[task] = cfg
    return DecodeTable(configs)
