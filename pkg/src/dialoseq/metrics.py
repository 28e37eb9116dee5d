"""Evaluation suite: perplexity, BLEU-4, ROUGE-1/2/L, unigram F1, the mean
per-task perplexity aggregate (dodecaScore), and per-task report assembly.

Generation-metric tokenization is frozen for reproducibility: lowercase,
punctuation characters split into their own tokens, whitespace split. BLEU
uses add-epsilon smoothing, p_n = (matches + 1e-9) / (total + 1e-9), so a
hypothesis shorter than n still scores; the brevity penalty uses the closest
reference length (shorter wins ties). ROUGE is the balanced F-measure.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass

from . import corpus as corpus_mod
from . import decoding
from .bpe import Vocabulary
from .errors import ConfigError

BLEU_EPS = 1e-9

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def metric_tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# ----------------------------------------------------------------- bleu


def bleu(hypothesis: str, references: list[str], max_n: int = 4) -> float:
    if not references:
        raise ConfigError("bleu: at least one reference is required")
    hyp = metric_tokenize(hypothesis)
    refs = [metric_tokenize(r) for r in references]
    if not hyp:
        return 0.0
    log_p = 0.0
    for n in range(1, max_n + 1):
        counts = _ngrams(hyp, n)
        max_ref = Counter()
        for r in refs:
            for g, c in _ngrams(r, n).items():
                max_ref[g] = max(max_ref[g], c)
        matches = sum(min(c, max_ref[g]) for g, c in counts.items())
        total = max(len(hyp) - n + 1, 0)
        log_p += math.log((matches + BLEU_EPS) / (total + BLEU_EPS))
    # closest reference length; ties go to the shorter reference
    c = len(hyp)
    r = min((abs(len(t) - c), len(t)) for t in refs)[1]
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p / max_n)


def bleu4(hypothesis: str, references: list[str]) -> float:
    return bleu(hypothesis, references, max_n=4)


def avg_bleu(hypothesis: str, references: list[str]) -> float:
    """Mean of BLEU-1..4, the variant some tasks report."""
    return sum(bleu(hypothesis, references, max_n=n) for n in range(1, 5)) / 4


# ---------------------------------------------------------------- rouge


def _f1(overlap: float, hyp_total: float, ref_total: float) -> float:
    if overlap == 0:
        return 0.0
    p = overlap / hyp_total
    r = overlap / ref_total
    return 2 * p * r / (p + r)


def _lcs_len(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge(hypothesis: str, reference: str, variant) -> float:
    ref = metric_tokenize(reference)
    if not ref:
        raise ConfigError("rouge: reference must be non-empty")
    hyp = metric_tokenize(hypothesis)
    if variant in (1, 2):
        if len(hyp) < variant:
            return 0.0
        h, r = _ngrams(hyp, variant), _ngrams(ref, variant)
        overlap = sum(min(c, r[g]) for g, c in h.items())
        return _f1(overlap, sum(h.values()), sum(r.values()))
    if str(variant).lower() == "l":
        if not hyp:
            return 0.0
        return _f1(_lcs_len(hyp, ref), len(hyp), len(ref))
    raise ConfigError(f"rouge: variant must be 1, 2 or 'L', got {variant!r}")


def unigram_f1(hypothesis: str, reference: str) -> float:
    hyp = Counter(metric_tokenize(hypothesis))
    ref = Counter(metric_tokenize(reference))
    overlap = sum(min(c, ref[t]) for t, c in hyp.items())
    if not hyp or not ref:
        return 0.0
    return _f1(overlap, sum(hyp.values()), sum(ref.values()))


# ----------------------------------------------------------- perplexity


def perplexity(model, examples: list, vocab: Vocabulary | None = None) -> float:
    """exp(total NLL / total target tokens): token-weighted, not per-example."""
    if vocab is not None and getattr(model, "vocab_hash", "") and \
            model.vocab_hash != vocab.content_hash():
        raise ConfigError("perplexity: examples were encoded with a different vocabulary")
    total, count = model.nll_sums(examples)
    if count == 0:
        raise ConfigError("perplexity: no target tokens")
    mean = total / count
    return math.exp(mean) if mean < 700 else math.inf


def dodeca_score(per_task_ppl: dict[str, float]) -> float:
    """Arithmetic mean of per-task perplexities."""
    if not per_task_ppl:
        raise ConfigError("dodeca_score: need at least one task")
    return sum(per_task_ppl.values()) / len(per_task_ppl)


# --------------------------------------------------------------- report

METRIC_COLUMNS = ("ppl", "bleu4", "rouge1", "rouge2", "rougeL", "f1")
REPORT_FORMAT = "dialoseq-report v1"


@dataclass
class GroundingFlags:
    knowledge: bool = True
    image: bool = True


@dataclass
class MetricReport:
    rows: dict[str, dict[str, float]]
    dodeca: float
    config_echo: str = ""

    def to_csv(self) -> str:
        lines = [f"# {REPORT_FORMAT}"]
        if self.config_echo:
            for cfg_line in self.config_echo.splitlines():
                lines.append(f"# config: {cfg_line}")
        lines.append("# generation metrics x100, 1 decimal; ppl unscaled")
        lines.append("task," + ",".join(METRIC_COLUMNS))
        for task in sorted(self.rows):
            r = self.rows[task]
            cells = [f"{r['ppl']:.1f}"] + [f"{100 * r[m]:.1f}" for m in METRIC_COLUMNS[1:]]
            lines.append(f"{task}," + ",".join(cells))
        lines.append(f"dodecaScore,{self.dodeca:.1f}" + "," * (len(METRIC_COLUMNS) - 1))
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_csv())


def evaluate(
    model,
    registry: dict[str, corpus_mod.TaskSpec],
    vocab: Vocabulary,
    decode_table: decoding.DecodeTable | None = None,
    grounding: GroundingFlags | None = None,
    store: corpus_mod.ImageFeatureStore | None = None,
    split: str = "valid",
    limit: int | None = None,
    truncate: int = 1024,
    config_echo: str = "",
) -> MetricReport:
    """Per-task PPL on gold targets plus generation metrics on decoded output.

    grounding.knowledge / grounding.image blank out those context segments,
    reproducing the ablation at evaluation time.
    """
    decode_table = decode_table or decoding.DecodeTable({})
    grounding = grounding or GroundingFlags()
    rows = {}
    per_ppl = {}
    for name in sorted(registry):
        spec = registry[name]
        if split not in spec.splits:
            raise ConfigError(f"task '{name}' has no '{split}' split to evaluate")
        episodes = corpus_mod.load_episodes(spec.splits[split], spec)
        examples = corpus_mod.flatten_task(
            episodes, vocab, spec, store=store, truncate=truncate,
            use_knowledge=grounding.knowledge, use_image=grounding.image,
        )
        if limit is not None:
            examples = examples[:limit]
        if not examples:
            raise ConfigError(f"task '{name}': no examples in '{split}' split")
        ppl = perplexity(model, examples, vocab)
        cfg = decode_table.for_task(name)
        sums = dict.fromkeys(METRIC_COLUMNS[1:], 0.0)
        for ex in examples:
            hyp_ids = decoding.decode(model, ex.context_ids, cfg, ex.image_feature)
            hyp = vocab.decode(hyp_ids)
            ref = vocab.decode(ex.target_ids)
            sums["bleu4"] += bleu4(hyp, [ref])
            sums["rouge1"] += rouge(hyp, ref, 1)
            sums["rouge2"] += rouge(hyp, ref, 2)
            sums["rougeL"] += rouge(hyp, ref, "L")
            sums["f1"] += unigram_f1(hyp, ref)
        row = {m: s / len(examples) for m, s in sums.items()}
        row["ppl"] = ppl
        rows[name] = row
        per_ppl[name] = ppl
    return MetricReport(rows=rows, dodeca=dodeca_score(per_ppl), config_echo=config_echo)
