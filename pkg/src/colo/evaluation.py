"""Automatic metrics: BLEU, ROUGE-L, Distinct-4, coverage, entailment, PPL.

Coverage checks that a surface form of each tuple component appears in the
candidate.  The entailment check is exact on the synthetic grammar: it scans
the candidate for comparative-template instantiations, normalizes inverted
templates through the antonym map, and accepts only extractions that match
the tuple (any contradicting extraction fails the candidate).  It replaces a
learned NLI judge, it does not approximate one.  Perplexity is the trained
model's own held-out teacher-forced PPL, not a pretrained-LM score.
"""

import json
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import model as M
from . import tokens as tok
from .contrastive import swap_entities
from .corpus import MASTER_TEMPLATES, ASP, LOS, OPN, WIN, build_source, encode_example
from .decoding import beam_search
from .tensor import no_grad


class EvalError(Exception):
    """Misaligned candidate/reference inputs."""


# ---------------------------------------------------------------------------
# n-gram metrics


def _ngrams(seq, n):
    return [tuple(seq[i : i + n]) for i in range(len(seq) - n + 1)]


def bleu(candidates, references, max_n=4):
    """Corpus-level BLEU with brevity penalty.

    Modified n-gram precisions are clip-counted against the single reference;
    when any precision of order >= 2 has zero matches, every order >= 2 gets
    +1 smoothing on numerator and denominator.
    """
    if len(candidates) != len(references):
        raise EvalError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise EvalError("empty corpus")
    matches = [0] * (max_n + 1)
    totals = [0] * (max_n + 1)
    cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            counts = Counter(_ngrams(cand, n))
            ref_counts = Counter(_ngrams(ref, n))
            matches[n] += sum(min(c, ref_counts[g]) for g, c in counts.items())
            totals[n] += max(0, len(cand) - n + 1)
    if totals[1] == 0 or matches[1] == 0:
        return 0.0
    smooth = any(matches[n] == 0 for n in range(2, max_n + 1))
    log_p = math.log(matches[1] / totals[1])
    for n in range(2, max_n + 1):
        num, den = matches[n], totals[n]
        if smooth:
            num, den = num + 1, den + 1
        if num == 0 or den == 0:
            return 0.0
        log_p += math.log(num / den)
    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / max(1, cand_len))
    return bp * math.exp(log_p / max_n)


def _lcs_len(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidates, references):
    """Mean per-example LCS F-measure."""
    if len(candidates) != len(references):
        raise EvalError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise EvalError("empty corpus")
    scores = []
    for cand, ref in zip(candidates, references):
        lcs = _lcs_len(cand, ref)
        p = lcs / len(cand) if cand else 0.0
        r = lcs / len(ref) if ref else 0.0
        scores.append(2 * p * r / (p + r) if p + r > 0 else 0.0)
    return float(np.mean(scores))


def distinct_n(candidates, n=4):
    """Unique n-grams across all candidates over total n-gram slots."""
    total = 0
    unique = set()
    for cand in candidates:
        grams = _ngrams(cand, n)
        total += len(grams)
        unique.update(grams)
    return len(unique) / total if total else 0.0


# ---------------------------------------------------------------------------
# coverage


def _contains(candidate, surface_tokens):
    k = len(surface_tokens)
    if k == 0 or k > len(candidate):
        return False
    return any(candidate[i : i + k] == surface_tokens for i in range(len(candidate) - k + 1))


def coverage(candidate, t, lexicon):
    """Fraction of the four components with any surface form in the candidate."""
    hits = 0
    for kind, item_id in (
        ("entity", t.entity_a),
        ("entity", t.entity_b),
        ("aspect", t.aspect),
        ("opinion", t.opinion),
    ):
        surfaces = lexicon.surfaces(kind, item_id)
        if any(_contains(list(candidate), s.split()) for s in surfaces):
            hits += 1
    return hits / 4.0


# ---------------------------------------------------------------------------
# grammar-based entailment


def _match_template(candidate, start, template, by_surface, antonyms):
    """Extraction (winner, loser, aspect, opinion) or None at one position."""
    fill = {}
    for offset, token in enumerate(template.tokens):
        pos = start + offset
        if pos >= len(candidate):
            return None
        got = candidate[pos]
        if token in (WIN, LOS):
            hit = by_surface.get(got)
            if hit is None or hit[0] != "entity":
                return None
            fill[token] = hit[1]
        elif token == ASP:
            hit = by_surface.get(got)
            if hit is None or hit[0] != "aspect":
                return None
            fill[token] = hit[1]
        elif token == OPN:
            hit = by_surface.get(got)
            if hit is None or hit[0] != "opinion":
                return None
            fill[token] = hit[1]
        elif got != token:
            return None
    opinion = fill[OPN]
    if template.opinion_inverted:
        opinion = antonyms.get(opinion)
        if opinion is None:
            return None
    if fill[WIN] == fill[LOS]:
        return None
    return (fill[WIN], fill[LOS], fill[ASP], opinion)


def extract_relations(candidate, lexicon, templates=MASTER_TEMPLATES):
    """All template instantiations found in the candidate, in scan order."""
    by_surface = lexicon.surface_to_id()
    found = []
    for template in templates:
        for start in range(len(candidate)):
            got = _match_template(list(candidate), start, template, by_surface, lexicon.antonyms)
            if got is not None:
                found.append(got)
    return found


def entail_oracle(candidate, t, lexicon, templates=MASTER_TEMPLATES):
    """1 iff some extraction matches the tuple and none contradicts it."""
    extractions = extract_relations(candidate, lexicon, templates)
    if not extractions:
        return 0
    want = (t.entity_a, t.entity_b, t.aspect, t.opinion)
    return int(all(e == want for e in extractions))


# ---------------------------------------------------------------------------
# model-dependent metrics


def perplexity(params, cfg, examples, lexicon, vocab, batch_size=32):
    """exp of the token-mean teacher-forced NLL of the model itself."""
    total_nll = 0.0
    total_tokens = 0
    with no_grad():
        for i in range(0, len(examples), batch_size):
            chunk = examples[i : i + batch_size]
            encs = [encode_example(ex, lexicon, vocab, cfg.max_src_len) for ex in chunk]
            src, smask = M.pad_sources([e.src_ids for e in encs])
            tgt_in, labels, lmask = M.make_target_arrays([e.ref_ids for e in encs])
            enc_states = M.encode_batch(params, cfg, src, smask)
            nll, _ = M.nll_per_example(params, cfg, enc_states, smask, tgt_in, labels, lmask)
            counts = lmask.sum(axis=1)
            total_nll += float((nll.data * counts).sum())
            total_tokens += int(counts.sum())
    return math.exp(total_nll / total_tokens)


def mean_entity_swap_similarity(params, cfg, examples, lexicon, vocab, batch_size=32):
    """Mean cosine between pooled encodings of each tuple and its entity swap."""
    from . import tensor as T

    sims = []
    with no_grad():
        for i in range(0, len(examples), batch_size):
            chunk = examples[i : i + batch_size]
            srcs, swaps = [], []
            for ex in chunk:
                profiles = {p.entity_id: p for p in ex.profiles}
                srcs.append(vocab.tokenize(build_source(ex.tuple, profiles, lexicon, cfg.max_src_len)))
                swaps.append(
                    vocab.tokenize(build_source(swap_entities(ex.tuple), profiles, lexicon, cfg.max_src_len))
                )
            src, smask = M.pad_sources(srcs)
            swp, wmask = M.pad_sources(swaps)
            z = T.masked_mean_pool(M.encode_batch(params, cfg, src, smask), smask)
            z_swap = T.masked_mean_pool(M.encode_batch(params, cfg, swp, wmask), wmask)
            sims.extend(T.cosine_rows(z, z_swap).data.tolist())
    return float(np.mean(sims))


# ---------------------------------------------------------------------------
# corpus evaluation


@dataclass
class EvalReport:
    b1: float
    b4: float
    r_l: float
    dist4: float
    cover: float
    entail: float
    ppl: float  # None when no model is available to score predictions
    n_examples: int

    def to_dict(self):
        return {
            "b1": self.b1,
            "b4": self.b4,
            "r_l": self.r_l,
            "dist4": self.dist4,
            "cover": self.cover,
            "entail": self.entail,
            "ppl": self.ppl,
            "n_examples": self.n_examples,
        }

    def scaled(self):
        """Metric values in the conventional x100 reporting scale."""
        d = {k: round(v * 100.0, 2) for k, v in self.to_dict().items() if k not in ("ppl", "n_examples")}
        d["ppl"] = None if self.ppl is None else round(self.ppl, 3)
        d["n_examples"] = self.n_examples
        return d


def metrics_report(predictions, examples, lexicon, ppl=None, templates=MASTER_TEMPLATES):
    """EvalReport from token-string predictions aligned with examples."""
    if len(predictions) != len(examples):
        raise EvalError(f"{len(predictions)} predictions vs {len(examples)} examples")
    references = [ex.reference for ex in examples]
    covers = [coverage(p, ex.tuple, lexicon) for p, ex in zip(predictions, examples)]
    entails = [entail_oracle(p, ex.tuple, lexicon, templates) for p, ex in zip(predictions, examples)]
    return EvalReport(
        b1=bleu(predictions, references, max_n=1),
        b4=bleu(predictions, references, max_n=4),
        r_l=rouge_l(predictions, references),
        dist4=distinct_n(predictions, 4),
        cover=float(np.mean(covers)),
        entail=float(np.mean(entails)),
        ppl=ppl,
        n_examples=len(examples),
    )


def decode_corpus(params, cfg, examples, lexicon, vocab, beam_size=5, length_norm=1.0):
    """Beam-decode every example; returns token-string predictions."""
    preds = []
    for ex in examples:
        enc = encode_example(ex, lexicon, vocab, cfg.max_src_len)
        ranked = beam_search(params, cfg, enc.src_ids, beam_size=beam_size, length_norm=length_norm)
        ids = [i for i in ranked[0] if i != tok.EOS_ID]
        preds.append(vocab.detokenize(ids))
    return preds


def evaluate_corpus(params, cfg, examples, lexicon, vocab, beam_size=5, length_norm=1.0):
    """Decode with beam search and compute the full report."""
    preds = decode_corpus(params, cfg, examples, lexicon, vocab, beam_size, length_norm)
    ppl = perplexity(params, cfg, examples, lexicon, vocab)
    return metrics_report(preds, examples, lexicon, ppl=ppl), preds


def write_report(path, report: EvalReport, extra=None):
    doc = dict(report.to_dict())
    doc["scaled"] = report.scaled()
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="ascii") as f:
        json.dump(doc, f, ensure_ascii=True, sort_keys=True, indent=2)
        f.write("\n")
