"""Composite similarity score for decompiled code against reference source.

The score averages four equally weighted components:

    score = 0.25*bleu4 + 0.25*weighted_bleu4 + 0.25*ast_match + 0.25*defuse_match

* ``bleu4`` — modified n-gram precision over lexical tokens, n = 1..4,
  clipped counts, with p_n = 0 when the candidate has no n-grams.  The
  combined value is ``BP * exp(sum(0.25 * ln(max(p_n, 1e-9))))`` with the
  standard brevity penalty (1 when the candidate is at least as long as
  the reference, else ``exp(1 - r/c)``); an empty candidate scores 0.
* ``weighted_bleu4`` — the same computation, except any n-gram containing
  a C keyword or a decompiler type name contributes with weight 5 to both
  the clipped matches and the denominator.
* ``ast_match`` — both sides are parsed with the tolerant pseudo-C
  parser; every AST node contributes one subtree signature consisting of
  its node kind, its operator text for Assign/BinaryOp/UnaryOp nodes
  only (so renamed variables still match), and its child signatures.
  The component is the multiset signature overlap divided by the
  ground-truth signature count.
* ``defuse_match`` — identifiers (declared names, identifier references,
  callee names) are normalized to v0, v1, ... by first appearance in a
  pre-order walk, making the component invariant under renaming.  Each
  assignment yields (def, use) pairs: def is the first identifier of the
  left-hand side; uses are the remaining left-hand-side identifiers, all
  right-hand-side identifiers, and the def itself for compound
  operators.  A declaration with an initializer yields pairs from the
  initializer.  An assignment or initialized declaration with no uses
  yields the single pair (def, "").  The component is the multiset
  overlap of normalized pairs divided by the ground-truth pair count; an
  empty ground truth scores 1.0 when the prediction is also empty, else
  0.0.

When either side fails to parse (for example a bare statement snippet
with no function header), both structural components degrade to a
token-level Dice overlap: ``2 * |unigram multiset overlap| / (|pred| +
|gt|)``, which is 1.0 when both token lists are empty.
"""

from __future__ import annotations

import math
from collections import Counter

from ..pseudoc import FunctionRecord, NodeKind, ParseFailure, parse_pseudocode, tokenize
from .clusters import C_KEYWORDS, DECOMPILER_TYPE_KEYWORDS

__all__ = ["codebleu_components", "codebleu_score"]

BLEU_KEYWORDS = frozenset(C_KEYWORDS | DECOMPILER_TYPE_KEYWORDS)

_MIN_PRECISION = 1e-9
_OPERATOR_KINDS = frozenset(
    {NodeKind.Assign, NodeKind.BinaryOp, NodeKind.UnaryOp})


def _lex(code: str) -> list[str]:
    return [tok.value for tok in tokenize(code)]


def _parse(code: str):
    record = FunctionRecord(project="", binary="", name="", address=0,
                            pseudocode=code, external=False)
    try:
        return parse_pseudocode(record).ast
    except ParseFailure:
        return None


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _bleu(pred_tokens: list[str], gt_tokens: list[str],
          keyword_weight: int) -> float:
    if not pred_tokens:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        pred_grams = _ngram_counts(pred_tokens, n)
        gt_grams = _ngram_counts(gt_tokens, n)
        total = matched = 0
        for gram, count in pred_grams.items():
            weight = (keyword_weight
                      if any(tok in BLEU_KEYWORDS for tok in gram) else 1)
            total += weight * count
            matched += weight * min(count, gt_grams.get(gram, 0))
        p_n = matched / total if total else 0.0
        log_sum += 0.25 * math.log(max(p_n, _MIN_PRECISION))
    cand, ref = len(pred_tokens), len(gt_tokens)
    brevity = 1.0 if cand >= ref else math.exp(1.0 - ref / cand)
    return brevity * math.exp(log_sum)


def _dice(pred_tokens: list[str], gt_tokens: list[str]) -> float:
    if not pred_tokens and not gt_tokens:
        return 1.0
    overlap = sum((Counter(pred_tokens) & Counter(gt_tokens)).values())
    return 2.0 * overlap / (len(pred_tokens) + len(gt_tokens))


def _signatures(node, out: list):
    op = node.op if node.kind in _OPERATOR_KINDS else ""
    sig = (node.kind.name, op,
           tuple(_signatures(child, out) for child in node.children))
    out.append(sig)
    return sig


def _ast_match(pred_root, gt_root) -> float:
    pred_sigs: list = []
    gt_sigs: list = []
    _signatures(pred_root, pred_sigs)
    _signatures(gt_root, gt_sigs)
    overlap = sum((Counter(pred_sigs) & Counter(gt_sigs)).values())
    return overlap / len(gt_sigs)


def _names_in(node, out: list):
    if node.kind in (NodeKind.Identifier, NodeKind.Call) or (
            node.kind is NodeKind.Decl and node.op):
        out.append(node.op)
    for child in node.children:
        _names_in(child, out)


def _defuse_pairs(root) -> Counter:
    order: list = []
    _names_in(root, order)
    norm: dict = {}
    for name in order:
        if name not in norm:
            norm[name] = f"v{len(norm)}"

    pairs: Counter = Counter()

    def emit(def_name: str, uses: list):
        if not uses:
            pairs[(norm[def_name], "")] += 1
        else:
            for use in uses:
                pairs[(norm[def_name], norm[use])] += 1

    def walk(node):
        if node.kind is NodeKind.Assign:
            lhs_ids: list = []
            rhs_ids: list = []
            _names_in(node.children[0], lhs_ids)
            _names_in(node.children[1], rhs_ids)
            if lhs_ids:
                uses = lhs_ids[1:] + rhs_ids
                if node.op != "=":
                    uses = uses + [lhs_ids[0]]
                emit(lhs_ids[0], uses)
        elif node.kind is NodeKind.Decl and node.op and node.children:
            init_ids: list = []
            for child in node.children:
                _names_in(child, init_ids)
            emit(node.op, init_ids)
        for child in node.children:
            walk(child)

    walk(root)
    return pairs


def _defuse_match(pred_root, gt_root) -> float:
    pred_pairs = _defuse_pairs(pred_root)
    gt_pairs = _defuse_pairs(gt_root)
    if not gt_pairs:
        return 1.0 if not pred_pairs else 0.0
    overlap = sum((pred_pairs & gt_pairs).values())
    return overlap / sum(gt_pairs.values())


def codebleu_components(pred_code: str, gt_code: str) -> dict:
    """The four component scores, each in [0, 1]."""
    pred_tokens, gt_tokens = _lex(pred_code), _lex(gt_code)
    pred_root, gt_root = _parse(pred_code), _parse(gt_code)
    if pred_root is None or gt_root is None:
        ast = defuse = _dice(pred_tokens, gt_tokens)
    else:
        ast = _ast_match(pred_root, gt_root)
        defuse = _defuse_match(pred_root, gt_root)
    return {
        "bleu": _bleu(pred_tokens, gt_tokens, 1),
        "weighted_bleu": _bleu(pred_tokens, gt_tokens, 5),
        "ast": ast,
        "defuse": defuse,
    }


def codebleu_score(pred_code: str, gt_code: str) -> float:
    """Equal-weight average of the four components, in [0, 1]."""
    parts = codebleu_components(pred_code, gt_code)
    return 0.25 * (parts["bleu"] + parts["weighted_bleu"]
                   + parts["ast"] + parts["defuse"])
