"""QUERY and SUPPORT texts for each level.

    level 1  query  "Claim: <claim>"
             support "Evidence: <title>, sentence <i>: <text>"
    level 2  query  "Consider: Claim: <claim>"
             support "Consider: Claim: <claim> Evidence: ..."
    level 3  query  "Predict: Claim: <claim>"   (search)
                    "Reference: Claim: <claim>" (reference training sequences)
             support "<Label>: Claim: <claim> Evidence: ... Evidence: ..."
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .corpus import ClaimRecord, EvidencePointer, Label
from .encoder import split_tokens

DEFAULT_MAX_LEN = {1: 50, 2: 100, 3: 150}

_QUERY_PREFIX = {(1, "search"): "Claim: ", (2, "search"): "Consider: Claim: ",
                 (3, "search"): "Predict: Claim: ", (3, "reference"): "Reference: Claim: "}


@dataclass(frozen=True)
class FormattedSequence:
    text: str
    level: int
    role: str  # "query" | "support"
    mode: str = "search"  # "search" | "reference"
    label: Label | None = None
    evidence: tuple[EvidencePointer, ...] = ()
    claim_id: int = -1
    truncated: bool = False


def format_query(claim: ClaimRecord, level: int, mode: str = "search") -> FormattedSequence:
    try:
        prefix = _QUERY_PREFIX[(level, mode)]
    except KeyError:
        raise ValueError(f"no query format for level={level!r}, mode={mode!r}") from None
    return FormattedSequence(prefix + claim.claim_text, level, "query", mode, claim_id=claim.claim_id)


def evidence_unit(ptr: EvidencePointer, text: str) -> str:
    head = f"Evidence: {ptr.page_title}, sentence {ptr.sentence_index}:"
    return f"{head} {text}" if text else head


def dedup_evidence(ptrs: Iterable[EvidencePointer]) -> list[EvidencePointer]:
    seen, out = set(), []
    for p in ptrs:
        if p not in seen:
            seen.add(p)
            out.append(p)
    return out


def _compose(level: int, claim_text: str, units: list[str], label: Label | None) -> str:
    if level == 1:
        return units[0]
    head = "Consider" if level == 2 else label.value
    return " ".join([f"{head}: Claim: {claim_text}", *units])


def format_support(
    level: int,
    claim: ClaimRecord,
    evidence: Sequence[tuple[EvidencePointer, str]],
    label: Label | None = None,
    max_tokens: int | None = None,
) -> FormattedSequence:
    """Compose a SUPPORT sequence.

    When ``max_tokens`` is given and the composition is too long, tokens are
    trimmed from the end of the last evidence sentence's text (then the one
    before it); prefixes, label, claim copy and evidence headers are kept.
    """
    if level == 1:
        if len(evidence) != 1 or label is not None:
            raise ValueError("level 1 support takes exactly one evidence sentence and no label")
    elif level == 2:
        if len(evidence) != 1 or label is not None:
            raise ValueError("level 2 support takes exactly one evidence sentence and no label")
    elif level == 3:
        if label is None:
            raise ValueError("level 3 support needs a label")
    else:
        raise ValueError(f"invalid level {level!r}")

    ptrs = [p for p, _ in evidence]
    texts = [t for _, t in evidence]
    truncated = False
    text = _compose(level, claim.claim_text, [evidence_unit(p, t) for p, t in zip(ptrs, texts)], label)
    if max_tokens is not None:
        n = len(split_tokens(text))
        i = len(texts) - 1
        while n > max_tokens and i >= 0:
            toks = split_tokens(texts[i])
            keep = max(0, len(toks) - (n - max_tokens))
            texts[i] = texts[i][: toks[keep - 1][2]] if keep else ""
            truncated = True
            text = _compose(level, claim.claim_text, [evidence_unit(p, t) for p, t in zip(ptrs, texts)], label)
            n = len(split_tokens(text))
            i -= 1
    return FormattedSequence(
        text, level, "support", "search", label, tuple(ptrs), claim.claim_id, truncated
    )
