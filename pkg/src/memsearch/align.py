"""Token alignments read off the per-filter max-pool positions.

Each filter m links the query position where it peaked (i_m) to the support
position where it peaked (j_m) with weight a_m * exp(-delta_m), where a_m is
the query's pooled activation. Pairs hit by several filters sum their weights.
"""

from __future__ import annotations

import html
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .encoder import TokenSequence
from .memory import FeatureMaps, MemoryVector

CROSS_LEVEL_WARNING = (
    "levels 2 and 3 encode the claim inside the support sequence, so query tokens "
    "can align to their own copy; treat these alignments as confounded"
)


@dataclass
class AlignmentMap:
    weights: dict[tuple[int, int], float]
    max_pairs: list[tuple[int, int, float]]  # (query idx, support idx, weight), weight > 0
    level: int = 0
    query_tokens: list[str] = field(default_factory=list)
    support_tokens: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        obj = {
            "query_tokens": self.query_tokens,
            "support_tokens": self.support_tokens,
            "max_pairs": [[i, j, w] for i, j, w in self.max_pairs],
        }
        if self.level in (2, 3):
            obj["warning"] = CROSS_LEVEL_WARNING
        return json.dumps(obj, ensure_ascii=False)


def pair_weights(gq: MemoryVector, gs: MemoryVector) -> dict[tuple[int, int], float]:
    """Summed a_m * exp(-delta_m) per (query argmax, support argmax); filters visited in a fixed order."""
    if len(gq.g) != len(gs.g):
        raise ValueError(f"memory vector sizes differ: {len(gq.g)} vs {len(gs.g)}")
    a = np.asarray(gq.g, dtype=np.float64)
    delta = np.abs(a - np.asarray(gs.g, dtype=np.float64))
    out: dict[tuple[int, int], float] = {}
    for m in range(len(a)):
        key = (int(gq.argmax[m]), int(gs.argmax[m]))
        out[key] = out.get(key, 0.0) + float(a[m] * math.exp(-delta[m]))
    return out


def max_pairs(weights: dict[tuple[int, int], float]) -> list[tuple[int, int, float]]:
    """The heaviest pair per query token (smallest support index on ties); non-positive pairs dropped."""
    best: dict[int, tuple[int, float]] = {}
    for (i, j), w in sorted(weights.items()):
        if i not in best or w > best[i][1]:
            best[i] = (j, w)
    return [(i, j, w) for i, (j, w) in sorted(best.items()) if w > 0]


def merge_pairs(
    pairs: Sequence[tuple[int, int, float]], query_word: Sequence[int], support_word: Sequence[int]
) -> list[tuple[int, int, float]]:
    """Map token positions to original-word positions, summing weights that land together."""
    acc: dict[tuple[int, int], float] = {}
    for i, j, w in pairs:
        key = (query_word[i], support_word[j])
        acc[key] = acc.get(key, 0.0) + w
    return [(i, j, w) for (i, j), w in sorted(acc.items()) if w > 0]


def alignment(
    query: tuple[FeatureMaps, MemoryVector],
    support: tuple[FeatureMaps, MemoryVector],
    query_seq: TokenSequence | None = None,
    support_seq: TokenSequence | None = None,
) -> AlignmentMap:
    (fq, gq), (fs, gs) = query, support
    if gq.level and gs.level and gq.level != gs.level:
        raise ValueError(f"cannot align across levels {gq.level} and {gs.level}")
    if fq.n_filters != fs.n_filters:
        raise ValueError(f"filter counts differ: {fq.n_filters} vs {fs.n_filters}")
    level = gq.level or gs.level
    if level in (2, 3):
        warnings.warn(CROSS_LEVEL_WARNING, stacklevel=2)
    w = pair_weights(gq, gs)
    best = max_pairs(w)
    qt, st = [], []
    if query_seq is not None and support_seq is not None:
        best = merge_pairs(best, query_seq.word_index, support_seq.word_index)
        qt, st = _words(query_seq), _words(support_seq)
    return AlignmentMap(w, best, level, qt, st)


def _words(seq: TokenSequence) -> list[str]:
    """Original-token surface strings, one per distinct word index."""
    out: dict[int, str] = {}
    for pos, wi in enumerate(seq.word_index):
        a, b = seq.spans[pos]
        out[wi] = seq.text[a:b] if wi not in out else out[wi] + seq.text[a:b]
    return [out[k] for k in sorted(out)]


def align_texts(model, query_text: str, support_text: str, level: int = 1) -> AlignmentMap:
    """Run the model on one QUERY/SUPPORT pair and align it."""
    seqs = [model.tokenize(t, level) for t in (query_text, support_text)]
    ids = torch.as_tensor(np.stack([s.ids for s in seqs]))
    with torch.no_grad():
        g, idx, H = model.forward_level(ids, ids == 0, level)
    parts = []
    for k, s in enumerate(seqs):
        fm = FeatureMaps(H[k].T.to(torch.float64).numpy(), s.mask)
        parts.append((fm, MemoryVector(g[k].to(torch.float64).numpy(), idx[k].numpy(), level)))
    return alignment(parts[0], parts[1], seqs[0], seqs[1])


# ---------------------------------------------------------------------------
# static rendering


def to_svg(amap: AlignmentMap, width: int = 900) -> str:
    """Two token rows joined by lines whose opacity follows the pair weight."""
    q, s = amap.query_tokens, amap.support_tokens
    step_q = width / max(len(q), 1)
    step_s = width / max(len(s), 1)
    top = max((w for _, _, w in amap.max_pairs), default=1.0) or 1.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="160" font-family="monospace" font-size="11">']
    for i, j, w in amap.max_pairs:
        x1, x2 = (i + 0.5) * step_q, (j + 0.5) * step_s
        parts.append(f'<line x1="{x1:.1f}" y1="30" x2="{x2:.1f}" y2="130" stroke="#c0392b" '
                     f'stroke-opacity="{w / top:.3f}" stroke-width="2"/>')
    for k, t in enumerate(q):
        parts.append(f'<text x="{(k + 0.5) * step_q:.1f}" y="20" text-anchor="middle">{html.escape(t)}</text>')
    for k, t in enumerate(s):
        parts.append(f'<text x="{(k + 0.5) * step_s:.1f}" y="150" text-anchor="middle">{html.escape(t)}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def write_html(amaps: Sequence[AlignmentMap], path: str | Path, titles: Sequence[str] = ()) -> None:
    body = []
    for k, a in enumerate(amaps):
        title = titles[k] if k < len(titles) else f"pair {k}"
        body.append(f"<h3>{html.escape(title)}</h3>")
        if a.level in (2, 3):
            body.append(f"<p><em>{html.escape(CROSS_LEVEL_WARNING)}</em></p>")
        body.append(to_svg(a))
    Path(path).write_text("<!DOCTYPE html>\n<html><body>\n" + "\n".join(body) + "\n</body></html>\n",
                          encoding="utf-8")


def write_json(amaps: Sequence[AlignmentMap], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for a in amaps:
            f.write(a.to_json() + "\n")
