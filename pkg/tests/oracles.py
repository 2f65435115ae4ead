"""Reference implementations written apart from the package code.

Each function re-derives a value from its defining formula with plain Python
(no numpy, no package imports) so that tests compare two independent routes.
"""

from __future__ import annotations

import hashlib
import math
import re


def transmission_hours(params: float, bytes_per_param: float = 4, link_bps: float = 1e8) -> float:
    bits = params * bytes_per_param * 8
    return bits / link_bps / 3600


def baseline_bytes(params: float, bytes_per_param: float, rounds: int, clients: int) -> float:
    # each client downloads and uploads the full model once per round
    per_round = clients * (params * bytes_per_param + params * bytes_per_param)
    return per_round * rounds


def trigram_embedding(text: str, dim: int) -> list[float]:
    """Signed hashing of boundary-padded character trigrams, unit length."""
    vec = [0.0] * dim
    words = re.findall(r"[^\W_]+", text.lower())
    for w in words:
        s = "^" + w + "$"
        for i in range(len(s) - 2):
            d = hashlib.blake2b(s[i : i + 3].encode(), digest_size=8, key=b"fical-mock-embedder-v1").digest()
            h = sum(b << (8 * n) for n, b in enumerate(d))
            sign = -1.0 if h >= 2**63 else 1.0
            vec[h % dim] += sign
    norm = math.sqrt(sum(v * v for v in vec))
    if norm == 0:
        return [1.0] + [0.0] * (dim - 1)
    return [v / norm for v in vec]


def cosine_top_k(rows: list[tuple[str, list[float]]], query: list[float], k: int) -> list[tuple[str, float]]:
    """Full scan of cosine similarity; ties go to the smaller id, zero vectors score 0."""
    qn = math.sqrt(math.fsum(b * b for b in query))
    scored = []
    for cid, vec in rows:
        vn = math.sqrt(math.fsum(a * a for a in vec))
        s = math.fsum(a * b for a, b in zip(vec, query)) / (vn * qn) if vn * qn > 0 else 0.0
        scored.append((cid, min(1.0, max(-1.0, s))))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:k]


def shared_spans(source: str, target: str, m: int) -> list[str]:
    """Every maximal substring of ``source`` of length >= m found in ``target`` (quadratic scan)."""
    src = " ".join(source.casefold().split())
    tgt = " ".join(target.casefold().split())
    found = []
    i = 0
    while i <= len(src) - m:
        j = i
        while j < len(src) and src[i : j + 1] in tgt:
            j += 1
        if j - i >= m:
            found.append(src[i:j])
            i = j
        else:
            i += 1
    return found
