"""Independent brute-force reference implementations.

Everything here is written as literal, loop-based transcriptions of the
definitions under test and shares no code with the library paths it checks.
"""

from __future__ import annotations

import math

import numpy as np


def brute_force_two_drops(scores, ids, target_pos):
    """Literal mining rule: below-target suffix, top-2 adjacent drops, interval.

    scores: descending list; target_pos: 1-based.  Returns the member id set,
    or None when fewer than two adjacent differences exist below the target.
    """
    n = len(scores)
    target_score = scores[target_pos - 1]
    below = [j for j in range(1, n + 1) if scores[j - 1] < target_score]
    diffs = []
    for j in below:
        if j + 1 <= n:
            diffs.append((scores[j - 1] - scores[j], j))
    if len(diffs) < 2:
        return None
    best = sorted(diffs, key=lambda pair: (-pair[0], pair[1]))[:2]
    k1, k2 = best[0][1], best[1][1]
    lo, hi = min(k1, k2) + 1, max(k1, k2)
    return {
        ids[j - 1] for j in range(lo, hi + 1) if scores[j - 1] < target_score
    }


def brute_force_below_target(scores, target_score):
    """1-based ranks with score strictly below target_score."""
    return [j for j in range(1, len(scores) + 1) if scores[j - 1] < target_score]


def brute_force_ranking(params, fused_query, id_vector_pairs):
    """Score-then-sort with per-item scalar ops; ties break by ascending id."""
    inv_tau = math.exp(params.log_inv_tau)
    scored = []
    for image_id, vec in id_vector_pairs:
        u = params.w_img @ np.asarray(vec, dtype=np.float64) + params.b_img
        u = u / np.linalg.norm(u)
        scored.append((image_id, float(np.dot(fused_query, u)) * inv_tau))
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored


def oracle_loss(params, x_img, x_txt, pos, neg):
    """Forward-only mean pairwise NLL, written independently of the trainer."""
    total = 0.0
    n = len(x_img)
    inv_tau = math.exp(params.log_inv_tau)
    for i in range(n):
        z = np.concatenate([x_img[i], x_txt[i]]).astype(np.float64)
        uq = params.w_fuse @ z + params.b_fuse
        q = uq / np.linalg.norm(uq)
        up = params.w_img @ np.asarray(pos[i], dtype=np.float64) + params.b_img
        p = up / np.linalg.norm(up)
        un = params.w_img @ np.asarray(neg[i], dtype=np.float64) + params.b_img
        m = un / np.linalg.norm(un)
        gap = inv_tau * (float(np.dot(q, p)) - float(np.dot(q, m)))
        # softplus(-gap), stable
        total += max(-gap, 0.0) + math.log1p(math.exp(-abs(gap)))
    return total / n


def finite_difference_grads(params, x_img, x_txt, pos, neg, h=1e-4):
    """Central finite differences of oracle_loss for every parameter coordinate."""
    grads = {}
    for name, arr in params.named_arrays():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for idx in range(flat.size):
            keep = flat[idx]
            flat[idx] = keep + h
            up = oracle_loss(params, x_img, x_txt, pos, neg)
            flat[idx] = keep - h
            down = oracle_loss(params, x_img, x_txt, pos, neg)
            flat[idx] = keep
            gflat[idx] = (up - down) / (2.0 * h)
        grads[name] = g
    keep = params.log_inv_tau
    params.log_inv_tau = keep + h
    up = oracle_loss(params, x_img, x_txt, pos, neg)
    params.log_inv_tau = keep - h
    down = oracle_loss(params, x_img, x_txt, pos, neg)
    params.log_inv_tau = keep
    grads["log_inv_tau"] = np.asarray((up - down) / (2.0 * h))
    return grads


def relative_error(a, b, floor=1e-6):
    """Elementwise |a-b| / max(|a|, |b|, floor); the floor keeps near-zero
    coordinates from dividing by zero (their absolute error is checked too)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def oracle_recall_at_k(id_lists, relevant_sets, k):
    """id_lists: query_id -> ranked ids; relevant_sets: query_id -> set."""
    hits = 0
    for query_id, ids in id_lists.items():
        relevant = relevant_sets[query_id]
        if any(i in relevant for i in ids[:k]):
            hits += 1
    return 100.0 * hits / len(id_lists)


def oracle_map_at_k(id_lists, relevant_sets, k):
    ap_total = 0.0
    for query_id, ids in id_lists.items():
        relevant = relevant_sets[query_id]
        hits = 0
        ap = 0.0
        for pos, image_id in enumerate(ids[:k], start=1):
            if image_id in relevant:
                hits += 1
                ap += hits / pos
        ap_total += ap / min(k, len(relevant))
    return 100.0 * ap_total / len(id_lists)


def oracle_preference_rate(scored):
    """scored: list of (s1, s2, chose_set1: bool); returns (rate, evaluated, excluded)."""
    kept = [(s1, s2, c) for s1, s2, c in scored if s1 > s2]
    excluded = len(scored) - len(kept)
    if not kept:
        return None, 0, excluded
    agree = sum(1 for _, _, c in kept if c)
    return 100.0 * agree / len(kept), len(kept), excluded
