"""Dense, partition-free reference implementations.

These are the ground truth the simulated dataflows are checked against. They
use no cluster machinery, and the most bug-prone ones are duplicated in a
deliberately naive scalar-loop form (``naive_*``) so the two sides cannot
share a mistake.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import ShapeMismatch
from .scenarios import MHA, MLA, DecodeScenario

MLA_ORIGINAL = "original"
MLA_ABSORBED = "absorbed"


def softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax; rows sum to 1."""
    shifted = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def dense_mha_decode(scenario: DecodeScenario) -> np.ndarray:
    """Multi-head attention decode step.

    Per head: project Q/K/V from the hidden states, append the new K/V rows
    to the cache, attend over all cached-plus-new positions with scale
    1/sqrt(head_dim), and accumulate the projected head outputs.
    """
    if scenario.kind != MHA:
        raise ShapeMismatch("dense_mha_decode requires an mha scenario")
    scenario.validate()
    d = scenario.dims
    h = d.head_dim
    out = np.zeros((d.batch_size, d.hidden_dim), dtype=np.float32)
    for i in range(d.n_heads):
        w = scenario.w_qkv[i]
        q = scenario.hidden @ w[:, :h]
        k_new = scenario.hidden @ w[:, h : 2 * h]
        v_new = scenario.hidden @ w[:, 2 * h :]
        k_full = np.concatenate([scenario.k_cache[i], k_new], axis=0)
        v_full = np.concatenate([scenario.v_cache[i], v_new], axis=0)
        probs = softmax(q @ k_full.T / math.sqrt(h))
        out += (probs @ v_full) @ scenario.w_out[i]
    return out.astype(np.float32)


def dense_mla_decode(scenario: DecodeScenario, variant: str = MLA_ABSORBED) -> np.ndarray:
    """Latent-attention decode step in either of two equivalent forms.

    ``absorbed``: queries are pushed into the latent space (hidden @ w_q @
    w_up) and attention runs directly over the shared latent cache, which
    serves as both keys and values; head outputs come from the latent
    attention result via w_down.

    ``original``: per-head K and V are materialized from the latent cache
    (K = latent @ w_up^T, V = latent @ w_down) and standard per-head
    attention runs on them.

    Both forms compute identical scores and outputs up to float re-association.
    The latent width is the effective key dimension, so 1/sqrt(kv_lora_rank)
    is the softmax scale in both forms.
    """
    if scenario.kind != MLA:
        raise ShapeMismatch("dense_mla_decode requires an mla scenario")
    if variant not in (MLA_ORIGINAL, MLA_ABSORBED):
        raise ValueError(f"unknown variant {variant!r}")
    scenario.validate()
    d = scenario.dims
    scale = 1.0 / math.sqrt(d.kv_lora_rank)
    latent_new = scenario.hidden @ scenario.w_kv
    latent_full = np.concatenate([scenario.kv_cache, latent_new], axis=0)
    out = np.zeros((d.batch_size, d.hidden_dim), dtype=np.float32)
    for i in range(d.n_heads):
        if variant == MLA_ABSORBED:
            q_latent = (scenario.hidden @ scenario.w_q[i]) @ scenario.w_up[i]
            probs = softmax(q_latent @ latent_full.T * scale)
            head_out = (probs @ latent_full) @ scenario.w_down[i]
        else:
            q = scenario.hidden @ scenario.w_q[i]
            k = latent_full @ scenario.w_up[i].T
            v = latent_full @ scenario.w_down[i]
            probs = softmax(q @ k.T * scale)
            head_out = probs @ v
        out += head_out @ scenario.w_out[i]
    return out.astype(np.float32)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


ACTIVATIONS = {
    "gelu": gelu,
    "silu": silu,
    "relu": lambda x: np.maximum(x, 0.0),
    "identity": lambda x: x,
}


def ffn_reference(
    z: np.ndarray,
    w1: np.ndarray,
    w2: np.ndarray,
    w3: np.ndarray,
    activation="gelu",
) -> np.ndarray:
    """Gated feed-forward block: (act(z w1^T) * (z w2^T)) w3^T.

    w1 and w2 map hidden -> intermediate (rows = intermediate width), w3 maps
    intermediate -> hidden. Reference only; no fused counterpart exists here.
    """
    act = ACTIVATIONS[activation] if isinstance(activation, str) else activation
    if w1.shape != w2.shape or w1.shape[1] != z.shape[1] or w3.shape[1] != w1.shape[0]:
        raise ShapeMismatch(
            f"ffn_reference shapes inconsistent: z {z.shape}, w1 {w1.shape}, "
            f"w2 {w2.shape}, w3 {w3.shape}"
        )
    gate = act(z @ w1.T)
    return ((gate * (z @ w2.T)) @ w3.T).astype(np.float32)


# ---------------------------------------------------------------------------
# Naive duals: scalar loops, written independently of the vectorized forms.
# ---------------------------------------------------------------------------


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"naive_matmul: {a.shape} @ {b.shape}")
    rows, inner = a.shape
    cols = b.shape[1]
    out = np.zeros((rows, cols), dtype=np.float64)
    for r in range(rows):
        for c in range(cols):
            acc = 0.0
            for k in range(inner):
                acc += float(a[r, k]) * float(b[k, c])
            out[r, c] = acc
    return out.astype(np.float32)


def naive_mha_decode(scenario: DecodeScenario) -> np.ndarray:
    """Scalar-loop MHA decode; slow, for cross-checking dense_mha_decode."""
    d = scenario.dims
    h = d.head_dim
    out = np.zeros((d.batch_size, d.hidden_dim), dtype=np.float64)
    for i in range(d.n_heads):
        w = scenario.w_qkv[i]
        q = naive_matmul(scenario.hidden, w[:, :h])
        k_new = naive_matmul(scenario.hidden, w[:, h : 2 * h])
        v_new = naive_matmul(scenario.hidden, w[:, 2 * h :])
        k_rows = [scenario.k_cache[i][s] for s in range(d.seq_len)] + list(k_new)
        v_rows = [scenario.v_cache[i][s] for s in range(d.seq_len)] + list(v_new)
        for b in range(d.batch_size):
            scores = []
            for k_row in k_rows:
                dot = sum(float(q[b, j]) * float(k_row[j]) for j in range(h))
                scores.append(dot / math.sqrt(h))
            top = max(scores)
            weights = [math.exp(s - top) for s in scores]
            total = sum(weights)
            attended = [0.0] * h
            for weight, v_row in zip(weights, v_rows):
                for j in range(h):
                    attended[j] += (weight / total) * float(v_row[j])
            for c in range(d.hidden_dim):
                out[b, c] += sum(
                    attended[j] * float(scenario.w_out[i][j, c]) for j in range(h)
                )
    return out.astype(np.float32)


def naive_ffn(z, w1, w2, w3, activation: str = "gelu") -> np.ndarray:
    """Scalar-loop gated FFN used as the independent oracle for ffn_reference."""

    def act(x: float) -> float:
        if activation == "gelu":
            return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))
        if activation == "silu":
            return x / (1.0 + math.exp(-x))
        if activation == "relu":
            return max(x, 0.0)
        if activation == "identity":
            return x
        raise ValueError(activation)

    batch, hidden = z.shape
    inter = w1.shape[0]
    out = np.zeros((batch, hidden), dtype=np.float64)
    for b in range(batch):
        gated = []
        for f in range(inter):
            a = sum(float(z[b, j]) * float(w1[f, j]) for j in range(hidden))
            m = sum(float(z[b, j]) * float(w2[f, j]) for j in range(hidden))
            gated.append(act(a) * m)
        for c in range(hidden):
            out[b, c] = sum(gated[f] * float(w3[c, f]) for f in range(inter))
    return out.astype(np.float32)
