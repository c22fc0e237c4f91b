"""Slot-structured guidance generator: tanh encoder, per-slot softmax decoder.

One decoder slot per finding label; each slot emits one of four tokens
(state it present, state it absent, state it uncertain, or omit it).
All gradients are analytic and checked against finite differences in tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import ConfigError, FindingOntology

TOK_PRESENT = 0
TOK_ABSENT = 1
TOK_UNCERTAIN = 2
TOK_OMIT = 3
VOCAB_SIZE = 4

TOKEN_NAMES = ("PRESENT", "ABSENT", "UNCERTAIN", "OMIT")


class CheckpointError(ValueError):
    """Raised when a checkpoint's dimension record does not match its arrays."""


@dataclass
class CaptionerParams:
    W_e: np.ndarray  # (m, d)
    b_e: np.ndarray  # (m,)
    W_dec: np.ndarray  # (K, V, m)
    b_dec: np.ndarray  # (K, V)
    round: int = 0

    @property
    def d(self) -> int:
        return self.W_e.shape[1]

    @property
    def m(self) -> int:
        return self.W_e.shape[0]

    @property
    def K(self) -> int:
        return self.W_dec.shape[0]

    @property
    def V(self) -> int:
        return self.W_dec.shape[1]

    def copy(self) -> "CaptionerParams":
        return CaptionerParams(
            W_e=self.W_e.copy(),
            b_e=self.b_e.copy(),
            W_dec=self.W_dec.copy(),
            b_dec=self.b_dec.copy(),
            round=self.round,
        )

    def zeros_like(self) -> "CaptionerParams":
        return CaptionerParams(
            W_e=np.zeros_like(self.W_e),
            b_e=np.zeros_like(self.b_e),
            W_dec=np.zeros_like(self.W_dec),
            b_dec=np.zeros_like(self.b_dec),
            round=self.round,
        )

    def axpy(self, coeff: float, other: "CaptionerParams") -> None:
        """In-place self += coeff * other over all weight arrays."""
        self.W_e += coeff * other.W_e
        self.b_e += coeff * other.b_e
        self.W_dec += coeff * other.W_dec
        self.b_dec += coeff * other.b_dec

    def flat(self) -> np.ndarray:
        return np.concatenate(
            [self.W_e.ravel(), self.b_e.ravel(), self.W_dec.ravel(), self.b_dec.ravel()]
        )

    def from_flat(self, vec: np.ndarray) -> "CaptionerParams":
        out = self.copy()
        sizes = [a.size for a in (self.W_e, self.b_e, self.W_dec, self.b_dec)]
        parts = np.split(vec, np.cumsum(sizes)[:-1])
        out.W_e = parts[0].reshape(self.W_e.shape)
        out.b_e = parts[1].reshape(self.b_e.shape)
        out.W_dec = parts[2].reshape(self.W_dec.shape)
        out.b_dec = parts[3].reshape(self.b_dec.shape)
        return out


def init_params(d: int, m: int, K: int, seed: int = 0, scale: float = 0.1) -> CaptionerParams:
    rng = np.random.default_rng([seed, 100])
    return CaptionerParams(
        W_e=scale * rng.standard_normal((m, d)),
        b_e=np.zeros(m),
        W_dec=scale * rng.standard_normal((K, VOCAB_SIZE, m)),
        b_dec=np.zeros((K, VOCAB_SIZE)),
    )


def encode(params: CaptionerParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (params.d,):
        raise ValueError(f"expected x of shape ({params.d},), got {x.shape}")
    return np.tanh(params.W_e @ x + params.b_e)


def encode_batch(params: CaptionerParams, X: np.ndarray) -> np.ndarray:
    """Encode rows of X; returns (N, m)."""
    return np.tanh(X @ params.W_e.T + params.b_e)


def slot_logits(params: CaptionerParams, z: np.ndarray) -> np.ndarray:
    """(K, V) logit matrix for embedding z."""
    return np.einsum("kvm,m->kv", params.W_dec, z) + params.b_dec


def _softmax(u: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = u - u.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def decode_argmax(params: CaptionerParams, z: np.ndarray) -> np.ndarray:
    """Greedy tokens; ties break toward the lowest token id."""
    u = slot_logits(params, z)
    return np.argmax(u, axis=1)


def decode_sample(
    params: CaptionerParams,
    z: np.ndarray,
    temperature: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Per-slot categorical sampling from softmax(logits / temperature).

    Consumes exactly one uniform draw per slot via inverse-CDF, so a fixed
    rng stream reproduces the sequence.
    """
    if temperature <= 0:
        raise ConfigError("sampling temperature must be > 0")
    u = slot_logits(params, z)
    probs = _softmax(u / temperature, axis=1)
    tokens = np.empty(params.K, dtype=int)
    for k in range(params.K):
        cum = np.cumsum(probs[k])
        r = rng.random()
        tokens[k] = min(int(np.searchsorted(cum, r, side="right")), params.V - 1)
    return tokens


def render(tokens: np.ndarray, ontology: FindingOntology) -> str:
    """Deterministic caption text for a token vector; parseable by the labeler."""
    if len(tokens) != ontology.size:
        raise ValueError(f"expected {ontology.size} tokens, got {len(tokens)}")
    parts = []
    for tok, label in zip(tokens, ontology.labels):
        if tok == TOK_PRESENT:
            parts.append(f"there is {label}.")
        elif tok == TOK_ABSENT:
            parts.append(f"no {label}.")
        elif tok == TOK_UNCERTAIN:
            parts.append(f"possible {label}.")
        elif tok == TOK_OMIT:
            continue
        else:
            raise ValueError(f"unknown token id {tok}")
    return " ".join(parts)


@dataclass
class Guidance:
    tokens: np.ndarray
    text: str
    z: np.ndarray

    @classmethod
    def generate(
        cls,
        params: CaptionerParams,
        x: np.ndarray,
        ontology: FindingOntology,
        temperature: float | None = None,
        rng: np.random.Generator | None = None,
    ) -> "Guidance":
        z = encode(params, x)
        if temperature is None:
            tokens = decode_argmax(params, z)
        else:
            tokens = decode_sample(params, z, temperature, rng)
        return cls(tokens=tokens, text=render(tokens, ontology), z=z)


def nll_loss(
    params: CaptionerParams, x: np.ndarray, target_tokens: np.ndarray
) -> tuple[float, CaptionerParams]:
    """Summed per-slot cross entropy and its exact gradients."""
    target_tokens = np.asarray(target_tokens, dtype=int)
    if target_tokens.shape != (params.K,):
        raise ValueError(f"expected {params.K} target tokens, got {target_tokens.shape}")
    x = np.asarray(x, dtype=float)
    pre = params.W_e @ x + params.b_e
    z = np.tanh(pre)
    u = slot_logits(params, z)
    p = _softmax(u, axis=1)
    ks = np.arange(params.K)
    loss = float(-np.log(p[ks, target_tokens]).sum())

    grad_u = p.copy()
    grad_u[ks, target_tokens] -= 1.0
    g = params.zeros_like()
    g.W_dec = grad_u[:, :, None] * z[None, None, :]
    g.b_dec = grad_u
    grad_z = np.einsum("kvm,kv->m", params.W_dec, grad_u)
    grad_pre = grad_z * (1.0 - z**2)
    g.W_e = np.outer(grad_pre, x)
    g.b_e = grad_pre
    return loss, g


def nll_loss_batch(
    params: CaptionerParams, X: np.ndarray, T: np.ndarray
) -> tuple[float, CaptionerParams]:
    """Mean NLL over rows of X with target token matrix T (N, K); mean gradients."""
    N = X.shape[0]
    pre = X @ params.W_e.T + params.b_e  # (N, m)
    Z = np.tanh(pre)
    U = np.einsum("kvm,nm->nkv", params.W_dec, Z) + params.b_dec  # (N, K, V)
    P = _softmax(U, axis=2)
    ns = np.arange(N)[:, None]
    ks = np.arange(params.K)[None, :]
    loss = float(-np.log(P[ns, ks, T]).sum() / N)

    grad_U = P.copy()
    grad_U[ns, ks, T] -= 1.0
    grad_U /= N
    g = params.zeros_like()
    g.W_dec = np.einsum("nkv,nm->kvm", grad_U, Z)
    g.b_dec = grad_U.sum(axis=0)
    grad_Z = np.einsum("kvm,nkv->nm", params.W_dec, grad_U)
    grad_pre = grad_Z * (1.0 - Z**2)
    g.W_e = grad_pre.T @ X
    g.b_e = grad_pre.sum(axis=0)
    return loss, g


def save_checkpoint(params: CaptionerParams, path: str | Path) -> None:
    payload = {
        "dims": {"d": params.d, "m": params.m, "K": params.K, "V": params.V},
        "W_e": params.W_e.tolist(),
        "b_e": params.b_e.tolist(),
        "W_k": params.W_dec.tolist(),
        "b_k": params.b_dec.tolist(),
        "round": params.round,
    }
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path: str | Path, expected_slots: int | None = None) -> CaptionerParams:
    raw = json.loads(Path(path).read_text())
    dims = raw["dims"]
    params = CaptionerParams(
        W_e=np.asarray(raw["W_e"], dtype=float),
        b_e=np.asarray(raw["b_e"], dtype=float),
        W_dec=np.asarray(raw["W_k"], dtype=float),
        b_dec=np.asarray(raw["b_k"], dtype=float),
        round=int(raw.get("round", 0)),
    )
    actual = {"d": params.d, "m": params.m, "K": params.K, "V": params.V}
    if dims != actual:
        raise CheckpointError(f"dim record {dims} does not match arrays {actual}")
    if expected_slots is not None and params.K != expected_slots:
        raise CheckpointError(
            f"checkpoint has {params.K} slots, expected {expected_slots}"
        )
    return params
