"""Unbiased random compression operators and their bit-cost accounting.

All operators satisfy E[C(v)] = v and E||C(v) - v||^2 <= omega * ||v||^2:

* identity: omega = 0
* quantize (stochastic scalar quantization on s levels, 2-norm):
  omega = min(d / s^2, sqrt(d) / s)
* sparsify (keep each coordinate with probability p, rescale by 1/p):
  omega = 1/p - 1

Bit costs are an accounting convention, not an encoder.  Per message of
dimension d:

* identity: 32 * d
* quantize, s = 1: ceil(32 * sqrt(d) * log2(d))
* quantize, s > 1: ceil(32 + d * (log2(s) + 1)) + ceil(sqrt(d) * log2(d))
* sparsify: ceil(p * d) * (32 + ceil(log2(d)))

An exactly-zero vector compresses to zero with a header-only cost (the norm
scalar for quantization, nothing for sparsification); identity always ships
the raw vector.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels

KINDS = ("identity", "quantize", "sparsify")


@dataclass(frozen=True)
class CompressorSpec:
    """One compression operator bound to a message dimension."""

    kind: str
    d: int
    s: int = 1
    p: float = 1.0
    norm: str = "two_norm"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown compressor kind: {self.kind!r}")
        if self.d < 1:
            raise ValueError("dimension must be >= 1")
        if self.kind == "quantize" and self.s < 1:
            raise ValueError("quantization level count must be >= 1")
        if self.kind == "sparsify" and not 0.0 < self.p <= 1.0:
            raise ValueError("sparsification probability must be in (0, 1]")

    @property
    def omega(self) -> float:
        if self.kind == "identity":
            return 0.0
        if self.kind == "quantize":
            return min(self.d / self.s**2, math.sqrt(self.d) / self.s)
        return 1.0 / self.p - 1.0

    def label(self) -> str:
        if self.kind == "quantize":
            return f"quantize(s={self.s})"
        if self.kind == "sparsify":
            return f"sparsify(p={self.p})"
        return "identity"


def make_spec(kind: str, d: int, s: int = 1, p: float = 1.0) -> CompressorSpec:
    return CompressorSpec(kind=kind, d=d, s=s, p=p)


def spec_from_config(entry: dict, d: int) -> CompressorSpec:
    """Build a spec from a config mapping like {kind="quantize", s=1}."""
    allowed = {"kind", "s", "p"}
    unknown = set(entry) - allowed
    if unknown:
        raise ValueError(f"unknown compressor keys: {sorted(unknown)}")
    kind = entry.get("kind")
    if kind not in KINDS:
        raise ValueError(f"compressor kind must be one of {KINDS}, got {kind!r}")
    return make_spec(kind, d, s=int(entry.get("s", 1)), p=float(entry.get("p", 1.0)))


def quantize_s(v: np.ndarray, s: int, rng: np.random.Generator) -> np.ndarray:
    """Stochastic scalar quantization w.r.t. the 2-norm.

    output_i = ||v|| * sign(v_i) * xi_i with xi_i the floor or ceil of
    s|v_i|/||v|| divided by s, rounded up with probability equal to the
    fractional part.  Coordinates exactly on a level are deterministic (the
    round-up probability is zero); a call always consumes d uniforms so the
    stream advance is input-independent.
    """
    if s < 1:
        raise ValueError("s must be >= 1")
    v = np.asarray(v, dtype=float)
    norm = math.sqrt(float(v @ v))
    if norm == 0.0:
        return np.zeros_like(v)
    u = rng.random(v.shape[0])
    return _kernels.quantize_vec(v, norm, u, s)


def sparsify_p(v: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    """Keep each coordinate independently with probability p, scale by 1/p."""
    if not 0.0 < p <= 1.0:
        raise ValueError("p must be in (0, 1]")
    v = np.asarray(v, dtype=float)
    if p == 1.0:
        return v.copy()
    u = rng.random(v.shape[0])
    return _kernels.sparsify_vec(v, u, p)


def bit_cost(spec: CompressorSpec, d: int) -> int:
    """Bits for one generic (nonzero) message of dimension d."""
    if d < 1:
        raise ValueError("d must be >= 1")
    if spec.kind == "identity":
        return 32 * d
    if spec.kind == "quantize":
        if spec.s == 1:
            return math.ceil(32.0 * math.sqrt(d) * math.log2(d))
        body = math.ceil(32.0 + d * (math.log2(spec.s) + 1.0))
        header = math.ceil(math.sqrt(d) * math.log2(d))
        return body + header
    kept = math.ceil(spec.p * d)
    return kept * (32 + math.ceil(math.log2(d)))


def header_cost(spec: CompressorSpec, d: int) -> int:
    """Bits for an exactly-zero message."""
    if spec.kind == "identity":
        return 32 * d
    if spec.kind == "quantize":
        return 32
    return 0


def compress(spec: CompressorSpec, v: np.ndarray,
             rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Apply the operator; return (compressed vector, message bits)."""
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot compress a non-finite vector")
    d = v.shape[0]
    if spec.kind == "identity":
        return v.copy(), bit_cost(spec, d)
    if not np.any(v):
        return np.zeros_like(v), header_cost(spec, d)
    if spec.kind == "quantize":
        return quantize_s(v, spec.s, rng), bit_cost(spec, d)
    return sparsify_p(v, spec.p, rng), bit_cost(spec, d)


def quantize_rows_batch(v: np.ndarray, u: np.ndarray, s: int) -> np.ndarray:
    """Quantize many rows at once (validation fast path)."""
    norms = np.sqrt(np.einsum("ij,ij->i", v, v))
    return _kernels.quantize_rows(v, norms, u, s)


def sparsify_rows_batch(v: np.ndarray, u: np.ndarray, p: float) -> np.ndarray:
    return _kernels.sparsify_rows(v, u, p)
