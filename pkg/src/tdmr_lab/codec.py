"""Systematic IRA codes with parity puncturing, row interleaving and coset decoding.

Bits are 0/1 internally; channel symbols are ``2 * b - 1`` and all LLRs use
``log P(b=1) / P(b=0)``, i.e. ``log P(+1) / P(-1)``.

Construction: every information bit is repeated (degree 3 or 8), the repeated
copies are permuted and cut into groups of ``grouping`` consecutive copies, and
parity ``p_j = p_{j-1} xor (xor of group j)``.  The parity part of H is
therefore lower bidiagonal and the code is full rank.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .seeding import stage_rng

DEGREES = (3, 8)
DEGREE_MIX = (0.8, 0.2)   # fraction of info bits per repeat degree
GROUPING = 4
PHI_MAX = 40.0


@dataclass(frozen=True)
class CodeSpec:
    k: int
    rate: float
    seed: int = 0
    degrees: tuple = DEGREES
    mix: tuple = DEGREE_MIX
    grouping: int = GROUPING
    H: sp.csr_matrix = field(init=False, repr=False, compare=False)
    groups: np.ndarray = field(init=False, repr=False, compare=False)
    kept_parity: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.k < 8:
            raise ValueError("information length too small")
        H, groups = _build(self.k, self.degrees, self.mix, self.grouping, self.seed)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "groups", groups)
        m = H.shape[0]
        n_tx = math.ceil(self.k / self.rate)
        kept = n_tx - self.k
        if not 0 < self.rate < 1 or kept < 0 or kept > m:
            raise ValueError(f"rate {self.rate} not reachable (mother rate {self.k / (self.k + m):.4f})")
        # uniform stride over the parity positions
        object.__setattr__(self, "kept_parity", np.floor(np.arange(kept) * m / max(kept, 1)).astype(np.int64))

    @property
    def m(self) -> int:
        return self.H.shape[0]

    @property
    def n(self) -> int:
        return self.k + self.m

    @property
    def n_tx(self) -> int:
        return self.k + len(self.kept_parity)

    @property
    def achieved_rate(self) -> float:
        return self.k / self.n_tx

    @property
    def transmitted(self) -> np.ndarray:
        """Codeword positions that are sent, in transmission order."""
        return np.concatenate([np.arange(self.k), self.k + self.kept_parity])

    def digest(self) -> str:
        key = f"{self.k}|{self.rate}|{self.seed}|{self.degrees}|{self.mix}|{self.grouping}"
        return hashlib.sha1(key.encode()).hexdigest()[:12]


def _build(k, degrees, mix, grouping, seed):
    rng = stage_rng(seed, "codec.ira", k)
    counts = np.floor(np.asarray(mix) * k).astype(int)
    counts[0] += k - counts.sum()
    deg = np.repeat(degrees, counts)
    rng.shuffle(deg)
    copies = np.repeat(np.arange(k), deg)
    extra = (-len(copies)) % grouping
    if extra:
        # top up with extra copies of the lowest-degree bits so groups are full
        copies = np.concatenate([copies, rng.choice(np.flatnonzero(deg == deg.min()), extra, replace=False)])
    perm = rng.permutation(len(copies))
    copies = copies[perm].reshape(-1, grouping)
    # a bit appearing twice in one check would cancel; swap duplicates away
    for _ in range(1000):
        srt = np.sort(copies, axis=1)
        bad = np.flatnonzero(np.any(srt[:, 1:] == srt[:, :-1], axis=1))
        if len(bad) == 0:
            break
        for r in bad:
            o = rng.integers(len(copies))
            c1, c2 = rng.integers(grouping, size=2)
            copies[r, c1], copies[o, c2] = copies[o, c2], copies[r, c1]
    else:
        raise RuntimeError("could not separate repeated bits")
    m = copies.shape[0]
    rows = np.concatenate([np.repeat(np.arange(m), grouping), np.arange(m), np.arange(1, m)])
    cols = np.concatenate([copies.ravel(), k + np.arange(m), k + np.arange(m - 1)])
    H = sp.csr_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(m, k + m))
    return H, copies


def encode(spec: CodeSpec, info: np.ndarray) -> np.ndarray:
    """Full (unpunctured) systematic codeword ``[info, parity]`` of 0/1 bits."""
    info = np.asarray(info, dtype=np.int64)
    if info.shape[-1] != spec.k:
        raise ValueError(f"expected {spec.k} information bits, got {info.shape[-1]}")
    group_xor = np.bitwise_xor.reduce(info[..., spec.groups], axis=-1)
    parity = np.bitwise_xor.accumulate(group_xor, axis=-1)
    return np.concatenate([info, parity], axis=-1).astype(np.int8)


def syndrome(spec: CodeSpec, codeword: np.ndarray) -> np.ndarray:
    return (spec.H @ np.asarray(codeword, dtype=np.int64).T).T % 2


def puncture(spec: CodeSpec, codeword: np.ndarray) -> np.ndarray:
    return np.asarray(codeword)[..., spec.transmitted]


def depuncture(spec: CodeSpec, llrs: np.ndarray) -> np.ndarray:
    """Place transmitted LLRs in codeword order; punctured parity gets 0."""
    llrs = np.asarray(llrs, dtype=np.float64)
    out = np.zeros(llrs.shape[:-1] + (spec.n,))
    out[..., spec.transmitted] = llrs
    return out


# ---------------------------------------------------------------------------
# Coset and interleaving


@dataclass(frozen=True)
class CosetSpec:
    """Seeded coset bits and a row permutation for each track."""

    seed: int
    tracks: int
    length: int

    def coset(self, track: int) -> np.ndarray:
        return stage_rng(self.seed, "codec.coset", track).integers(0, 2, self.length).astype(np.int8)

    def permutation(self, track: int) -> np.ndarray:
        return stage_rng(self.seed, "codec.interleave", track).permutation(self.length)


def interleave(coset: CosetSpec, block: np.ndarray) -> np.ndarray:
    block = np.atleast_2d(block)
    if block.shape[1] != coset.length:
        raise ValueError(f"row length {block.shape[1]} != interleaver length {coset.length}")
    out = np.empty_like(block)
    for t in range(block.shape[0]):
        out[t, coset.permutation(t)] = block[t]
    return out


def deinterleave(coset: CosetSpec, block: np.ndarray) -> np.ndarray:
    block = np.atleast_2d(block)
    if block.shape[1] != coset.length:
        raise ValueError(f"row length {block.shape[1]} != interleaver length {coset.length}")
    return np.stack([block[t, coset.permutation(t)] for t in range(block.shape[0])])


def apply_coset(coset_bits: np.ndarray, llrs: np.ndarray) -> np.ndarray:
    """Flip LLR signs where the coset bit is 1 (self-inverse)."""
    return np.where(np.asarray(coset_bits) > 0, -llrs, llrs)


# ---------------------------------------------------------------------------
# Sum-product decoding


def _phi(x):
    x = np.clip(x, 1e-12, PHI_MAX)
    return -np.log(np.tanh(x / 2))


@dataclass
class DecodeResult:
    info_llrs: np.ndarray
    coded_llrs: np.ndarray     # transmitted positions, transmission order
    converged: np.ndarray      # per codeword
    iterations: int


class _Graph:
    def __init__(self, H: sp.csr_matrix):
        coo = H.tocoo()
        order = np.lexsort((coo.col, coo.row))
        self.chk = coo.row[order]
        self.var = coo.col[order]
        E = len(self.chk)
        self.C = sp.csr_matrix((np.ones(E), (self.chk, np.arange(E))), shape=(H.shape[0], E))
        self.V = sp.csr_matrix((np.ones(E), (self.var, np.arange(E))), shape=(H.shape[1], E))


_GRAPHS: dict[int, _Graph] = {}


def _graph(spec: CodeSpec) -> _Graph:
    key = id(spec.H)
    if key not in _GRAPHS:
        _GRAPHS[key] = _Graph(spec.H)
    return _GRAPHS[key]


def spa_decode(spec: CodeSpec, llrs: np.ndarray, max_iters: int = 50) -> tuple[np.ndarray, np.ndarray, int]:
    """Sum-product over full-length codeword LLRs ``(B, n)``; returns posteriors."""
    g = _graph(spec)
    L = -np.atleast_2d(np.asarray(llrs, dtype=np.float64))   # log P(0)/P(1) inside
    B = L.shape[0]
    v2c = L[:, g.var]
    total = L.copy()
    converged = np.zeros(B, dtype=bool)
    it = 0
    for it in range(1, max_iters + 1):
        mag = _phi(np.abs(v2c))
        neg = (v2c < 0).astype(np.float64)
        smag = (g.C @ mag.T).T
        sneg = (g.C @ neg.T).T
        c_mag = _phi(smag[:, g.chk] - mag)
        c_sign = 1 - 2 * ((sneg[:, g.chk] - neg) % 2)
        c2v = c_sign * c_mag
        total = L + (g.V @ c2v.T).T
        v2c = total[:, g.var] - c2v
        hard = (total < 0).astype(np.int64)
        converged = ~np.any((spec.H @ hard.T).T % 2, axis=1)
        if converged.all():
            break
    return -total, converged, it


def decode(spec: CodeSpec, coset_bits: np.ndarray | None, channel_llrs: np.ndarray, w: float = 1.0,
           clip: float | None = None, max_iters: int = 50) -> DecodeResult:
    """Clip, weight, undo the coset and decode transmitted-order LLRs ``(B, n_tx)``.

    Output coded LLRs are mapped back through the coset, so they describe the
    written bits again.
    """
    x = np.atleast_2d(np.asarray(channel_llrs, dtype=np.float64))
    if x.shape[1] != spec.n_tx:
        raise ValueError(f"expected {spec.n_tx} LLRs per codeword, got {x.shape[1]}")
    if clip is not None:
        x = np.clip(x, -clip, clip)
    x = w * x
    if coset_bits is not None:
        x = apply_coset(coset_bits, x)
    post, conv, it = spa_decode(spec, depuncture(spec, x), max_iters)
    coded = post[:, spec.transmitted]
    if coset_bits is not None:
        coded = apply_coset(coset_bits, coded)
    return DecodeResult(post[:, :spec.k], coded, conv, it)
