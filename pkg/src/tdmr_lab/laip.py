"""Local-area-influence probabilistic (LAIP) detector: table training and detection.

Neighbourhood of a target bit U (row offset, column offset)::

    F(-1,-1)  A(-1,0)  E(-1,+1)
    B( 0,-1)  U( 0,0)  D( 0,+1)
    G(+1,-1)  C(+1,0)  H(+1,+1)

Cells are numbered ``3 * (dt + 1) + (dk + 1)``, the same order as the bits of a
training pattern index.

A table stores PMFs over the 41 alpha bins for one bit group (FAE, BD or GCH),
conditioned on quantized readings (40 bins each) and optionally on bits.  The
conditioning key packs the reading bins in base 40 (first axis most
significant), then the bit code in base 2 (first bit most significant, 1 = +1).
Keys that were never observed map to the point mass on the centre alpha bin.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit

from .equalize import EqualizerSpec, apply_equalizer
from .media import TrainingFile
from .quantize import ALPHA_BINS, ALPHA_CENTRE, QuantizerSpec, alpha_bin, quantize

log = logging.getLogger(__name__)

Y_BINS = 40
LLR_CLAMP = 30.0
SMOOTH_KERNEL = (0.25, 0.5, 0.25)

LABELS = "FAEBUDGCH"
CELL = {name: i for i, name in enumerate(LABELS)}
OFFSET = {name: (i // 3 - 1, i % 3 - 1) for i, name in enumerate(LABELS)}

GROUPS = {"FAE": "FAE", "BD": "BD", "GCH": "GCH"}
FLIP_MASK = {g: sum(1 << CELL[c] for c in cells) for g, cells in GROUPS.items()}

# variant -> reading labels per group; bits are always the group plus U
VARIANTS: dict[tuple[str, str], str] = {
    ("FAE", "full"): "FAEU", ("FAE", "nobits"): "FAEU", ("FAE", "top"): "U",
    ("FAE", "first"): "AEU", ("FAE", "last"): "FAU",
    ("BD", "full"): "BDU", ("BD", "nobits"): "BDU",
    ("BD", "first"): "DU", ("BD", "last"): "BU",
    ("GCH", "full"): "GCHU", ("GCH", "nobits"): "GCHU", ("GCH", "bottom"): "U",
    ("GCH", "first"): "CHU", ("GCH", "last"): "GCU",
}


def _bit_labels(group: str, variant: str) -> str:
    return "" if variant == "nobits" else GROUPS[group] + "U"


@dataclass(frozen=True)
class PmfTable:
    """Sparse conditional PMF table in compressed-row form."""

    group: str
    variant: str
    keys: np.ndarray      # sorted int64 conditioning keys
    indptr: np.ndarray    # (len(keys) + 1,) row offsets
    alpha: np.ndarray     # (nnz,) alpha bins, int16
    prob: np.ndarray      # (nnz,) probabilities

    @property
    def y_labels(self) -> str:
        return VARIANTS[(self.group, self.variant)]

    @property
    def bit_labels(self) -> str:
        return _bit_labels(self.group, self.variant)

    @property
    def n_bits(self) -> int:
        return len(self.bit_labels)

    def __len__(self) -> int:
        return len(self.keys)

    def dense(self, rows: np.ndarray | None = None) -> np.ndarray:
        """Dense ``(rows, 41)`` PMFs for stored rows (all rows by default)."""
        rows = np.arange(len(self.keys)) if rows is None else np.asarray(rows)
        out = np.zeros((len(rows), ALPHA_BINS))
        for j, r in enumerate(rows):
            s = slice(self.indptr[r], self.indptr[r + 1])
            out[j, self.alpha[s]] = self.prob[s]
        return out


def pack_key(ybins: np.ndarray, code: np.ndarray | None, n_bits: int) -> np.ndarray:
    """Conditioning key from ``(n, axes)`` reading bins and a bit code."""
    ybins = np.asarray(ybins, dtype=np.int64)
    key = np.zeros(ybins.shape[0], dtype=np.int64)
    for i in range(ybins.shape[1]):
        key = key * Y_BINS + ybins[:, i]
    key = key << n_bits
    if n_bits:
        key = key + np.asarray(code, dtype=np.int64)
    return key


def unpack_key(key: np.ndarray, n_y: int, n_bits: int) -> tuple[np.ndarray, np.ndarray]:
    key = np.asarray(key, dtype=np.int64)
    code = key & ((1 << n_bits) - 1)
    rest = key >> n_bits
    digits = np.empty((len(key), n_y), dtype=np.int64)
    for i in range(n_y - 1, -1, -1):
        digits[:, i] = rest % Y_BINS
        rest = rest // Y_BINS
    return digits, code


def bit_code(bits: np.ndarray) -> np.ndarray:
    """Pack ``(n, nb)`` +/-1 bits, first column most significant."""
    bits = np.asarray(bits)
    code = np.zeros(bits.shape[0], dtype=np.int64)
    for i in range(bits.shape[1]):
        code = 2 * code + (bits[:, i] > 0)
    return code


# ---------------------------------------------------------------------------
# Sparse (key, alpha, weight) triplets


def _aggregate(key, a, w):
    combo = key * ALPHA_BINS + a
    uniq, inv = np.unique(combo, return_inverse=True)
    return uniq // ALPHA_BINS, uniq % ALPHA_BINS, np.bincount(inv, weights=w)


def smooth_counts(key, a, w, n_y: int, n_bits: int, kernel=SMOOTH_KERNEL):
    """Separable smoothing of sparse counts along every reading axis.

    Mass shifted past the first or last bin is dropped; the later normalisation
    absorbs it.
    """
    for axis in range(n_y):
        place = Y_BINS ** (n_y - 1 - axis) << n_bits
        digit = (key // place) % Y_BINS
        parts_k, parts_a, parts_w = [], [], []
        for shift, c in zip((-1, 0, 1), kernel):
            ok = (digit + shift >= 0) & (digit + shift < Y_BINS)
            parts_k.append(key[ok] + shift * place)
            parts_a.append(a[ok])
            parts_w.append(w[ok] * c)
        key, a, w = _aggregate(np.concatenate(parts_k), np.concatenate(parts_a),
                               np.concatenate(parts_w))
    return key, a, w


def reflect_key(key, n_y: int, n_bits: int) -> np.ndarray:
    digits, code = unpack_key(key, n_y, n_bits)
    return pack_key(Y_BINS - 1 - digits, (1 << n_bits) - 1 - code, n_bits)


def _normalise(key, a, w):
    uniq, inv = np.unique(key, return_inverse=True)
    tot = np.bincount(inv, weights=w)
    return w / tot[inv]


def antisymmetrise(key, a, p, n_y: int, n_bits: int):
    """Average each PMF with its reflection ``(39 - y, -bits, 40 - alpha)``.

    A conditioning tuple whose reflection was never stored is averaged with the
    centre point mass, so the result is exactly anti-symmetric under lookup.
    """
    rkey = reflect_key(key, n_y, n_bits)
    present = np.unique(key)
    rpresent = np.unique(rkey)
    # rows that exist only as reflections get a centre point mass of their own
    only_r = np.setdiff1d(rpresent, present)
    k_all = np.concatenate([key, rkey, only_r, reflect_key(only_r, n_y, n_bits)])
    a_all = np.concatenate([a, ALPHA_BINS - 1 - a,
                            np.full(len(only_r), ALPHA_CENTRE),
                            np.full(len(only_r), ALPHA_CENTRE)])
    p_all = np.concatenate([p, p, np.ones(len(only_r)), np.ones(len(only_r))])
    k_all, a_all, p_all = _aggregate(k_all, a_all, 0.5 * p_all)
    return k_all, a_all, p_all


def _to_table(group, variant, key, a, p) -> PmfTable:
    order = np.lexsort((a, key))
    key, a, p = key[order], a[order], p[order]
    keys, starts = np.unique(key, return_index=True)
    indptr = np.append(starts, len(key)).astype(np.int64)
    return PmfTable(group, variant, keys, indptr, a.astype(np.int16), p)


def build_table(group: str, variant: str, ybins: np.ndarray, code: np.ndarray | None,
                abin: np.ndarray, weights: np.ndarray | None = None, smooth: bool = True,
                symmetrise: bool = True) -> PmfTable:
    """Counts -> (smoothing) -> normalisation -> (anti-symmetrisation) -> table."""
    n_y = len(VARIANTS[(group, variant)])
    n_bits = len(_bit_labels(group, variant))
    if ybins.shape[1] != n_y:
        raise ValueError(f"{group}/{variant} expects {n_y} reading axes")
    if len(abin) == 0:
        raise ValueError("empty training set")
    key = pack_key(ybins, code, n_bits)
    w = np.ones(len(key)) if weights is None else np.asarray(weights, dtype=np.float64)
    key, a, w = _aggregate(key, np.asarray(abin, dtype=np.int64), w)
    if smooth:
        key, a, w = smooth_counts(key, a, w, n_y, n_bits)
    p = _normalise(key, a, w)
    if symmetrise:
        key, a, p = antisymmetrise(key, a, p, n_y, n_bits)
    return _to_table(group, variant, key, a, p)


# ---------------------------------------------------------------------------
# Training


def estimate_lai(y_with, y_without) -> float:
    """``mean((y_with - y_without) / 2)`` over paired occurrences."""
    y1 = np.asarray(y_with, dtype=np.float64)
    y2 = np.asarray(y_without, dtype=np.float64)
    if y1.size == 0:
        raise ValueError("no occurrences")
    return float(np.mean((y1 - y2) / 2))


@dataclass
class TrainingStats:
    """Per-pattern neighbourhood bins and mean centre reading from the designed files."""

    bins: list            # pattern -> (occurrences, 9) uint8 reading bins
    mean_u: np.ndarray    # (512,)
    count: np.ndarray     # (512,)

    def alpha(self, group: str) -> np.ndarray:
        """Averaged influence of flipping ``group`` for every pattern."""
        p = np.arange(512)
        return (self.mean_u - self.mean_u[p ^ FLIP_MASK[group]]) / 2


def collect_training(files: Iterable[TrainingFile], quantizers: Sequence[QuantizerSpec],
                     equalizer: EqualizerSpec | None, centre_columns: np.ndarray) -> TrainingStats:
    """Quantize the 3x3 readings around every pattern centre and average ``y_U``."""
    if len(quantizers) != 3:
        raise ValueError("need one quantizer per reader track")
    sums = np.zeros(512)
    count = np.zeros(512, dtype=np.int64)
    bins: list[list[np.ndarray]] = [[] for _ in range(512)]
    cols = np.asarray(centre_columns)
    for tf in files:
        y = tf.samples if equalizer is None else apply_equalizer(equalizer, tf.samples)
        q = np.stack([quantize(quantizers[t], y[t]) for t in range(3)])
        nb = np.stack([q[1 + dt, cols + dk] for dt, dk in OFFSET.values()], axis=1)
        bins[tf.pattern].append(nb.astype(np.uint8))
        sums[tf.pattern] += y[1, cols].sum()
        count[tf.pattern] += len(cols)
    if np.any(count == 0):
        raise ValueError("training set does not cover all 512 patterns")
    return TrainingStats([np.concatenate(b) for b in bins], sums / count, count)


def train_tables(stats: TrainingStats, smooth: bool = True, symmetrise: bool = True,
                 variants: Iterable[tuple[str, str]] | None = None) -> dict[tuple[str, str], PmfTable]:
    """Build every table variant from collected training statistics."""
    variants = list(VARIANTS) if variants is None else list(variants)
    pat_bits = np.stack([(p >> np.arange(9)) & 1 for p in range(512)]) * 2 - 1
    occ = np.concatenate([np.full(len(b), p) for p, b in enumerate(stats.bins)])
    nb = np.concatenate(stats.bins).astype(np.int64)
    alphas = {g: alpha_bin(stats.alpha(g)) for g in GROUPS}
    tables = {}
    for group, variant in variants:
        ycells = [CELL[c] for c in VARIANTS[(group, variant)]]
        bcells = [CELL[c] for c in _bit_labels(group, variant)]
        code = bit_code(pat_bits[occ][:, bcells]) if bcells else None
        tables[(group, variant)] = build_table(group, variant, nb[:, ycells], code,
                                               alphas[group][occ], smooth=smooth,
                                               symmetrise=symmetrise)
        log.info("table %s/%s: %d keys", group, variant, len(tables[(group, variant)]))
    return tables


# ---------------------------------------------------------------------------
# Lookup and detection


def lookup_rows(table: PmfTable, keys: np.ndarray) -> np.ndarray:
    """Row index per key, -1 when absent."""
    idx = np.searchsorted(table.keys, keys)
    idx = np.minimum(idx, len(table.keys) - 1)
    return np.where(table.keys[idx] == keys, idx, -1)


def gather_pmfs(table: PmfTable, keys: np.ndarray, weights: np.ndarray | None = None,
                out_rows: np.ndarray | None = None, n_out: int | None = None) -> np.ndarray:
    """Weighted sum of stored PMFs into output rows; absent keys add a centre point mass."""
    keys = np.asarray(keys, dtype=np.int64)
    w = np.ones(len(keys)) if weights is None else np.asarray(weights, dtype=np.float64)
    out_rows = np.arange(len(keys)) if out_rows is None else np.asarray(out_rows)
    n_out = len(keys) if n_out is None else n_out
    rows = lookup_rows(table, keys)
    hit = rows >= 0
    lens = np.where(hit, table.indptr[rows + 1] - table.indptr[np.maximum(rows, 0)], 0)
    src = np.repeat(np.where(hit, table.indptr[np.maximum(rows, 0)], 0), lens)
    src = src + np.arange(lens.sum()) - np.repeat(np.cumsum(lens) - lens, lens)
    flat = np.repeat(out_rows, lens) * ALPHA_BINS + table.alpha[src]
    out = np.bincount(flat, weights=table.prob[src] * np.repeat(w, lens),
                      minlength=n_out * ALPHA_BINS).reshape(n_out, ALPHA_BINS)
    miss = ~hit
    np.add.at(out, (out_rows[miss], ALPHA_CENTRE), w[miss])
    return out


def lookup_pmf(table: PmfTable, ybins: np.ndarray, bits: np.ndarray | None = None,
               p_plus: np.ndarray | None = None, p_minus: np.ndarray | None = None) -> np.ndarray:
    """PMFs ``(n, 41)`` for reading bins ``(n, axes)``.

    For bit-conditioned tables give either exact ``bits`` ``(n, nb)`` or
    ``p_plus`` ``(n, nb)`` = P(bit = +1) to marginalize over all bit codes.
    ``p_minus`` defaults to ``1 - p_plus``; passing it avoids cancellation when
    the probabilities come from saturated LLRs.
    """
    ybins = np.atleast_2d(np.asarray(ybins, dtype=np.int64))
    n = ybins.shape[0]
    nb = table.n_bits
    if nb == 0:
        return gather_pmfs(table, pack_key(ybins, None, 0))
    if bits is not None:
        return gather_pmfs(table, pack_key(ybins, bit_code(np.atleast_2d(bits)), nb))
    if p_plus is None:
        raise ValueError("bit-conditioned table needs bits or probabilities")
    p_plus = np.atleast_2d(np.asarray(p_plus, dtype=np.float64))
    p_minus = 1 - p_plus if p_minus is None else np.atleast_2d(np.asarray(p_minus, dtype=np.float64))
    codes = np.arange(2 ** nb)
    # weight[i, c] = prod_j P(bit_j of code c)
    cbits = (codes[:, None] >> (nb - 1 - np.arange(nb))[None, :]) & 1        # (C, nb)
    w = np.prod(np.where(cbits[None] == 1, p_plus[:, None, :], p_minus[:, None, :]), axis=2)
    base = pack_key(ybins, np.zeros(n, dtype=np.int64), nb)
    keys = (base[:, None] + codes[None, :]).ravel()
    rows = np.repeat(np.arange(n), len(codes))
    keep = w.ravel() > 0
    return gather_pmfs(table, keys[keep], w.ravel()[keep], rows[keep], n)


def convolve_pmfs(*pmfs: np.ndarray) -> np.ndarray:
    """Row-wise discrete convolution of PMFs on the 0.1-step alpha grid."""
    out = np.atleast_2d(pmfs[0])
    for p in pmfs[1:]:
        p = np.atleast_2d(p)
        res = np.zeros((max(len(out), len(p)), out.shape[1] + p.shape[1] - 1))
        for i in range(p.shape[1]):
            res[:, i:i + out.shape[1]] += p[:, i:i + 1] * out
        out = res
    return out


def total_influence(pmf_fae, pmf_bd, pmf_gch) -> np.ndarray:
    """PMF of the summed influence on the extended 121-bin grid (-6 .. 6)."""
    single = np.ndim(pmf_fae) == 1
    out = convolve_pmfs(pmf_fae, pmf_bd, pmf_gch)
    return out[0] if single else out


def fold_pmf(pmf: np.ndarray) -> np.ndarray:
    """Fold extended-grid mass outside [-2, 2] into the end bins of the 41-bin grid."""
    pmf = np.atleast_2d(pmf)
    n = pmf.shape[1]
    if n == ALPHA_BINS:
        return pmf
    lo = (n - ALPHA_BINS) // 2
    out = pmf[:, lo:lo + ALPHA_BINS].copy()
    out[:, 0] += pmf[:, :lo].sum(axis=1)
    out[:, -1] += pmf[:, lo + ALPHA_BINS:].sum(axis=1)
    return out


def compute_llr(pmf_total: np.ndarray, y_u) -> np.ndarray:
    """``log (P(a < y) + P_ovw/2) / (P(a > y) + P_ovw/2)`` with ``P_ovw`` the mass in y's bin."""
    single = np.ndim(pmf_total) == 1
    pmf = fold_pmf(pmf_total)
    y = np.atleast_1d(np.asarray(y_u, dtype=np.float64))
    b = np.atleast_1d(alpha_bin(y))
    # both tails as direct partial sums (a difference of totals loses small tails)
    cum = np.cumsum(pmf, axis=1)
    rcum = np.cumsum(pmf[:, ::-1], axis=1)[:, ::-1]
    rows = np.arange(len(pmf))
    last = pmf.shape[1] - 1
    below = np.where(b > 0, cum[rows, np.maximum(b - 1, 0)], 0.0)
    ovw = pmf[rows, b]
    above = np.where(b < last, rcum[rows, np.minimum(b + 1, last)], 0.0)
    num = below + ovw / 2
    den = above + ovw / 2
    with np.errstate(divide="ignore"):
        llr = np.log(num) - np.log(den)
    llr = np.clip(np.nan_to_num(llr, nan=0.0), -LLR_CLAMP, LLR_CLAMP)
    return llr[0] if single else llr


def _variant_map(group: str, t: np.ndarray, k: np.ndarray, N: int, interior: str) -> np.ndarray:
    v = np.full(t.shape, interior, dtype=object)
    v[k == 0] = "first"
    v[k == N - 1] = "last"
    if group == "FAE":
        v[t == 0] = "top"
    if group == "GCH":
        v[t == 2] = "bottom"
    return v


def detect(equalized: np.ndarray, tables: dict, quantizers: Sequence[QuantizerSpec],
           boundary: np.ndarray, a_priori: np.ndarray | None = None, self_loops: int = 5,
           history: list | None = None) -> np.ndarray:
    """LAIP LLRs ``(3, N)`` for three equalized tracks.

    ``boundary`` is a ``(5, N + 2)`` +/-1 frame: rows 0 and 4 are the tracks above
    and below the readers and columns 0 and ``N + 1`` the bits just outside the
    block; interior entries are ignored.  The first loop uses the bit-free tables
    (or ``a_priori`` with the full tables when given); later loops marginalize
    over the previous loop's decisions.  Boundary variants marginalize unknown
    bits uniformly in the first loop.
    """
    y = np.asarray(equalized, dtype=np.float64)
    if y.shape[0] != 3:
        raise ValueError("LAIP detection needs three tracks")
    N = y.shape[1]
    if N < 2:
        raise ValueError("block too short")
    boundary = np.asarray(boundary, dtype=np.float64)
    if boundary.shape != (5, N + 2):
        raise ValueError(f"boundary frame must be (5, {N + 2})")
    q = np.stack([quantize(quantizers[t], y[t]) for t in range(3)]).astype(np.int64)
    t_idx, k_idx = np.divmod(np.arange(3 * N), N)
    # bit beliefs as LLRs: known boundary bits are infinite, unknown ones 0
    with np.errstate(divide="ignore"):
        frame = np.where(boundary > 0, np.inf, np.where(boundary < 0, -np.inf, 0.0))
    llr = None
    for loop in range(self_loops):
        if llr is None and a_priori is None:
            frame[1:4, 1:N + 1] = 0.0
            interior = "nobits"
        else:
            frame[1:4, 1:N + 1] = a_priori if llr is None else llr
            interior = "full"
        p_plus, p_minus = expit(frame), expit(-frame)
        pmfs = []
        for group in GROUPS:
            var = _variant_map(group, t_idx, k_idx, N, interior)
            pm = np.zeros((3 * N, ALPHA_BINS))
            for name in np.unique(var):
                sel = np.flatnonzero(var == name)
                table = tables[(group, name)]
                ts, ks = t_idx[sel], k_idx[sel]
                yb = np.stack([q[ts + OFFSET[c][0], ks + OFFSET[c][1]] for c in table.y_labels], axis=1)
                if table.n_bits:
                    at = [(ts + 1 + OFFSET[c][0], ks + 1 + OFFSET[c][1]) for c in table.bit_labels]
                    pm[sel] = lookup_pmf(table, yb, p_plus=np.stack([p_plus[i] for i in at], axis=1),
                                         p_minus=np.stack([p_minus[i] for i in at], axis=1))
                else:
                    pm[sel] = lookup_pmf(table, yb)
            pmfs.append(pm)
        new = compute_llr(total_influence(*pmfs), y.ravel()).reshape(3, N)
        if history is not None:
            history.append(new)
        llr = new
    return llr
