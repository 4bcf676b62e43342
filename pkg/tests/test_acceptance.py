"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (or as a script).
"""

import time

import numpy as np
import pytest

from oracles import (pdnp1d_map, pdnp2d_map, plant_pdnp1d, plant_pdnp2d, pr1d_map, pr2d_map, pr2d_observe,
                     triple_convolution)
from tdmr_lab import codec, harness, laip
from tdmr_lab.archive import Archive, load_archive, save_archive
from tdmr_lab.equalize import H1D, H2D, TargetMask, _design_rows, design_mmse, orthogonality
from tdmr_lab.harness import TrainingProfile, ber_estimate, sign_test, user_bits_per_grain
from tdmr_lab.media import MediaGeometry, generate_medium, random_bits, read_block, write_block
from tdmr_lab.pdnp import (Pdnp1dModel, Pdnp2dModel, bcjr_pdnp1d, bcjr_pdnp2d, pdnp1d_residuals,
                           train_pdnp1d, train_pdnp2d)
from tdmr_lab.pipeline import PipelineConfig, make_strip, run
from tdmr_lab.quantize import ALPHA_BINS, ALPHA_CENTRE, train_lloyd_max
from tdmr_lab.trellis import bcjr_pr1d, bcjr_pr2d


@pytest.fixture
def report(capsys):
    def _report(n, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance] criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return _report


# ---------------------------------------------------------------------------
# 1. BCJR against exhaustive MAP enumeration


def _pdnp1d_model(rng, mask):
    return Pdnp1dModel(2, 1, 0, 2, np.asarray(mask), rng.normal(0, 0.3, (4, 2)), rng.uniform(0.3, 0.8, 4),
                       np.zeros(4, int))


def _pdnp2d_model(rng):
    n = 64
    P = rng.normal(0, 0.3, (n, 2, 2, 2))
    P[:, 0] = 0
    P[:, 0, 1, 0] = rng.normal(0, 0.3, n)
    return Pdnp2dModel(1, 1, 1, 11, rng.normal(0, 1, (n, 2)), P, rng.uniform(0.4, 1, (n, 2)), np.zeros(n, int))


def test_criterion_01_bcjr_exact(report):
    t0 = time.time()
    rng = np.random.default_rng(101)
    worst, count = 0.0, 0
    masks = [H1D] + [np.append(rng.uniform(-0.5, 0.5), [1.0, rng.uniform(-0.5, 0.5)]) for _ in range(3)]
    # PR1D trellis, AWGN
    for i in range(60):
        mask = masks[i % len(masks)]
        N, sigma = int(rng.integers(4, 13)), rng.uniform(0.3, 1.0)
        pre, post = rng.choice([-1.0, 1.0], 2), rng.choice([-1.0, 1.0], 1)
        u = rng.choice([-1.0, 1.0], N)
        full = np.concatenate([pre, u, post])
        y = np.array([mask @ full[k + 1:k + 4] for k in range(N)]) + sigma * rng.standard_normal(N)
        ap = None if i % 3 == 0 else rng.normal(0, 1.5, N)
        got = bcjr_pr1d(y, mask, sigma, ap, pre=pre, post=post)
        worst = max(worst, np.max(np.abs(got - pr1d_map(y, mask, sigma, ap, pre, post))))
        count += 1
    # three-track PR2D trellis, AWGN
    for i in range(10):
        N = 3
        U = rng.choice([-1.0, 1.0], (5, N + 4))
        sig = rng.uniform(0.4, 0.9, 3)
        z = pr2d_observe(U, H2D) + sig[:, None] * rng.standard_normal((3, N))
        ap = rng.normal(0, 1, (3, N))
        got = bcjr_pr2d(z, H2D, sig, U[0, 1:N + 3], U[4, 1:N + 3], ap, pre=U[1:4, :2], post=U[1:4, N + 2:N + 3])
        worst = max(worst, np.max(np.abs(got - pr2d_map(z, H2D, sig, U, ap))))
        count += 1
    # 1D-PDNP trellis on planted pattern-dependent noise
    for i in range(30):
        m = _pdnp1d_model(rng, masks[i % len(masks)])
        N, S, post_n = int(rng.integers(4, 9)), m.memory, m.lag + m.delta
        y, u = plant_pdnp1d(rng, S + N + post_n, m.coeffs, m.sigma, m.mask)
        pre, post, yb = u[:S], u[S + N:], y[S:S + N]
        ap = None if i % 2 else rng.normal(0, 1, N)
        got = bcjr_pdnp1d(yb, m, ap, pre=pre, post=post)
        worst = max(worst, np.max(np.abs(got - pdnp1d_map(yb, m, ap, pre, post))))
        count += 1
    # 2D-PDNP trellis on planted vector AR noise
    for i in range(10):
        m = _pdnp2d_model(rng)
        N = 4
        targets = rng.normal(0, 1, (4, 2))
        P1 = rng.uniform(-0.4, 0.4, (4, 2, 2))
        Lo = np.tile(np.eye(2), (4, 1, 1))
        y, u = plant_pdnp2d(rng, m.memory + N + m.I, targets, P1, Lo, rng.uniform(0.3, 0.6, (4, 2)))
        pre, post = u[:, :m.memory], u[:, m.memory + N:]
        yb = y[:, m.memory:m.memory + N]
        ap = rng.normal(0, 1, (2, N))
        got = bcjr_pdnp2d(yb, m, ap, pre=pre, post=post)
        worst = max(worst, np.max(np.abs(got - pdnp2d_map(yb, m, ap, pre, post))))
        count += 1
    dt = time.time() - t0
    report(1, count >= 100 and worst < 1e-9 and dt < 60,
           f"{count} instances, max |BCJR - MAP| = {worst:.2e}, {dt:.1f}s")


# ---------------------------------------------------------------------------
# 2-4. LAIP arithmetic


def _random_pmfs(rng, n):
    p = rng.random((n, ALPHA_BINS)) * (rng.random((n, ALPHA_BINS)) < 0.5)
    p[:, ALPHA_CENTRE] += 1e-3
    return p / p.sum(axis=1, keepdims=True)


def test_criterion_02_convolution_oracle(report):
    t0 = time.time()
    rng = np.random.default_rng(202)
    a, b, c = (_random_pmfs(rng, 1000) for _ in range(3))
    got = laip.total_influence(a, b, c)
    worst = max(np.max(np.abs(got[i] - triple_convolution(a[i], b[i], c[i]))) for i in range(1000))
    dt = time.time() - t0
    report(2, got.shape == (1000, 121) and worst < 1e-12 and dt < 10,
           f"1000 triples, max deviation {worst:.2e}, {dt:.2f}s")


def test_criterion_03_marginalization_oracle(report, tiny_detectors):
    rng = np.random.default_rng(303)
    worst, tables = 0.0, 0
    for key, t in sorted(tiny_detectors.tables.items()):
        if t.n_bits != 4:
            continue
        n = 25
        yb = rng.integers(10, 30, (n, len(t.y_labels)))
        got = laip.lookup_pmf(t, yb, p_plus=np.full((n, 4), 0.5))
        ref = np.zeros_like(got)
        for code in range(16):
            bits = np.tile(((code >> np.arange(3, -1, -1)) & 1) * 2 - 1, (n, 1))
            ref += laip.lookup_pmf(t, yb, bits=bits) / 16
        worst = max(worst, np.max(np.abs(got - ref)))
        tables += 1
    report(3, tables > 0 and worst < 1e-12, f"{tables} four-bit tables, max deviation {worst:.2e}")


def test_criterion_04_llr_arithmetic(report, tiny_detectors):
    p = np.zeros(ALPHA_BINS)
    p[10], p[20], p[30] = 0.6, 0.1, 0.3
    worked = abs(laip.compute_llr(p, 0.0) - np.log(0.65 / 0.35))
    sym = np.zeros(ALPHA_BINS)
    sym[[15, 25]] = 0.5
    zero = laip.compute_llr(sym, 0.0)
    # single decision: mirrored PMF and reading give the negated LLR bit for bit
    rng = np.random.default_rng(404)
    pm = _random_pmfs(rng, 500)
    y = rng.uniform(-2.2, 2.2, 500)
    mirrored = np.array_equal(laip.compute_llr(pm[:, ::-1], -y), -laip.compute_llr(pm, y))
    # full detector on anti-symmetrized tables
    det = tiny_detectors
    yy = rng.normal(0, 1, (3, 400))
    frame = rng.choice([-1.0, 1.0], (5, 402))
    a = laip.detect(yy, det.tables, det.quantizers, frame)
    b = laip.detect(-yy, det.tables, det.quantizers, -frame)
    refl = np.max(np.abs(a + b))
    report(4, worked < 1e-12 and zero == 0.0 and mirrored and refl < 1e-12,
           f"worked case err {worked:.1e}, symmetric LLR {zero}, single-step mirror exact {mirrored}, "
           f"detector max |L(y)+L(-y)| = {refl:.1e}")


# ---------------------------------------------------------------------------
# 5-6. Exact arithmetic and trellis sizes


def test_criterion_05_table_arithmetic(report):
    gpb = 3.491
    ug = [harness.report_value(user_bits_per_grain(r, gpb)) for r in (0.6600, 0.7050, 0.6683)]
    bounds = [f"{ber_estimate(0, n):.4e}" for n in (2_553_191, 7_659_574)]
    frames = [ber_estimate(0, n) for n in (100, 300)]
    ok = (ug == ["0.1891", "0.2020", "0.1914"] and bounds == ["1.1750e-06", "3.9167e-07"]
          and frames == [0.03, 0.01])
    report(5, ok, f"U/G {ug}, bounds {bounds}, frame bounds {frames}")


def test_criterion_06_trellis_sizes(report):
    rng = np.random.default_rng(606)
    m1 = Pdnp1dModel(4, 6, 1, 2, H1D, np.zeros((2 ** 8, 4)), np.ones(2 ** 8), np.zeros(2 ** 8, int))
    sizes = [m1.states]
    for Np in (1, 2):
        n = 64
        P = np.zeros((n, Np + 1, 2, 2))
        sizes.append(Pdnp2dModel(Np, 1, 1, 11, rng.normal(0, 1, (n, 2)), P, np.ones((n, 2)),
                                 np.zeros(n, int)).states)
    report(6, sizes == [128, 64, 256], f"states 1D-PDNP {sizes[0]}, 2D-PDNP {sizes[1]} / {sizes[2]}")


# ---------------------------------------------------------------------------
# 7. PDNP plant and recover


def test_criterion_07_pdnp_plant_recover(report):
    t0 = time.time()
    rng = np.random.default_rng(707)
    a = np.array([[0.5, -0.2], [0.3, 0.1], [-0.4, 0.2], [0.1, 0.3]])
    s = np.array([0.3, 0.5, 0.4, 0.6])
    y, u = plant_pdnp1d(rng, 10 ** 6, a, s, H1D)
    m = train_pdnp1d(y, u, L=2, M=1, delta=0, I=2)
    err1 = max(np.max(np.abs(m.coeffs - a)), np.max(np.abs(m.sigma - s)))
    res = pdnp1d_residuals(m, y, u)
    raw = pdnp1d_residuals(Pdnp1dModel(2, 1, 0, 2, H1D, np.zeros((4, 2)), np.ones(4), m.counts), y, u)
    gain1 = np.mean(raw ** 2) / np.mean(res ** 2)

    targets = np.array([[-1.2, -1.1], [1.0, -0.9], [-0.8, 1.1], [1.3, 1.2]])
    P1 = rng.uniform(-0.4, 0.4, (4, 2, 2))
    Lo = np.array([[[1, 0], [l, 1]] for l in (0.3, -0.2, 0.5, 0.0)], dtype=float)
    lam = rng.uniform(0.3, 0.6, (4, 2))
    y2, u2 = plant_pdnp2d(rng, 10 ** 6, targets, P1, Lo, lam)
    m2 = train_pdnp2d(y2, u2, Np=1, I=0, J=0)
    Li = np.linalg.inv(Lo)
    err2 = max(np.max(np.abs(m2.targets - targets)), np.max(np.abs(m2.P[:, 1] - Li @ P1)),
               np.max(np.abs(m2.P[:, 0] - (np.eye(2) - Li))), np.max(np.abs(m2.lam - lam)))
    # prediction gain: whitened residual power never exceeds the raw noise power
    cols = (u2[0] > 0) + 2 * (u2[1] > 0)
    n = (y2 - m2.targets[cols].T).T
    e = n[1:] - np.einsum("kij,kj->ki", m2.P[cols[1:], 0], n[1:]) - np.einsum("kij,kj->ki", m2.P[cols[1:], 1], n[:-1])
    gain2 = np.mean(n[1:] ** 2, axis=0) / np.mean(e ** 2, axis=0)
    dt = time.time() - t0
    ok = err1 < 2e-2 and err2 < 2e-2 and gain1 >= 1 and np.all(gain2 >= 1) and dt < 120
    report(7, ok, f"1D max err {err1:.2e} (gain {gain1:.3f}), 2D max err {err2:.2e} "
                  f"(gain {np.round(gain2, 3).tolist()}), {dt:.1f}s")


# ---------------------------------------------------------------------------
# 8-9. Equalizer and quantizer optimality


def test_criterion_08_mmse_optimality(report):
    m = generate_medium(MediaGeometry(), 5, 6000, 808)
    bits = random_bits(np.random.default_rng(808), (5, 6000))
    blocks = [(read_block(write_block(m, bits, seed=808 + r), [1, 2, 3]), bits) for r in range(2)]
    ortho = 0.0
    for target, io in ((TargetMask.fr(), "per-track"), (TargetMask.pr2d(), "3to3"), (TargetMask.pr1d(), "3to1")):
        spec = design_mmse(blocks, target, io, 15)
        X = np.vstack([_design_rows(r, b, target, io, 15)[0] for r, b in blocks])
        d = np.concatenate([_design_rows(r, b, target, io, 15)[1] for r, b in blocks])
        ortho = max(ortho, orthogonality(X, d, spec.taps.ravel()))
    rng = np.random.default_rng(809)
    ls = 0.0
    for i in range(5):
        b = random_bits(rng, (5, 400)).astype(float)
        h = rng.normal(0, 0.3, 4)
        h[1] = 1.0
        r = np.stack([np.convolve(b[t], h, "same") for t in (1, 2, 3)]) + 0.2 * rng.standard_normal((3, 400))
        for target, io in ((TargetMask.pr1d(), "3to1"), (TargetMask.pr2d(), "3to3")):
            spec = design_mmse([(r, b)], target, io, 5)
            X, d = _design_rows(r, b, target, io, 5)
            ls = max(ls, np.max(np.abs(spec.taps.ravel() - np.linalg.lstsq(X, d, rcond=None)[0])))
    report(8, ortho < 1e-6 and ls < 1e-8, f"max normalized residual correlation {ortho:.2e}, "
                                          f"max |taps - least squares| {ls:.2e}")


def test_criterion_09_lloyd_max(report):
    rng = np.random.default_rng(909)
    q = train_lloyd_max(rng.uniform(-2, 2, 10 ** 6), 4)
    uni = max(np.max(np.abs(q.bin_boundaries - [-1, 0, 1])),
              np.max(np.abs(q.reproduction_levels - [-1.5, -0.5, 0.5, 1.5])))
    g = train_lloyd_max(rng.standard_normal(10 ** 6), 2)
    c = np.sqrt(2 / np.pi)
    gau = max(abs(g.bin_boundaries[0]), np.max(np.abs(g.reproduction_levels - [-c, c])))
    mono = True
    for bins in (3, 8, 40):
        for x in (rng.gamma(2.0, 1.0, 20000), rng.standard_normal(20000), rng.laplace(0, 1, 20000)):
            h = np.array(train_lloyd_max(x, bins).mse_history)
            mono &= bool(np.all(np.diff(h) <= 1e-12 * h[0]))
    report(9, uni < 0.02 and gau < 0.02 and mono,
           f"uniform err {uni:.3e}, gaussian err {gau:.3e}, MSE monotone {mono}")


# ---------------------------------------------------------------------------
# 10. LAIP table invariants


def test_criterion_10_table_invariants(report, tiny_detectors, tmp_path):
    rng = np.random.default_rng(1010)
    sums = anti = point = True
    worst = 0.0
    for (group, variant), t in tiny_detectors.tables.items():
        s = np.add.reduceat(t.prob, t.indptr[:-1])
        worst = max(worst, float(np.max(np.abs(s - 1))))
        rows = laip.lookup_rows(t, laip.reflect_key(t.keys, len(t.y_labels), t.n_bits))
        anti &= bool(np.all(rows >= 0)) and np.array_equal(t.dense(), t.dense(rows)[:, ::-1])
        universe = 40 ** len(t.y_labels) * 2 ** t.n_bits
        cand = rng.integers(0, universe, 200)
        missing = np.setdiff1d(cand, t.keys)[:20]
        if len(missing):
            yb, code = laip.unpack_key(missing, len(t.y_labels), t.n_bits)
            bits = ((code[:, None] >> np.arange(t.n_bits - 1, -1, -1)) & 1) * 2 - 1 if t.n_bits else None
            pm = laip.lookup_pmf(t, yb, bits=bits)
            delta = np.zeros(ALPHA_BINS)
            delta[ALPHA_CENTRE] = 1.0
            point &= np.array_equal(pm, np.tile(delta, (len(missing), 1)))
    sums = worst <= 1e-12
    a, b = tmp_path / "a.laip", tmp_path / "b.laip"
    save_archive(a, Archive.from_detectors(tiny_detectors, MediaGeometry()))
    save_archive(b, load_archive(a))
    exact = a.read_bytes() == b.read_bytes()
    report(10, sums and anti and point and exact,
           f"{len(tiny_detectors.tables)} tables, max |sum-1| {worst:.1e}, anti-symmetric {anti}, "
           f"unseen -> centre point mass {point}, archive byte-exact {exact}")


# ---------------------------------------------------------------------------
# 11. End-to-end ordering at desk scale


def test_criterion_11_end_to_end_ordering(report):
    t0 = time.time()
    det = harness.train_detectors(profile=TrainingProfile(), seed=0)
    cfg = PipelineConfig(boundary_mode="threshold")
    res = harness.run_experiment(cfg, det, 30, root_seed=0, baselines=("no-apriori", "pdnp2d"))
    raw = res.ber("raw")
    tests = {"laip < raw": ("laip", "raw"),
             "bcjr < bcjr without a-priori": ("bcjr", "bcjr_noapriori"),
             "centre bcjr < 2D-PDNP": ("bcjr_t1", "pdnp2d_t1")}
    parts, ok = [], abs(raw - 0.185) <= 0.03
    for label, (good, bad) in tests.items():
        wins, n, p = sign_test(res.stage_series(good), res.stage_series(bad))
        ok &= p < 0.01
        parts.append(f"{label}: {res.ber(good):.4f} vs {res.ber(bad):.4f} ({wins}/{n}, p={p:.1e})")
    dt = time.time() - t0
    ok &= dt < 1800 and res.trials >= 30
    report(11, ok, f"{res.trials} trials, raw BER {raw:.4f}, final {res.ber('final'):.2e}; "
                   + "; ".join(parts) + f"; {dt:.0f}s")


# ---------------------------------------------------------------------------
# 12. Pipeline contracts


def test_criterion_12_pipeline_contracts(report, tiny_detectors, monkeypatch):
    seen = []
    real = codec.decode

    def spy(spec, coset, x, **kw):
        seen.append(np.asarray(x).copy())
        return real(spec, coset, x, **kw)

    monkeypatch.setattr(codec, "decode", spy)
    cfg = PipelineConfig()
    strip = make_strip(cfg, 12)
    medium = generate_medium(MediaGeometry(), 5, strip.written.shape[1], 1212)
    rec = run(cfg, tiny_detectors, medium, strip, seed=12)
    x = seen[0].reshape(3, -1)
    bound = all(np.max(np.abs(x[t])) <= cfg.w1[t] * cfg.clip + 1e-12 for t in range(3))
    bound &= rec.decoder1_input_max <= cfg.clip
    one_shot = rec.decoder_calls == {"decoder1": 1, "decoder2": 1} and len(seen) == 2

    rng = np.random.default_rng(1212)
    c = codec.CosetSpec(7, 3, 1000)
    v = rng.normal(size=(3, 1000))
    inter = np.array_equal(codec.deinterleave(c, codec.interleave(c, v)), v)
    inter &= np.array_equal(codec.interleave(c, codec.deinterleave(c, v)), v)

    spec = codec.CodeSpec(1000, 0.66, seed=3)
    info = rng.integers(0, 2, (2, spec.k))
    cw = codec.puncture(spec, codec.encode(spec, info))
    cos = rng.integers(0, 2, spec.n_tx).astype(np.int8)
    noise = 0.7 * rng.normal(size=cw.shape)
    plain = codec.decode(spec, None, 2 * (2.0 * cw - 1 + noise) / 0.49, w=0.7, clip=10.0)
    y = 2.0 * (cw ^ cos) - 1 + np.where(cos > 0, -noise, noise)
    coded = codec.decode(spec, cos, 2 * y / 0.49, w=0.7, clip=10.0)
    transparent = (np.array_equal(plain.info_llrs, coded.info_llrs)
                   and np.array_equal(codec.apply_coset(cos, plain.coded_llrs), coded.coded_llrs))
    report(12, bound and one_shot and inter and transparent,
           f"clip-then-weight bound {bound} (max {rec.decoder1_input_max:.2f} before weighting), "
           f"one-shot {one_shot}, interleave round trip {inter}, coset transparency {transparent}")


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-v"]))
