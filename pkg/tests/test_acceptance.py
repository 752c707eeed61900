"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that is printed in the pytest terminal
summary. Criteria 5 and 6 share one training run of all four tiny systems
on the default desk corpus (about 20 minutes on one core).
"""

import time

import numpy as np
import pytest

from cdtcn import checks, cli, data, dsp, model, train
from cdtcn import numerics as nx
from cdtcn.metrics import neg_si_snr_loss, si_snr
from cdtcn.numerics import Tensor

SNRS = (-5.0, 5.0, 15.0)
EPOCHS = 30


@pytest.fixture(scope="module")
def desk_corpus(tmp_path_factory):
    t0 = time.perf_counter()
    manifest = data.build_corpus(data.CorpusSpec(out_dir=str(tmp_path_factory.mktemp("desk") / "corpus")))
    return manifest, time.perf_counter() - t0


def split_pairs(manifest, split, snr=None):
    recs = [r for r in manifest.split(split) if snr is None or r.snr_db == snr]
    return data.load_pairs(manifest, recs)


def unprocessed(pairs):
    return float(np.mean([si_snr(mix, clean) for mix, clean in pairs]))


# --- 1 ----------------------------------------------------------------------------------------


def test_c1_unprocessed_anchor(desk_corpus, criterion):
    manifest, build_s = desk_corpus
    t0 = time.perf_counter()
    means = {}
    for split in ("test_seen", "test_unseen"):
        for snr in SNRS:
            pairs = split_pairs(manifest, split, snr)
            assert len(pairs) == 30
            means[(split, snr)] = unprocessed(pairs)
    elapsed = build_s + time.perf_counter() - t0
    ok = all(abs(m - snr) <= 0.5 for (_, snr), m in means.items()) and elapsed < 30
    detail = "  ".join(f"{s}@{snr:+g}={m:.2f}" for (s, snr), m in means.items()) + f"  ({elapsed:.1f}s)"
    criterion(1, ok, detail)
    assert ok, detail


# --- 2 ----------------------------------------------------------------------------------------


def test_c2_reconstruction_identity(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = {}
    for cfg in ((512, 64, 32), (256, 16, 8)):
        for dtype in (np.float32, np.float64):
            err = 0.0
            for _ in range(10):
                x = rng.uniform(-1, 1, 16000).astype(dtype)
                y = dsp.istft(dsp.stft(x, *cfg))
                err = max(err, float(np.max(np.abs(y.astype(np.float64) - x))))
            worst[(cfg, np.dtype(dtype).name)] = err
    elapsed = time.perf_counter() - t0
    tol = {"float32": 1e-6, "float64": 1e-10}
    ok = all(e <= tol[dt] for (_, dt), e in worst.items()) and elapsed < 10
    detail = "  ".join(f"{c[0]}/{c[1]}/{c[2]} {dt}: {e:.1e}" for (c, dt), e in worst.items()) + f"  ({elapsed:.1f}s)"
    criterion(2, ok, detail)
    assert ok, detail


# --- 3 ----------------------------------------------------------------------------------------


def _primitive_cases():
    rng = np.random.default_rng(1)

    def r(*shape):
        return Tensor(rng.normal(size=shape))

    def away_from_zero(*shape):
        x = rng.normal(size=shape)
        return Tensor(np.where(np.abs(x) < 0.2, np.sign(x) * 0.2 + x, x))

    def weighted(f, shape):
        w = Tensor(rng.normal(size=shape))
        return lambda *a: nx.sum(nx.mul(f(*a), w))

    a, b = r(3, 5), r(3, 5)
    stft = dsp.StftOperator(32, 16, 8, "hann", center=True)
    stft_nc = dsp.StftOperator(64, 16, 8, "hann", center=False, n_rows=64)
    sig = r(60)
    spec = r(stft.n_rows, stft.frames_for(60))
    ref = rng.normal(size=40)
    proj = [(r(2, n, 1), r(2)) for n in (3, 4, 4)]
    return {
        "add": (weighted(nx.add, (3, 5)), [a, b]),
        "sub": (weighted(nx.sub, (3, 5)), [a, b]),
        "mul": (weighted(nx.mul, (3, 5)), [a, b]),
        "sigmoid": (weighted(nx.sigmoid, (3, 5)), [a]),
        "sigmoid_open": (weighted(lambda x: nx.sigmoid(x, open_interval=True), (3, 5)), [a]),
        "convex_mix": (weighted(nx.convex_mix, (3, 5)), [Tensor(rng.uniform(0.1, 0.9, (3, 5))), a, b]),
        "tanh": (weighted(nx.tanh, (3, 5)), [a]),
        "relu": (weighted(nx.relu, (3, 5)), [away_from_zero(3, 5)]),
        "prelu": (weighted(nx.prelu, (3, 5)), [away_from_zero(3, 5), r(3)]),
        "matmul": (weighted(nx.matmul, (3, 4)), [r(3, 6), r(6, 4)]),
        "concat": (weighted(lambda x, y: nx.concat([x, y], axis=0), (5, 4)), [r(2, 4), r(3, 4)]),
        "reduce_sum": (weighted(lambda x: nx.reduce("sum", x, axis=1), (3,)), [a]),
        "reduce_mean": (weighted(lambda x: nx.reduce("mean", x, axis=0), (5,)), [a]),
        "crop": (weighted(lambda x: nx.crop(x, 3), (3, 3)), [a]),
        "conv1d": (weighted(lambda x, w, c: nx.conv1d(x, w, c, stride=2, padding=2, dilation=2), (4, 10)),
                   [r(3, 20), r(4, 3, 3), r(4)]),
        "conv1d_pointwise": (weighted(lambda x, w, c: nx.conv1d(x, w, c), (4, 9)), [r(3, 9), r(4, 3, 1), r(4)]),
        "conv1d_depthwise": (weighted(lambda x, w, c: nx.conv1d(x, w, c, padding=2, dilation=2, groups=3), (3, 9)),
                             [r(3, 9), r(3, 1, 3), r(3)]),
        "conv1d_transpose": (weighted(lambda x, w: nx.conv1d_transpose(x, w, stride=4), (2, 32)),
                             [r(3, 7), r(3, 2, 8)]),
        "global_layer_norm": (weighted(nx.global_layer_norm, (3, 5)), [a, r(3), r(3)]),
        "frame": (weighted(lambda x: dsp.frame_t(x, 16, 8), (16, 7)), [r(60)]),
        "overlap_add": (weighted(lambda s: dsp.overlap_add_t(s, 8, dsp.hann(16)), (64,)), [r(16, 7)]),
        "stft_analyze": (weighted(stft.analyze, tuple(spec.shape)), [sig]),
        "stft_analyze_truncated": (weighted(stft_nc.analyze, (64, stft_nc.frames_for(60))), [r(60)]),
        "stft_synthesize": (weighted(lambda s: stft.synthesize(s, 60), (60,)), [spec]),
        "neg_si_snr_loss": (lambda e: neg_si_snr_loss([e], [ref]), [r(40)]),
        "conv_encode": (weighted(lambda x, U: model.conv_encode(x, U, 8, activation="none"), (4, 7)),
                        [r(60), r(4, 16)]),
        "learned_decode": (weighted(lambda D, V: model.learned_decode(D, V, 8, 60), (60,)), [r(4, 7), r(16, 4)]),
        "bpf_fuse": (weighted(lambda c, s: model.bpf_fuse(c, s, *proj), (2, 6)), [r(3, 6), r(4, 6)]),
    }


def test_c3_gradient_suite(criterion):
    t0 = time.perf_counter()
    step = dict(eps=checks.DEFAULT_EPS, stencil=checks.DEFAULT_STENCIL)
    prim = {name: nx.grad_check(f, inputs, **step) for name, (f, inputs) in _primitive_cases().items()}
    e2e = {(v, dt): checks.loss_gradient_error(v, dt) for v in model.PRESET_NAMES for dt in ("float64", "float32")}
    elapsed = time.perf_counter() - t0
    worst_prim = max(prim, key=prim.get)
    ok = (all(e <= 1e-6 for e in prim.values())
          and all(e <= checks.THRESHOLDS[dt] for (_, dt), e in e2e.items())
          and elapsed < 300)
    detail = (f"{len(prim)} primitives worst {worst_prim}={prim[worst_prim]:.1e}; end-to-end "
              + "  ".join(f"{v}/{dt[5:]}={e:.1e}" for (v, dt), e in e2e.items()) + f"  ({elapsed:.0f}s)")
    criterion(3, ok, detail)
    assert ok, detail


# --- 4 ----------------------------------------------------------------------------------------


def test_c4_bpf_invariants(criterion):
    rng = np.random.default_rng(2)
    n_c, n_s, d, K = 6, 5, 4, 12

    def proj(c_in, c_out, scale=1.0):
        return Tensor(scale * rng.normal(size=(c_out, c_in, 1))), Tensor(scale * rng.normal(size=c_out))

    gate_ok = hull_ok = True
    for i in range(1000):
        if i % 100 == 0:
            pc, ps, pm = proj(n_c, d), proj(n_s, d), proj(2 * d, d, scale=rng.uniform(0.1, 3.0))
        scale = 10 ** rng.uniform(-2, 1)
        Fc = Tensor(scale * rng.normal(size=(n_c, K)))
        Fs = Tensor(scale * rng.normal(size=(n_s, K)))
        fused, gate, a, b = model.bpf_fuse(Fc, Fs, pc, ps, pm, return_gate=True)
        gate_ok &= bool(np.all((gate.data > 0) & (gate.data < 1)))
        lo, hi = np.minimum(a.data, b.data), np.maximum(a.data, b.data)
        hull_ok &= bool(np.all((fused.data >= lo) & (fused.data <= hi)))

    Fc, Fs = Tensor(rng.normal(size=(n_c, K))), Tensor(rng.normal(size=(n_s, K)))
    one, g1, a, b = model.bpf_fuse(Fc, Fs, pc, ps, pm, return_gate=True, force_gate=1.0)
    zero, g0, _, _ = model.bpf_fuse(Fc, Fs, pc, ps, pm, return_gate=True, force_gate=0.0)
    limits_ok = (np.all(g1.data == 1.0) and np.array_equal(one.data, a.data)
                 and np.all(g0.data == 0.0) and np.array_equal(zero.data, b.data))
    ok = gate_ok and hull_ok and limits_ok
    detail = f"gate in (0,1): {gate_ok}; convex hull: {hull_ok}; M=1/M=0 limits exact: {bool(limits_ok)}"
    criterion(4, ok, detail)
    assert ok, detail


# --- 5, 6 ------------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained_systems(desk_corpus):
    manifest, _ = desk_corpus
    t0 = time.perf_counter()
    runs = {}
    for name in model.PRESET_NAMES:
        system = model.EnhancementSystem(model.tiny_config(name), seed=0)
        history = train.train(system, manifest, EPOCHS, batch_size=4, lr=1e-3, seed=0, clip=5.0)
        runs[name] = (system, history)
    return runs, time.perf_counter() - t0


def test_c5_toy_training_efficacy(desk_corpus, trained_systems, criterion):
    manifest, _ = desk_corpus
    runs, elapsed = trained_systems
    pairs = split_pairs(manifest, "test_seen", 5.0)
    base = unprocessed(pairs)
    gains = {name: train.evaluate(system, pairs) - base for name, (system, _) in runs.items()}
    need = {name: 5.0 if name == "cd-tcn-bpf" else 3.0 for name in runs}
    ok = all(gains[n] >= need[n] for n in runs) and elapsed <= 30 * 60
    ranking = " > ".join(sorted(gains, key=gains.get, reverse=True))
    detail = (f"unprocessed {base:.2f} dB; gains " + "  ".join(f"{n}=+{g:.2f}" for n, g in gains.items())
              + f"; order {ranking}  ({elapsed / 60:.1f} min)")
    criterion(5, ok, detail)
    assert ok, detail


def test_c6_seen_vs_unseen(desk_corpus, trained_systems, criterion):
    manifest, _ = desk_corpus
    runs, _ = trained_systems
    rows = {}
    for name, (system, _) in runs.items():
        for split in ("test_seen", "test_unseen"):
            pairs = split_pairs(manifest, split)
            rows[(name, split)] = (unprocessed(pairs), train.evaluate(system, pairs))
    main = "cd-tcn-bpf"
    ok = all(rows[(main, s)][1] > rows[(main, s)][0] for s in ("test_seen", "test_unseen"))
    detail = "  ".join(f"{n}/{s[5:]}: {u:.2f}->{e:.2f}" for (n, s), (u, e) in rows.items())
    criterion(6, ok, detail)
    assert ok, detail


def test_training_loss_decreases_early(trained_systems):
    runs, _ = trained_systems
    for name, (_, history) in runs.items():
        losses = [loss for _, loss, _ in history[:5]]
        rises = sum(b > a for a, b in zip(losses, losses[1:]))
        assert rises <= 1, (name, losses)


# --- 7 ----------------------------------------------------------------------------------------


def test_c7_determinism(desk_corpus, tmp_path, criterion):
    manifest, _ = desk_corpus
    cfg = tmp_path / "tiny.json"
    cfg.write_text(model.tiny_config("cd-tcn-bpf").to_json())
    manifest_path = f"{manifest.root}/manifest.jsonl"
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        code = cli.main(["train", "--manifest", manifest_path, "--variant", str(cfg), "--epochs", "2",
                         "--seed", "0", "--out", str(out)])
        assert code == 0
        outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    same = outs[0] == outs[1]
    ok = same and sorted(outs[0]) == ["epoch_001.ckpt", "epoch_002.ckpt", "history.csv"]
    criterion(7, ok, f"{len(outs[0])} files byte-identical across two runs: {same}")
    assert ok


# --- 8 ----------------------------------------------------------------------------------------


def test_c8_parameter_accounting(criterion):
    counts = {}
    for name in model.PRESET_NAMES:
        cfg = model.preset(name)
        counts[name] = (model.param_count(cfg), model.count_parameters(model.EnhancementSystem(cfg)))
    ok = all(a == b for a, b in counts.values())
    criterion(8, ok, "  ".join(f"{n}={a:,}/{b:,}" for n, (a, b) in counts.items()))
    assert ok
