"""Acceptance gate: one test per criterion, each printing a single PASS/FAIL line.

The training-based criteria run at desk scale (about 60 glyphs per class,
15 epochs, micro-batch 32).  Run just this module with

    pytest tests/test_acceptance.py -v -s
"""

import logging
import struct
import time

import numpy as np
import pytest

from dynlora import tensor as T
from dynlora.adapter import prune
from dynlora.checkpoint import CheckpointFormatError, decode, encode
from dynlora.cli import main
from dynlora.config import TrainConfig
from dynlora.glyphgen import FAMILIES, GlyphDataset, GlyphFormatError, decode_gly1, generate_dataset, write_gly1
from dynlora.metrics import read_csv
from dynlora.model import GlyphTransformerConfig, init_params
from dynlora.tensor import Tensor, precision
from dynlora.trainer import TaskSpec, count_parameters, configure_mode, replay_accuracy_matrix, train_sequential

from conftest import numgrad, rel_err

# desk-scale training profile shared by the training criteria
DESK = TrainConfig(lr=3e-3, micro_batch=32, accumulation_steps=1, max_epochs=15, early_stop_patience=5,
                   augment=False)
FULL_FT_LR = 1e-3
PER_CLASS, TEST_PER_CLASS = 60, 15

_DATA: dict = {}


def task(family: int, per_class: int = PER_CLASS, seed: int = 0) -> TaskSpec:
    key = (family, per_class, seed)
    if key not in _DATA:
        _DATA[key] = TaskSpec(f"family{family}", generate_dataset(family, per_class, seed, "train"),
                              generate_dataset(family, TEST_PER_CLASS, seed, "test"))
    return _DATA[key]


def total_rank(result) -> int:
    return sum(result.active_ranks[-1].values())


# --- 1 ------------------------------------------------------------------------

def test_criterion_1_merge_equivalence(verdict):
    t0 = time.perf_counter()
    worst = {}
    for dtype in (np.float32, np.float64):
        rng = np.random.default_rng(1)
        with precision(dtype):
            model = init_params(GlyphTransformerConfig(n_classes=10), seed=0)
            model.attach_adapters(seed=0)
            x = rng.random((2, 48, 48)).astype(dtype)
            base = {k: lin.weight.data.copy() for k, lin in model.linears.items()}
            err = 0.0
            for _ in range(100):
                for k, ad in model.adapters.items():
                    ad.a.data[...] = rng.normal(0, 1 / 8, ad.a.shape)
                    ad.b.data[...] = rng.normal(0, 0.05, ad.b.shape)
                    ad.w.data[...] = rng.normal(0, 1, ad.w.shape)
                    ad.active[...] = True
                    prune(ad, float(rng.uniform(0, 0.5)))
                factored = model.forward(x).data
                kept = model.adapters
                model.merge_adapters()
                merged = model.forward(x).data
                err = max(err, float(np.max(np.abs(factored - merged))))
                for k, ad in kept.items():
                    model.linears[k].weight.data = base[k].copy()
                    model.linears[k].adapter = ad
            worst[np.dtype(dtype).name] = err
    secs = time.perf_counter() - t0
    ok = worst["float32"] < 1e-5 and worst["float64"] < 1e-10 and secs < 10
    assert verdict(1, ok, f"max |logit diff| f32 {worst['float32']:.2e} (<1e-5), "
                          f"f64 {worst['float64']:.2e} (<1e-10), {secs:.1f}s (<10s)")


# --- 2 ------------------------------------------------------------------------

OPS = {
    "matmul": (T.matmul, [(4, 5), (5, 3)]),
    "matmul_batched": (T.matmul, [(2, 3, 4), (2, 4, 3)]),
    "transpose": (lambda x: T.transpose(x, (0, 2, 1)), [(2, 3, 4)]),
    "reshape": (lambda x: T.reshape(x, (4, 6)), [(2, 3, 4)]),
    "tile": (lambda x: T.tile(x, 3), [(2, 4)]),
    "add": (T.add, [(3, 4), (3, 4)]),
    "sub": (T.sub, [(3, 4), (3, 4)]),
    "mul": (T.mul, [(3, 4), (3, 4)]),
    "mul_scalar": (lambda x: T.mul_scalar(x, 0.37), [(3, 4)]),
    "relu": (T.relu, [(4, 5)]),
    "gelu": (T.gelu, [(4, 5)]),
    "sum_all": (T.sum_all, [(3, 4)]),
    "mean": (lambda x: T.mean(x, 1), [(2, 5, 3)]),
    "softmax": (T.softmax, [(3, 6)]),
    "layernorm": (lambda x, g, b: T.layernorm(x, g, b), [(4, 6), (6,), (6,)]),
    "cross_entropy": (lambda z: T.cross_entropy(z, np.array([1, 0, 3])), [(3, 4)]),
}
MICRO = GlyphTransformerConfig(image_side=8, patch_side=4, d_model=8, n_heads=2, n_layers=2, d_ff=12, n_classes=3)


def _op_error(fn, shapes, seed) -> float:
    rng = np.random.default_rng(seed)
    xs = [Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]
    out = fn(*xs)
    R = rng.normal(size=out.shape)
    f = lambda: float(np.sum(fn(*xs).data * R))
    T.sum_all(T.mul(out, Tensor(R))).backward()
    return max(rel_err(x.grad, numgrad(f, x.data)) for x in xs)


def _end_to_end_error(seed) -> float:
    rng = np.random.default_rng(seed)
    m = init_params(MICRO, seed=seed)
    for p in m.params.values():
        p.data = p.data + rng.normal(0, 0.3, p.shape)
        p.requires_grad = True
    m.attach_adapters(r_max=2, seed=seed)
    for ad in m.adapters.values():
        ad.b.data[...] = rng.normal(0, 0.3, ad.b.shape)
    x, y = rng.random((3, 8, 8)), np.array([2, 0, 1])
    loss = lambda: T.cross_entropy(m.forward(x), y)
    loss().backward()
    leaves = [p for p in m.params.values() if p.requires_grad]
    leaves += [t for ad in m.adapters.values() for t in ad.parameters()]
    return max(rel_err(t.grad, numgrad(lambda: loss().item(), t.data), floor=1e-6) for t in leaves)


def test_criterion_2_gradient_suite(verdict):
    t0 = time.perf_counter()
    with precision(np.float64):
        op_err = max(_op_error(fn, shapes, s) for fn, shapes in OPS.values() for s in range(5))
        e2e_err = max(_end_to_end_error(s) for s in range(5))
    secs = time.perf_counter() - t0
    ok = op_err < 1e-4 and e2e_err < 1e-3 and secs < 60
    assert verdict(2, ok, f"{len(OPS)} ops max rel err {op_err:.1e} (<1e-4), end-to-end {e2e_err:.1e} (<1e-3), "
                          f"seeds 0-4, {secs:.1f}s (<60s)")


# --- 3 ------------------------------------------------------------------------

def test_criterion_3_degeneracy(verdict):
    data = task(0)
    losses = {}
    with precision(np.float64):
        for mode in ("dynamic", "fixed_rank"):
            cfg = TrainConfig(mode=mode, lambda_sparsity=0.0, prune_epsilon=None, max_steps=50, pretrain_epochs=0)
            res = train_sequential([data], cfg)
            losses[mode] = res.task_results[0].step_losses
    a, b = losses["dynamic"], losses["fixed_rank"]
    ok = len(a) == 50 and a == b
    assert verdict(3, ok, f"{len(a)} steps, 64-bit, identical per-step losses: {a == b} "
                          f"(final {a[-1]:.6f} vs {b[-1]:.6f})")


# --- 4 ------------------------------------------------------------------------

def test_criterion_4_sparsity_monotone(verdict):
    t0 = time.perf_counter()
    data = task(3)
    ranks, pruned = [], []
    for lam in (0.0, 1e-4, 1e-3, 1e-2):
        res = train_sequential([data], DESK.with_(lambda_sparsity=lam, seed=0))
        ranks.append(total_rank(res))
        pruned.append(sum(r.n_pruned for r in res.task_results[0].prune_reports))
    secs = time.perf_counter() - t0
    monotone = all(b <= a for a, b in zip(ranks, ranks[1:]))
    ok = monotone and pruned[-1] >= 1 and secs < 15 * 60
    assert verdict(4, ok, f"total active rank for lambda 0/1e-4/1e-3/1e-2 = {ranks}, "
                          f"pruned at 1e-2: {pruned[-1]}, {secs / 60:.1f} min (<15)")


# --- 5 ------------------------------------------------------------------------

def test_criterion_5_capacity_direction(verdict):
    # both families get the same number of training glyphs (1800), hence the same step budget
    per_class = {3: PER_CLASS, 0: PER_CLASS * FAMILIES[3][0] // FAMILIES[0][0]}
    ranks = {0: [], 3: []}
    for seed in (0, 1, 2):
        for fam in (0, 3):
            res = train_sequential([task(fam, per_class[fam], seed)], DESK.with_(lambda_sparsity=1e-3, seed=seed))
            ranks[fam].append(total_rank(res))
    m0, m3 = np.mean(ranks[0]), np.mean(ranks[3])
    assert verdict(5, m3 >= m0, f"mean active rank complexity-3 {m3:.1f} {ranks[3]} >= "
                                f"complexity-1 {m0:.1f} {ranks[0]} (lambda 1e-3, seeds 0-2)")


# --- 6 ------------------------------------------------------------------------

def test_criterion_6_table_structure(verdict):
    t0 = time.perf_counter()
    rows, ok = [], True
    for fam in sorted(FAMILIES):
        data = task(fam)
        majority = np.bincount(data.test.labels).max() / len(data.test)
        dyn = train_sequential([data], DESK)
        full = train_sequential([data], DESK.with_(mode="full_ft", lr=FULL_FT_LR))
        a_d, a_f = dyn.R[0, 0], full.R[0, 0]
        n_d, n_f = dyn.trainable_params[0], full.trainable_params[0]
        margins = min(a_d, a_f) - majority >= 0.30
        ratio_ok = a_d >= 0.9 * a_f
        params_ok = n_d < 0.05 * n_f
        ok &= margins and ratio_ok and params_ok
        rows.append(f"f{fam}: dyn {a_d:.3f} full {a_f:.3f} maj {majority:.3f} ratio {a_d / a_f:.2f} "
                    f"params {n_d}/{n_f}={n_d / n_f:.1%}")
    secs = time.perf_counter() - t0
    ok &= secs < 2 * 3600
    assert verdict(6, ok, "; ".join(rows) + f"; {secs / 60:.1f} min "
                          "(need +30pt over majority, >=90% of full_ft, <5% params, <2h)")


# --- 7 ------------------------------------------------------------------------

def test_criterion_7_sequential_protocol(verdict, tmp_path, caplog):
    tasks = [task(f, 30) for f in sorted(FAMILIES)]
    with caplog.at_level(logging.INFO, logger="dynlora.trainer"):
        res = train_sequential(tasks, DESK.with_(max_epochs=8), checkpoint_dir=tmp_path)
    replay = replay_accuracy_matrix(res.checkpoints, tasks)
    lower = ~np.isnan(res.R)
    same_R = np.array_equal(np.isnan(replay), np.isnan(res.R)) and np.array_equal(replay[lower], res.R[lower])
    F = res.forgetting
    F_replay = [replay[t, t] - replay[t, -1] for t in range(len(tasks) - 1)]
    logged = [r.getMessage() for r in caplog.records if "trainable params" in r.getMessage()]
    figures = (len(res.trainable_params) == 4 and len(res.checkpoint_sizes) == 4
               and all(s > 0 for s in res.checkpoint_sizes) and len(logged) == 4)
    ok = len(F) == 3 and F == F_replay and same_R and figures
    assert verdict(7, ok, f"F = {[round(f, 4) for f in F]} equals replay: {F == F_replay}; "
                          f"trainable {res.trainable_params}; checkpoint bytes {res.checkpoint_sizes}")


# --- 8 ------------------------------------------------------------------------

def _gly1_bytes(ds: GlyphDataset, tmp_path) -> bytes:
    p = tmp_path / "t.gly1"
    write_gly1(ds, p)
    return p.read_bytes()


def test_criterion_8_format_round_trips(verdict, tmp_path):
    rng = np.random.default_rng(8)
    gly_ok = dlra_ok = True
    for _ in range(1000):
        n, h, w = rng.integers(0, 5), rng.integers(1, 10), rng.integers(1, 10)
        C = int(rng.integers(1, 2000))
        ds = GlyphDataset(rng.integers(0, 256, (n, h, w), dtype=np.uint8), rng.integers(0, C, n), C,
                          int(rng.integers(0, 256)))
        raw = _gly1_bytes(ds, tmp_path)
        back = decode_gly1(raw)
        gly_ok &= (back.images.tobytes() == ds.images.tobytes() and np.array_equal(back.labels, ds.labels)
                   and back.n_classes == C and back.family == ds.family and _gly1_bytes(back, tmp_path) == raw)
        entries = {}
        for i in range(rng.integers(0, 5)):
            shape = tuple(int(s) for s in rng.integers(0, 4, rng.integers(0, 4)))
            kind = rng.integers(3)
            arr = (rng.integers(0, 256, shape).astype(np.uint8) if kind == 2
                   else rng.normal(size=shape).astype(np.float32 if kind == 0 else np.float64))
            entries[f"layer.{i}.lora.w"] = arr
        enc = encode(entries)
        dec = decode(enc)
        dlra_ok &= (list(dec) == list(entries) and encode(dec) == enc
                    and all(dec[k].tobytes() == v.tobytes() and dec[k].dtype == v.dtype for k, v in entries.items()))

    # corrupted headers: every case must raise the format error
    good_g = _gly1_bytes(generate_dataset(0, 2), tmp_path)
    good_d = encode({"x": np.zeros((2, 2), np.float32)})
    headers = [(decode_gly1, GlyphFormatError, b"XLY1" + good_g[4:]),
               (decode_gly1, GlyphFormatError, good_g[:20]),
               (decode_gly1, GlyphFormatError, b""),
               (decode_gly1, GlyphFormatError, good_g[:4] + struct.pack("<I", 10**6) + good_g[8:]),
               (decode_gly1, GlyphFormatError, good_g[:8] + struct.pack("<I", 47) + good_g[12:]),
               (decode_gly1, GlyphFormatError, good_g[:16] + struct.pack("<I", 1) + good_g[20:]),
               (decode, CheckpointFormatError, b"DLRB" + good_d[4:]),
               (decode, CheckpointFormatError, good_d[:4] + struct.pack("<I", 9) + good_d[8:]),
               (decode, CheckpointFormatError, good_d[:8] + struct.pack("<I", 5) + good_d[12:]),
               (decode, CheckpointFormatError, good_d[:8] + struct.pack("<I", 0) + good_d[12:]),
               (decode, CheckpointFormatError, good_d[:11]),
               (decode, CheckpointFormatError, good_d[:15] + bytes([7]) + good_d[16:]),
               (decode, CheckpointFormatError, good_d[:17] + struct.pack("<I", 3) + good_d[21:])]
    raised = 0
    for fn, err, buf in headers:
        try:
            fn(buf)
        except err:
            raised += 1
    # byte-level fuzz over both headers: a format error or a clean decode, never another exception
    crashes = 0
    fuzz = [(decode_gly1, GlyphFormatError, good_g, p) for p in range(21)]
    fuzz += [(decode, CheckpointFormatError, good_d, p) for p in range(len(good_d) - 16)]
    for fn, err, good, pos in fuzz:
        for val in range(256):
            try:
                fn(good[:pos] + bytes([val]) + good[pos + 1:])
            except err:
                pass
            except Exception:
                crashes += 1
    ok = gly_ok and dlra_ok and raised == len(headers) and crashes == 0
    assert verdict(8, ok, f"GLY1 1000/1000 bit-exact: {gly_ok}; DLRA 1000/1000 bit-exact: {dlra_ok}; "
                          f"{raised}/{len(headers)} corrupted headers -> format error; "
                          f"{256 * len(fuzz)} header byte mutations, {crashes} crashes")


# --- 9 ------------------------------------------------------------------------

def test_criterion_9_ablation_harness(verdict, tmp_path):
    # family 0 at the same 1800-glyph budget as criterion 5 (180 validation glyphs for early stopping)
    data = task(0, PER_CLASS * FAMILIES[3][0] // FAMILIES[0][0])
    d = tmp_path / "family0"
    d.mkdir()
    write_gly1(data.train, d / "train.gly1")
    write_gly1(data.test, d / "test.gly1")
    cfg = tmp_path / "ablate.cfg"
    cfg.write_text(f"lr = {DESK.lr}\nmicro_batch = {DESK.micro_batch}\naccumulation_steps = 1\n"
                   f"max_epochs = {DESK.max_epochs}\npatience = {DESK.early_stop_patience}\n"
                   "lambda = 1e-3\nmode = dynamic\ntasks = family0\n")
    out = tmp_path / "out"
    code = main(["ablate", "--config", str(cfg), "--out", str(out), "--components",
                 "dynamic_rank,mlp,attention,sparsity", "--seeds", "0,1,2", "--no-augment"])
    acc = {c: v for c, _, m, v in read_csv(out / "report.csv") if m == "accuracy"}
    md = (out / "report.md").read_text()
    table = [l for l in md.splitlines() if l.startswith("| ") and not l.startswith("| Disabled")]
    full = acc["full"]
    worst = {c: acc[c] for c in acc if c != "full"}
    ok = code == 0 and len(table) == 4 and all(full >= v - 0.02 for v in worst.values())
    detail = ", ".join(f"{c} {v:.3f}" for c, v in worst.items())
    assert verdict(9, ok, f"{len(table)}-row report; full {full:.3f} vs {detail} (need full >= each - 0.02)")


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-v"]))
