"""The ten acceptance criteria, each printed as one PASS/FAIL line in the terminal summary.

Criteria 6, 7, 8 and 10 train desk-scale models on synthetic slides and take
roughly an hour on one core in total; the rest finish in seconds.
"""

import statistics
import time
import warnings

import numpy as np
import pytest

from awmf.checkpoint import dumps, load_bundle, loads
from awmf.inference import evaluate, expert_agreement, predict_all, segment_slide
from awmf.metrics import confusion, miou, op_accuracy, pc_accuracy, stitch_masks
from awmf.networks import ModelBundle, crop_and_upsample, integrated_forward
from awmf.objectives import (
    class_weights,
    dice_targets_batch,
    dice_weight_targets,
    mse_weight_loss,
    one_hot,
    total_loss,
)
from awmf.pyramid import Slide, SynthConfig, extract_triplets, prepare_dataset, stack_triplets, synth_generate
from awmf.tensor import (
    BatchNormState,
    Parameter,
    batch_norm,
    concat_channels,
    conv2d,
    div,
    elu,
    fully_connected,
    getitem,
    global_avg_pool,
    log,
    max_pool2d,
    mul,
    relu,
    reshape,
    scale_by_scalar,
    sigmoid,
    softmax_channels,
    square,
    tmean,
    tsum,
    upsample,
)
from awmf.trainer import (
    TrainConfig,
    build_bundle,
    end_to_end_epoch,
    expert_alphas,
    generate_weight_targets,
    pretrain_experts,
    run_training,
    train_weighting_epoch,
)

from conftest import tiny_config
from helpers import confusion_oracle, conv_oracle, dice_oracle, fd_check, pool_oracle, scores_oracle

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)
DESK = dict(window=32, expert_widths=(8, 16, 32), weighting_widths=(8, 16, 32, 64), aggregator_width=8,
            lr=1e-3, batch_size=8, pretrain_epochs=4, max_epochs=6, patience=5)
N_SLIDES, N_TRAIN = 16, 12
RESULTS = {}


def report(n, ok, detail):
    RESULTS[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(RESULTS[n])
    assert ok, detail


def quiet_miou(cm):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return miou(cm)


# ----------------------------------------------------------------- desk-scale runs

def desk_dataset(n_classes, seed):
    cfg = SynthConfig(n_classes=n_classes)
    slides = [synth_generate(cfg, seed=[seed, i], identifier=f"s{seed}_{i}") for i in range(N_SLIDES)]
    return prepare_dataset(slides[:N_TRAIN], slides[N_TRAIN:], DESK["window"], seed=seed)


def desk_run(n_classes, seed, out_root):
    """Pre-train once, then train the adaptive and the fixed-weight model from the same experts."""
    data = desk_dataset(n_classes, seed)
    cfg = TrainConfig(n_classes=n_classes, seed=seed, **DESK)
    t0 = time.perf_counter()
    pre = pretrain_experts(build_bundle(cfg), data, cfg)
    t_pre = time.perf_counter() - t0
    snapshot = pre.copy()
    t1 = time.perf_counter()
    run_training(cfg, data, out_root / f"m{n_classes}_s{seed}_adaptive", pre.copy())
    t_adaptive = time.perf_counter() - t1
    fixed_cfg = TrainConfig(n_classes=n_classes, seed=seed, weighting="fixed", **DESK)
    t2 = time.perf_counter()
    run_training(fixed_cfg, data, out_root / f"m{n_classes}_s{seed}_fixed", pre.copy())
    t_fixed = time.perf_counter() - t2
    adaptive = load_bundle(out_root / f"m{n_classes}_s{seed}_adaptive" / "best.awmf")
    fixed = load_bundle(out_root / f"m{n_classes}_s{seed}_fixed" / "best.awmf")
    scores = {k: quiet_miou(v) for k, v in evaluate(adaptive, data.test).items()}
    scores["fixed_run"] = quiet_miou(evaluate(fixed, data.test, variants=("fixed",))["fixed"])
    return {
        "data": data, "pretrained": snapshot, "adaptive": adaptive, "fixed": fixed, "scores": scores,
        "seconds": {"pretrain": t_pre, "adaptive": t_adaptive, "fixed": t_fixed},
    }


@pytest.fixture(scope="session")
def four_class_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk4")
    return {seed: desk_run(4, seed, root) for seed in SEEDS}


@pytest.fixture(scope="session")
def two_class_run(tmp_path_factory):
    return desk_run(2, 0, tmp_path_factory.mktemp("desk2"))


# ----------------------------------------------------------------- 1

def _primitive_cases(rng):
    def p(shape, name, scale=1.0, positive=False):
        data = rng.standard_normal(shape) * scale
        return Parameter(np.abs(data) + 0.5 if positive else data, name)

    x = p((2, 2, 6, 6), "x")
    k = p((3, 2, 3, 3), "k")
    b = p((3,), "b")
    w6 = rng.standard_normal((2, 3, 6, 6))
    cases = {
        "conv2d same": ([x, k, b], lambda: tsum(conv2d(x, k, b, 1, "same") * w6)),
        "conv2d reflect": ([x, k, b], lambda: tsum(conv2d(x, k, b, 1, "reflect") * w6)),
        "conv2d valid stride 2": ([x, k, b],
                                  lambda: tsum(conv2d(x, k, b, 2, "valid") * w6[:, :, :2, :2])),
    }
    y = p((2, 3, 4, 4), "y")
    w44 = rng.standard_normal((2, 3, 4, 4))
    cases.update({
        "max_pool2d": ([y], lambda: tsum(max_pool2d(y, 2) * w44[:, :, :2, :2])),
        "upsample nearest": ([y], lambda: tsum(upsample(y, 2, "nearest") * np.tile(w44, (1, 1, 2, 2)))),
        "upsample bilinear": ([y], lambda: tsum(upsample(y, 2, "bilinear") * np.tile(w44, (1, 1, 2, 2)))),
        "elu": ([y], lambda: tsum(elu(y) * w44)),
        "relu": ([y], lambda: tsum(relu(y) * w44)),
        "sigmoid": ([y], lambda: tsum(sigmoid(y) * w44)),
        "softmax": ([y], lambda: tsum(softmax_channels(y) * w44)),
        "global_avg_pool": ([y], lambda: tsum(global_avg_pool(y) * w44[:, :, 0, 0])),
        "square/mean": ([y], lambda: tmean(square(y))),
        "getitem/reshape": ([y], lambda: tsum(reshape(getitem(y, (slice(None), 1)), (2, 16)) * w44[:, 0].reshape(2, 16))),
    })
    q = p((2, 3, 4, 4), "q", positive=True)
    cases["log"] = ([q], lambda: tsum(log(q) * w44))
    cases["mul/div"] = ([y, q], lambda: tsum(div(mul(y, w44), q)))
    g, be = p((3,), "gamma"), p((3,), "beta")
    st = BatchNormState(3)
    cases["batch_norm train"] = ([y, g, be], lambda: tsum(batch_norm(y, g, be, st, "train") * w44))
    cases["batch_norm eval"] = ([y, g, be], lambda: tsum(batch_norm(y, g, be, st, "eval") * w44))
    v = p((4, 6), "v")
    fw, fb = p((5, 6), "fw"), p((5,), "fb")
    w45 = rng.standard_normal((4, 5))
    cases["fully_connected"] = ([v, fw, fb], lambda: tsum(fully_connected(v, fw, fb) * w45))
    s = p((2,), "s")
    z = p((2, 1, 4, 4), "z")
    w_cat = rng.standard_normal((2, 4, 4, 4))
    cases["concat/scale_by_scalar"] = ([y, z, s], lambda: tsum(concat_channels([scale_by_scalar(y, s), z]) * w_cat))
    return cases


def test_criterion_1_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {}
    cases = _primitive_cases(rng)
    cases["batch_norm train"][1]()  # seed running statistics for the eval case
    for name, (params, fn) in cases.items():
        worst[name] = fd_check(fn, params, 20, rng=rng)
    b = ModelBundle.build(2, 8, 1, (4, 8), (4, 8), 4, seed=7)
    xs = [rng.random((2, 1, 8, 8)) for _ in range(3)]
    labels = [rng.integers(0, 2, (2, 8, 8)) for _ in range(3)]
    alphas = [np.array([1.0, 1.3])] * 3
    w = rng.uniform(0.2, 0.9, (2, 3))
    wt = rng.uniform(0.2, 0.9, (2, 3))

    def integrated():
        # the weighting net trains on its own objective, so its term is independent of y
        y, maps = integrated_forward(b, xs, w, "train")
        loss, _ = total_loss(y, maps, labels[0], labels, alphas, alphas[0])
        return loss + mse_weight_loss(b.weighting.forward(xs[1], "train"), wt)

    worst["integrated network"] = fd_check(integrated, b.parameters(), 40, rng=rng)
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if not v < 1e-4}
    report(1, not bad and elapsed < 120,
           f"{len(worst) - 1} primitive cases + integrated network (>=20 coords each), max rel err {max(worst.values()):.2e} (<1e-4), {elapsed:.1f}s (<120s)"
           + (f"; failing: {bad}" if bad else ""))


# ----------------------------------------------------------------- 2

def test_criterion_2_oracle_equivalence():
    rng = np.random.default_rng(7)
    err = {"conv2d": 0.0, "max_pool2d": 0.0, "global_avg_pool": 0.0, "fully_connected": 0.0,
           "scores": 0.0, "dice": 0.0}
    counts_exact = True
    for _ in range(200):
        n, c, f = (int(v) for v in rng.integers(1, 3, 3))
        h, w = (int(v) for v in rng.integers(3, 7, 2))
        kk = int(rng.choice([1, 2, 3]))
        stride = int(rng.integers(1, 3))
        x = rng.standard_normal((n, c, h, w))
        k = rng.standard_normal((f, c, kk, kk))
        bias = rng.standard_normal(f)
        got = conv2d(x, k, bias, stride, "valid").data
        err["conv2d"] = max(err["conv2d"], np.abs(got - conv_oracle(x, k, bias, stride)).max())

        win = int(rng.choice([1, 2]))
        xp = rng.standard_normal((n, c, 2 * h, 2 * w))
        err["max_pool2d"] = max(err["max_pool2d"], np.abs(max_pool2d(xp, win).data - pool_oracle(xp, win, win)).max())

        gap_loop = np.array([[sum(x[a, b].ravel()) / (h * w) for b in range(c)] for a in range(n)])
        err["global_avg_pool"] = max(err["global_avg_pool"], np.abs(global_avg_pool(x).data - gap_loop).max())

        v = rng.standard_normal((n, c * 3))
        wt = rng.standard_normal((f, c * 3))
        fc_loop = np.array([[sum(v[a, i] * wt[o, i] for i in range(c * 3)) + bias[o] for o in range(f)]
                            for a in range(n)])
        err["fully_connected"] = max(err["fully_connected"], np.abs(fully_connected(v, wt, bias).data - fc_loop).max())

        m = int(rng.integers(2, 6))
        gt = rng.integers(0, m, 40)
        gt[rng.random(40) < 0.1] = 255
        gt[0] = 0
        pred = rng.integers(0, m, 40)
        pred[0] = 0
        cm = confusion(pred, gt, m)
        want = confusion_oracle(pred, gt, m)
        counts_exact &= bool(np.array_equal(cm.counts, want))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            got_scores = np.array([op_accuracy(cm), pc_accuracy(cm), miou(cm)])
        err["scores"] = max(err["scores"], np.abs(got_scores - np.array(scores_oracle(want))).max())

        y = rng.dirichlet(np.ones(m), size=(3, 4)).transpose(2, 0, 1)
        t, _ = one_hot(rng.integers(0, m, (3, 4)), m)
        err["dice"] = max(err["dice"], abs(dice_weight_targets(y, t) - dice_oracle(y, t)))
    ok = counts_exact and all(v <= 1e-12 for v in err.values())
    report(2, ok, f"200 instances each; confusion counts exact={counts_exact}; max abs err "
                  + ", ".join(f"{k} {v:.1e}" for k, v in err.items()) + " (<=1e-12)")


# ----------------------------------------------------------------- 3

def test_criterion_3_formula_spot_checks():
    alpha = class_weights([np.array([0] * 75 + [1] * 25)[None]], 2)
    y = np.array([[[1.0, 1.0]]])
    t = np.array([[[1.0, 0.0]]])
    dice = dice_weight_targets(y, t)
    cm = confusion(np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]), 2)
    scores = (op_accuracy(cm), pc_accuracy(cm), miou(cm))
    ok = (np.allclose(alpha, [0.6667, 2.0], atol=1e-4) and abs(dice - 2 / 3) <= 1e-12
          and scores[0] == 3 / 4 and abs(scores[1] - 5 / 6) <= 1e-15 and abs(scores[2] - 7 / 12) <= 1e-15)
    report(3, ok, f"alpha={np.round(alpha, 4).tolist()}, dice={dice:.12f}, "
                  f"OP/PC/mIoU={scores[0]:.6f}/{scores[1]:.6f}/{scores[2]:.6f} vs 3/4, 5/6, 7/12")


# ----------------------------------------------------------------- 4

def test_criterion_4_geometry():
    img = (np.arange(96 * 96) % 253).astype(np.uint8).reshape(96, 96)
    lab = (np.arange(96 * 96) % 5).astype(np.uint8).reshape(96, 96)
    slide = Slide(img, lab, "g")
    trips = extract_triplets(slide, 32, 32)
    f = img.astype(np.float64) / 255.0
    t = trips[4]  # origin (32, 32)
    # widest view: 128x128 around the centre (48, 48), mirror padded by 48
    padded = np.pad(f, 48, mode="reflect")
    reg = (np.array_equal(t.x[0][0], f[32:64, 32:64])
           and np.array_equal(t.x[1][0], f[16:80, 16:80].reshape(32, 2, 32, 2).mean(axis=(1, 3)))
           and np.array_equal(t.x[2][0], padded[32:160, 32:160].reshape(32, 4, 32, 4).mean(axis=(1, 3)))
           and np.array_equal(t.t[0], lab[32:64, 32:64]))
    deltas = True
    for k, s in ((2, 2), (3, 4)):
        for r, c in ((0, 0), (3, 5), (7, 7)):
            m = np.zeros((1, 1, 32, 32))
            lo = (32 - 32 // s) // 2
            m[0, 0, lo + r, lo + c] = 1.0
            want = np.zeros((1, 1, 32, 32))
            want[0, 0, r * s:(r + 1) * s, c * s:(c + 1) * s] = 1.0
            deltas &= bool(np.array_equal(crop_and_upsample(m, k, "nearest").data, want))
    stitched = stitch_masks([(tr.origin, tr.t[0]) for tr in trips], slide.shape)
    round_trip = bool(np.array_equal(stitched, lab))
    report(4, reg and deltas and round_trip,
           f"registration exact={reg}, crop_and_upsample deltas exact={deltas}, stitch(extract) lossless={round_trip}")


# ----------------------------------------------------------------- 5

def test_criterion_5_stage_isolation(tiny_dataset):
    import hashlib

    def digest(params):
        h = hashlib.sha256()
        for p in params:
            h.update(p.data.tobytes())
        return h.hexdigest()

    def snap(b):
        return (digest(b.expert_parameters()), digest(b.weighting.parameters()), digest(b.aggregator.parameters()))

    cfg = tiny_config()
    b = pretrain_experts(build_bundle(cfg), tiny_dataset, cfg)
    alphas = expert_alphas(tiny_dataset.train, cfg.n_classes)
    violations = []
    for epoch in range(1, 4):
        e0, w0, a0 = snap(b)
        train_weighting_epoch(b, generate_weight_targets(b, tiny_dataset.weighting), tiny_dataset.weighting, cfg, epoch)
        e1, w1, a1 = snap(b)
        if (e1, a1) != (e0, a0) or w1 == w0:
            violations.append(f"weighting epoch {epoch}")
        end_to_end_epoch(b, tiny_dataset, cfg, epoch, alphas)
        e2, w2, a2 = snap(b)
        if w2 != w1 or e2 == e1 or a2 == a1:
            violations.append(f"end-to-end epoch {epoch}")
    report(5, not violations, "3 epochs; weighting epochs touch only the weighting net, end-to-end epochs only "
                              "experts + aggregator" + (f"; violations: {violations}" if violations else ""))


# ----------------------------------------------------------------- 6

def test_criterion_6_adaptive_beats_experts(four_class_runs):
    rows = []
    for seed, run in four_class_runs.items():
        s = run["scores"]
        best = max(s["expert1"], s["expert2"], s["expert3"])
        total = run["seconds"]["pretrain"] + run["seconds"]["adaptive"]
        rows.append((seed, s["adaptive"], s["fixed_run"], best, total, run["seconds"]["fixed"]))
        print(f"  seed {seed}: adaptive {s['adaptive']:.4f}  fixed {s['fixed_run']:.4f}  experts "
              f"{s['expert1']:.4f}/{s['expert2']:.4f}/{s['expert3']:.4f}  (adaptive model with w=1: {s['fixed']:.4f})"
              f"  run {total / 60:.1f} min, fixed run {run['seconds']['fixed'] / 60:.1f} min")
    adaptive = statistics.median(r[1] for r in rows)
    fixed = statistics.median(r[2] for r in rows)
    best = statistics.median(r[3] for r in rows)
    slowest = max(r[4] for r in rows)
    ok = adaptive >= best + 0.03 and adaptive >= fixed - 0.01 and slowest < 1800
    report(6, ok, f"median mIoU adaptive {adaptive:.4f} vs best expert {best:.4f} (+0.03 needed) and fixed "
                  f"{fixed:.4f} (-0.01 allowed); slowest run {slowest / 60:.1f} min (<30)")


# ----------------------------------------------------------------- 7

def test_criterion_7_agreement(four_class_runs):
    margins, gains = [], []
    for seed, run in four_class_runs.items():
        before = expert_agreement(run["pretrained"], run["data"].test)
        after = expert_agreement(run["adaptive"], run["data"].test)
        margins.append(before.union_rate - before.expert_rates.max())
        gains.append(after.union_rate - before.union_rate)
        print(f"  seed {seed}: experts {np.round(before.expert_rates, 4).tolist()} union {before.union_rate:.4f} "
              f"-> after {np.round(after.expert_rates, 4).tolist()} union {after.union_rate:.4f}")
    margin, gain = statistics.median(margins), statistics.median(gains)
    report(7, margin >= 0.05 and gain >= 0.0,
           f"median union - best expert after pre-training {margin:.4f} (>=0.05); median union gain from "
           f"end-to-end training {gain:+.4f} (>=0)")


# ----------------------------------------------------------------- 8

def test_criterion_8_two_class_parity(two_class_run):
    s = two_class_run["scores"]
    best = max(s["expert1"], s["expert2"], s["expert3"])
    gap = abs(s["adaptive"] - s["fixed_run"])
    ok = gap <= 0.05 and s["adaptive"] >= best - 0.02 and s["fixed_run"] >= best - 0.02
    report(8, ok, f"adaptive {s['adaptive']:.4f}, fixed {s['fixed_run']:.4f} (|diff| {gap:.4f} <= 0.05), "
                  f"best expert {best:.4f} (both >= best - 0.02)")


def test_pure_normal_slide_segments_as_normal(two_class_run):
    slide = synth_generate(SynthConfig(n_classes=2, ratios=(1.0, 0.0)), seed=[99, 0])
    labels = segment_slide(two_class_run["adaptive"], slide, "adaptive")
    share = float((labels == 0).mean())
    print(f"  pure-normal slide: {share:.4f} of pixels labelled normal (>=0.90)")
    assert share >= 0.90


# ----------------------------------------------------------------- 9

def test_criterion_9_determinism_and_persistence(tiny_dataset, tmp_path):
    cfg = tiny_config(max_epochs=2, patience=10)
    _, full = run_training(cfg, tiny_dataset, tmp_path / "a")
    run_training(cfg, tiny_dataset, tmp_path / "b")
    identical = all((tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
                    for n in ("epoch_1.awmf", "epoch_2.awmf", "best.awmf"))
    _, resumed = run_training(cfg, tiny_dataset, tmp_path / "c", load_bundle(tmp_path / "a" / "epoch_1.awmf"))
    keys = ("loss_e1", "loss_e2", "loss_e3", "loss_w", "loss_a", "loss_total", "val_loss")
    drift = max(abs(resumed[0][k] - full[1][k]) for k in keys)
    data = (tmp_path / "a" / "epoch_2.awmf").read_bytes()
    stable = dumps(loads(data)) == data
    report(9, identical and drift <= 1e-9 and stable,
           f"repeat run bytewise identical={identical}; resume loss drift {drift:.1e} (<=1e-9); "
           f"save/load bytewise stable={stable}")


# ----------------------------------------------------------------- 10

def test_criterion_10_weight_behaviour(four_class_runs):
    in_range, dice_ok = True, True
    hits, eligible = 0, 0
    all_dice, all_w = [], []
    for run in four_class_runs.values():
        bundle, test = run["adaptive"], run["data"].test
        res = predict_all(bundle, test, bundle.meta.get("interpolation", "bilinear"),
                          variants=("adaptive",), return_maps=True)
        w = res["weights"]
        in_range &= bool(np.all((w > 0) & (w < 1)))
        _, ts = stack_triplets(test)
        dice = np.stack([dice_targets_batch(res["maps"][k], ts[k], bundle.n_classes) for k in range(3)], axis=1)
        dice_ok &= bool(np.all((dice >= 0) & (dice <= 1)))
        all_dice.append(dice)
        all_w.append(w)
        for d, wi in zip(dice, w):
            good = d > 0.95
            if good.sum() == 1 and (d[~good] < 0.5).all():
                eligible += 1
                hits += int(np.argmax(wi) == int(np.flatnonzero(good)[0]))
    rate = hits / eligible if eligible else float("nan")
    # diagnostics only: how close the experts come to the near-perfect threshold
    d, w = np.concatenate(all_dice), np.concatenate(all_w)
    for k in range(3):
        r = np.corrcoef(d[:, k], w[:, k])[0, 1]
        print(f"  expert{k + 1}: Dice target median {np.median(d[:, k]):.3f}, max {d[:, k].max():.3f}, "
              f"{int((d[:, k] > 0.95).sum())}/{len(d)} patches > 0.95; corr(Dice, weight) {r:+.3f}")
    ok = in_range and dice_ok and eligible > 0 and rate >= 0.6
    report(10, ok, f"weights in (0,1)={in_range}; Dice targets in [0,1]={dice_ok}; top-weight on the lone "
                   f"near-perfect expert in {hits}/{eligible} patches ({rate:.2%}, >=60%)")
