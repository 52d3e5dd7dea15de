"""Acceptance suite. Each test prints one ``criterion N: PASS|FAIL`` line (collected in the summary)."""

import hashlib
import itertools
import time

import numpy as np

from cect_forge import tensor as T
from cect_forge.cli import main
from cect_forge.loss import LossConfig, composite_loss
from cect_forge.metrics import bland_altman, dice, nmi, pearson, psnr, threshold_segment
from cect_forge.model import ModelConfig, build_network, forward, layer_specs
from cect_forge.phantom import PhantomConfig, displace, generate_pair, split_dataset
from cect_forge.registration import RigidTransform2D, register_rigid
from cect_forge.tensor import Tensor
from cect_forge.trainer import TrainConfig, derive_seed, evaluate, train

from helpers import toy_forward, toy_params, toy_sample

STEP = 1e-4
REL_TOL = 1e-5
INSTANCES = 20


def _rel_err(f, point):
    """Normwise relative error between the analytic and central-difference gradient."""
    a = T.analytic_grad(f, point)
    n = T.numerical_grad(f, point, STEP)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale)


def _projected(op, shape_out, rng):
    """Scalar ``sum(op(.) * R)`` for a fixed random projection ``R``."""
    r = rng.normal(size=shape_out)
    return lambda *args: T.tsum(T.mul(op(*args), r))


def _conv_instance(rng):
    n, c, f = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    size, stride = int(rng.choice([4, 6])), int(rng.choice([1, 2]))
    x, w, b = rng.normal(size=(n, c, size, size)), rng.normal(size=(f, c, 3, 3)), rng.normal(size=f)
    g = _projected(lambda x_, w_, b_: T.conv2d(x_, w_, b_, stride), (n, f, size // stride, size // stride), rng)
    return max(_rel_err(lambda t: g(t, Tensor(w), Tensor(b)), x),
               _rel_err(lambda t: g(Tensor(x), t, Tensor(b)), w),
               _rel_err(lambda t: g(Tensor(x), Tensor(w), t), b))


def _transpose_instance(rng):
    n, c, f, size = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 4)
    x, w, b = rng.normal(size=(n, c, size, size)), rng.normal(size=(c, f, 2, 2)), rng.normal(size=f)
    g = _projected(T.conv2d_transpose, (n, f, 2 * size, 2 * size), rng)
    return max(_rel_err(lambda t: g(t, Tensor(w), Tensor(b)), x),
               _rel_err(lambda t: g(Tensor(x), t, Tensor(b)), w),
               _rel_err(lambda t: g(Tensor(x), Tensor(w), t), b))


def _bn_instance(rng):
    n, c, size = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.choice([2, 3, 4]))
    x = rng.normal(rng.normal(0, 2), rng.uniform(0.5, 3), size=(n, c, size, size))
    gamma, beta = rng.uniform(0.5, 2, size=c), rng.normal(size=c)

    def bn(x_, g_, b_):
        return T.batch_norm(x_, g_, b_, np.zeros(c), np.ones(c), True)

    g = _projected(bn, x.shape, rng)
    return max(_rel_err(lambda t: g(t, Tensor(gamma), Tensor(beta)), x),
               _rel_err(lambda t: g(Tensor(x), t, Tensor(beta)), gamma),
               _rel_err(lambda t: g(Tensor(x), Tensor(gamma), t), beta))


def _relu_instance(rng):
    x = rng.normal(size=(2, 3, 4))
    x = np.where(np.abs(x) < 1e-2, 1e-2 * np.sign(x) + (x == 0) * 1e-2, x)  # stay off the kink
    return _rel_err(_projected(T.relu, x.shape, rng), x)


def _sigmoid_instance(rng):
    s, v_th = rng.uniform(1, 10), rng.uniform(0, 0.5)
    x = v_th + rng.normal(0, 1.0 / s, size=(3, 5))
    return _rel_err(_projected(lambda t: T.steep_sigmoid(t, s, v_th), x.shape, rng), x)


def _composite_instance(rng):
    cfg = LossConfig(beta=float(rng.uniform(0.01, 1)), lam=float(rng.uniform(1e-3, 0.1)))
    while True:
        params, sample = toy_params(rng), toy_sample(rng)
        _, pre = toy_forward({k: Tensor(v) for k, v in params.items()}, sample.ct[:, None])
        if np.abs(pre).min() > 1e-3:
            break
    errs = []
    for wrt in params:
        def f(t, wrt=wrt):
            p = {k: (t if k == wrt else Tensor(v)) for k, v in params.items()}
            pred, _ = toy_forward(p, sample.ct[:, None])
            return composite_loss(pred, sample, [p["w1"], p["w2"]], cfg)[0]
        errs.append(_rel_err(f, params[wrt]))
    return max(errs)


def test_criterion_1_gradient_oracle(criterion):
    start = time.perf_counter()
    cases = {"conv2d": _conv_instance, "conv2d_transpose": _transpose_instance, "batch_norm": _bn_instance,
             "relu": _relu_instance, "steep_sigmoid": _sigmoid_instance, "composite_loss": _composite_instance}
    worst = {}
    for i, (name, fn) in enumerate(cases.items()):
        rng = np.random.default_rng(1000 + i)
        worst[name] = max(fn(rng) for _ in range(INSTANCES))
    elapsed = time.perf_counter() - start
    ok = all(v <= REL_TOL for v in worst.values()) and elapsed <= 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    criterion(1, ok, f"max rel err over {INSTANCES} instances each (tol {REL_TOL:g}): {detail}; {elapsed:.1f}s")


def test_criterion_2_mask_gating(criterion):
    trials, exact = 20, 0
    cfg = LossConfig(beta=0.5, lam=0.01)
    for i in range(trials):
        rng = np.random.default_rng(2000 + i)
        params, sample = toy_params(rng), toy_sample(rng, n=3, size=6)
        outside = (sample.heart_mask == 0)[:, None]
        noise = np.where(outside, rng.normal(0, 50, size=outside.shape), 0.0)

        def run(offset):
            p = {k: Tensor(v.copy(), requires_grad=True) for k, v in params.items()}
            pred, _ = toy_forward(p, sample.ct[:, None])
            pred = T.add(pred, offset)
            loss, _ = composite_loss(pred, sample, [p["w1"], p["w2"]], cfg)
            T.backward(loss)
            # the same check with the prediction itself as the leaf
            q = Tensor(pred.data.copy(), requires_grad=True)
            loss_q, _ = composite_loss(q, sample, [p["w1"], p["w2"]], cfg)
            T.backward(loss_q)
            return [loss.data, loss_q.data, q.grad] + [p[k].grad for k in params]

        a, b = run(np.zeros_like(noise)), run(noise)
        exact += all(x.tobytes() == y.tobytes() for x, y in zip(a, b))
    criterion(2, exact == trials, f"{exact}/{trials} outside-heart perturbations left loss and every gradient "
                                  "bitwise unchanged")


def test_criterion_3_metric_oracles(criterion):
    start = time.perf_counter()
    masks = np.array(list(itertools.product((0, 1), repeat=9)), dtype=np.uint8).reshape(-1, 3, 3)
    sizes = masks.reshape(512, -1).sum(axis=1)
    inter = masks.reshape(512, -1) @ masks.reshape(512, -1).T
    dice_bad = 0
    for i in range(512):
        for j in range(512):
            denom = sizes[i] + sizes[j]
            want = 1.0 if denom == 0 else 2 * inter[i, j] / denom
            dice_bad += dice(masks[i], masks[j]) != want
    rng = np.random.default_rng(3)
    nmi_err = max(abs(nmi(x, x) - 1.0) for x in (rng.normal(0, 100, (32, 32)) for _ in range(10)))
    a = np.zeros((10, 10))
    p = psnr(a, a + 10.0)
    rho_err = 0.0
    for _ in range(10):
        x = rng.normal(size=50)
        k, c = rng.uniform(0.1, 10) * rng.choice([-1, 1]), rng.normal()
        rho, _ = pearson(x, k * x + c)
        rho_err = max(rho_err, abs(rho - np.sign(k)))
    ba_exact = True
    for _ in range(10):
        x, y = rng.normal(size=30), rng.normal(size=30)
        ba = bland_altman(x, y)
        d = x - y
        md, sd = d.mean(), d.std(ddof=1)
        ba_exact &= (ba.mean_diff == md and ba.sd_diff == sd
                     and ba.loa_low == md - 1.96 * sd and ba.loa_high == md + 1.96 * sd)
    elapsed = time.perf_counter() - start
    ok = (dice_bad == 0 and nmi_err <= 1e-9 and abs(p - 52.24) <= 0.01 and rho_err <= 1e-12 and ba_exact
          and elapsed <= 120)
    criterion(3, ok, f"dice mismatches {dice_bad}/262144, |NMI(x,x)-1| {nmi_err:.1e}, PSNR {p:.4f} dB, "
                     f"|rho|-1 err {rho_err:.1e}, BA loa exact {ba_exact}; {elapsed:.1f}s")


def test_criterion_4_registration_recovery(criterion):
    start = time.perf_counter()
    cfg = PhantomConfig()
    recovered = improved = 0
    for i in range(50):
        rng = np.random.default_rng(derive_seed(4, "displacement", i))
        true = RigidTransform2D(rng.uniform(-6, 6), rng.uniform(-6, 6), rng.uniform(-12, 12))
        pair = generate_pair(cfg, derive_seed(4, "phantom", i))
        moved = displace(pair, true, cfg.hu_air)
        res = register_rigid(moved.cect, pair.ct)
        want, got = true.inverse(), res.transform
        recovered += (abs(got.tx - want.tx) <= 0.5 and abs(got.ty - want.ty) <= 0.5
                      and abs(got.theta - want.theta) <= 0.5)
        improved += res.mi >= res.mi_initial
    elapsed = time.perf_counter() - start
    ok = recovered >= 48 and improved == 50 and elapsed <= 300
    criterion(4, ok, f"recovered {recovered}/50 within 0.5 px / 0.5 deg, MI not decreased {improved}/50; "
                     f"{elapsed:.1f}s")


def test_criterion_5_desk_training(criterion):
    start = time.perf_counter()
    seed = 7
    cfg = PhantomConfig()
    pairs = [generate_pair(cfg, derive_seed(seed, "phantom", i)) for i in range(150)]
    split = split_dataset(150, seed)
    tc = TrainConfig.desk(seed=seed)
    params, _ = train([pairs[i] for i in split["train"]], [pairs[i] for i in split["val"]], tc)
    report, _ = evaluate(params, {str(i): [pairs[i]] for i in split["test"]})
    d = report.to_dict()
    elapsed = time.perf_counter() - start
    checks = {
        "dice": (d["dice"]["mean"], d["dice"]["mean"] >= 0.85, ">= 0.85"),
        "nmi": (d["nmi"]["mean"], d["nmi"]["mean"] >= 0.90, ">= 0.90"),
        "dV%": (d["dv_percent"]["mean"], d["dv_percent"]["mean"] <= 15.0, "<= 15"),
        "rho": (d["pearson_rho"], d["pearson_rho"] >= 0.95, ">= 0.95"),
    }
    ok = all(c[1] for c in checks.values()) and elapsed <= 1800 and len(split["test"]) == 20
    detail = ", ".join(f"{k} {v:.3f} ({'ok' if good else 'miss'} {want})" for k, (v, good, want) in checks.items())
    criterion(5, ok, f"{detail}; PSNR {d['psnr_db']['mean']:.2f} dB; {tc.epochs} epochs in {elapsed:.0f}s")


def test_criterion_6_architecture(criterion):
    cfg = ModelConfig()
    specs = layer_specs(cfg)
    enc = [s for s in specs if s.name.startswith("enc")]
    dec = [s for s in specs if s.name.startswith("dec")]
    bott = [s for s in specs if s.name == "bottleneck"]
    head = next(s for s in specs if s.name == "head")
    skip = next(s for s in specs if s.name == "skip")
    trace = []
    out = forward(build_network(cfg), np.zeros((1, 1, 128, 128)), trace=trace)
    shapes = dict(trace)
    checks = [
        cfg.input_size == 128,
        len(enc) == 8 and all(s.kind == "conv" and s.kernel == 3 for s in enc),
        [s.stride for s in enc] == [1, 2] * 4,
        len(bott) == 1 and bott[0].kernel == 3 and bott[0].stride == 1,
        shapes["bottleneck"][2:] == (8, 8),
        len(dec) == 8,
        all(s.kind == "transpose" and s.kernel == 2 and s.stride == 2 for s in dec[0::2]),
        all(s.kind == "conv" and s.kernel == 3 and s.stride == 1 for s in dec[1::2]),
        all(s.batch_norm and s.activation == "relu" for s in enc + bott + dec),
        head.kernel == 3 and head.out_channels == 1 and head.activation == "linear" and not head.batch_norm,
        skip.kernel == 1 and skip.in_channels == 1 and skip.out_channels == 1,
        out.shape == (1, 1, 128, 128),
    ]
    criterion(6, all(checks), f"{sum(checks)}/{len(checks)} introspection checks; bottleneck "
                              f"{shapes['bottleneck'][2:]}, output {out.shape[2:]}")


TINY_INI = """
[phantom]
image_size = 32
acquisition_size = 256
pixel_spacing_mm = 6.4

[model]
encoder_channels = 2, 2, 4, 4, 8, 8, 16, 16
bottleneck_channels = 16
decoder_channels = 16, 8, 8, 4, 4, 2, 2, 2

[train]
epochs = 4
batch_size = 4
learning_rate = 0.001
"""


def test_criterion_7_determinism(criterion, tmp_path):
    ini = tmp_path / "tiny.ini"
    ini.write_text(TINY_INI)

    def digest(p):
        return hashlib.sha256(p.read_bytes()).hexdigest()

    base = ["--config", str(ini), "--data", str(tmp_path / "data")]
    assert main(["generate", "--out", str(tmp_path / "data"), "--count", "12", "--seed", "5", "--config", str(ini)]) == 0
    assert main(["train", *base, "--out", str(tmp_path / "a"), "--checkpoint-every", "2"]) == 0
    assert main(["train", *base, "--out", str(tmp_path / "b")]) == 0
    assert main(["train", *base, "--out", str(tmp_path / "c"),
                 "--resume", str(tmp_path / "a" / "checkpoints" / "ckpt_epoch0002.json")]) == 0
    same = digest(tmp_path / "a" / "weights.cwt") == digest(tmp_path / "b" / "weights.cwt")
    resumed = digest(tmp_path / "a" / "weights.cwt") == digest(tmp_path / "c" / "weights.cwt")
    hist = (tmp_path / "a" / "history.csv").read_text() == (tmp_path / "c" / "history.csv").read_text()
    criterion(7, same and resumed and hist, f"repeat run byte-identical {same}, resume-from-epoch-2 "
                                            f"byte-identical {resumed}, history identical {hist}")


def test_criterion_8_noiseless_threshold_identity(criterion):
    cfg = PhantomConfig(noise_sigma=0.0)
    exact = 0
    n = 50
    for i in range(n):
        p = generate_pair(cfg, derive_seed(8, "phantom", i))
        seg = threshold_segment(p.cect, 300.0, p.heart_mask)
        exact += np.array_equal(seg, p.chamber_mask) and dice(seg, p.chamber_mask) == 1.0
    criterion(8, exact == n, f"{exact}/{n} noiseless phantoms segment to the chamber mask exactly at 300 HU")

