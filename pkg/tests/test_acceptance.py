"""Acceptance gate: the twelve checks that define done for this package.

Each test pins its tolerance in place, prints one PASS/FAIL line (run with
`pytest tests/test_acceptance.py -s` to see them), and fails loudly if the
bound is not met. Nothing here is allowed to loosen a bound to get green.
"""

import math
import time

import numpy as np

from lkca import attention
from lkca import autodiff as ad
from lkca import model as model_lib
from lkca.attention import (
    LKCAKernel,
    LKCALayer,
    ValueProjection,
    backward,
    count_flops,
    forward_attention_view,
    forward_conv_view,
    forward_spectral_view,
    init_layer,
    unroll_kernel_to_attention,
    with_view,
)
from lkca.cli import main
from lkca.model import ModelConfig, build_model, count_model_params, param_registry
from lkca.tensor import F32, F64, MacCounter, SeededRng
from lkca.train import IdxFormatError, TrainConfig, gen_stripes, load_idx, train_loop


def report(num: int, description: str, ok: bool, detail: str = ""):
    status = "PASS" if ok else "FAIL"
    suffix = f" [{detail}]" if detail else ""
    print(f"{status} criterion {num:2d}: {description}{suffix}")
    assert ok, f"criterion {num} failed: {description}{suffix}"


def random_case_layer(rng, gh, gw, d, dtype):
    return init_layer(gh, gw, d, rng, kernel_init="trunc_normal", dtype=dtype)


def test_criterion_01_view_equivalence_fuzz():
    """200 random cases, Gh,Gw in [1,16], d in [1,64], b in [1,4]."""
    rng = SeededRng(2024)
    start = time.time()
    worst_f32 = worst_f64 = worst_spec = 0.0
    ok = True
    for _ in range(200):
        gh = int(rng.integers(1, 17, 1)[0])
        gw = int(rng.integers(1, 17, 1)[0])
        d = int(rng.integers(1, 65, 1)[0])
        b = int(rng.integers(1, 5, 1)[0])
        for dtype in (F32, F64):
            layer = random_case_layer(rng, gh, gw, d, dtype)
            x = rng.normal((b, gh * gw, d), dtype=dtype)
            a = forward_attention_view(x, layer)
            c = forward_conv_view(x, layer)
            s = forward_spectral_view(x, layer)
            dev = float(np.abs(a - c).max())
            dev_s = float(np.abs(a - s).max())
            if dtype is F32:
                tol = 1e-5 * (1.0 + float(np.abs(a).max()))
                worst_f32 = max(worst_f32, dev)
            else:
                tol = 1e-10
                worst_f64 = max(worst_f64, dev)
            worst_spec = max(worst_spec, dev_s)
            ok = ok and dev <= tol and dev_s <= 1e-4
    elapsed = time.time() - start
    ok = ok and elapsed < 60.0
    report(1, "attention/convolution/spectral equivalence on 200 fuzz cases",
           ok, f"f32 {worst_f32:.2e}, f64 {worst_f64:.2e}, "
               f"spectral {worst_spec:.2e}, {elapsed:.1f}s")


def test_criterion_02_toeplitz_structure():
    """scores[i*Gw+j, p*Gw+q] == weights[Gh-1-i+p, Gw-1-j+q], exactly."""
    rng = SeededRng(7)
    ok = True
    for _ in range(20):
        gh = int(rng.integers(1, 13, 1)[0])
        gw = int(rng.integers(1, 13, 1)[0])
        weights = rng.normal((2 * gh - 1, 2 * gw - 1), dtype=F64)
        scores = unroll_kernel_to_attention(LKCAKernel(weights, gh, gw)).scores
        for n in range(gh * gw):
            i, j = divmod(n, gw)
            for m in range(gh * gw):
                p, q = divmod(m, gw)
                if scores[n, m] != weights[gh - 1 - i + p, gw - 1 - j + q]:
                    ok = False
    report(2, "unrolled scores carry the exact 2D-Toeplitz structure", ok)


def test_criterion_03_identity_and_zero_kernel():
    gh, gw, d = 3, 4, 5
    rng = SeededRng(8)
    x32 = rng.normal((2, gh * gw, d), dtype=F32)
    x64 = x32.astype(F64)

    delta = np.zeros((2 * gh - 1, 2 * gw - 1))
    delta[gh - 1, gw - 1] = 1.0
    ident = LKCALayer(kernel=LKCAKernel(delta, gh, gw),
                      value=ValueProjection(np.eye(d), np.zeros(d)))
    scores = unroll_kernel_to_attention(ident.kernel).scores
    ok = np.array_equal(scores, np.eye(gh * gw))
    ok = ok and np.array_equal(forward_attention_view(x64, ident), x64)
    ok = ok and np.array_equal(forward_conv_view(x64, ident), x64)

    zero = init_layer(gh, gw, d, rng)  # zero kernel is the default init
    want = np.zeros_like(x32)
    ok = ok and np.array_equal(forward_attention_view(x32, zero), want)
    ok = ok and np.array_equal(forward_conv_view(x32, zero), want)
    report(3, "centered delta kernel is the identity, zero kernel is zero "
              "(exact)", ok)


def test_criterion_04_translation_equivariance():
    """Shifting input content that stays in frame shifts the output the same
    way on every in-range index (identity projection, 8x8 grid, 1e-6)."""
    gh = gw = 8
    rng = SeededRng(9)
    worst = 0.0
    for _ in range(50):
        s = int(rng.integers(-(gh - 1), gh, 1)[0])
        t = int(rng.integers(-(gw - 1), gw, 1)[0])
        layer = LKCALayer(
            kernel=LKCAKernel(rng.normal((2 * gh - 1, 2 * gw - 1), dtype=F64),
                              gh, gw),
            value=ValueProjection(np.eye(1), np.zeros(1)))
        plane = rng.normal((gh, gw), dtype=F64)
        keep_rows = [i for i in range(gh) if 0 <= i + s < gh]
        keep_cols = [j for j in range(gw) if 0 <= j + t < gw]
        mask = np.zeros((gh, gw))
        mask[np.ix_(keep_rows, keep_cols)] = 1.0
        plane = plane * mask

        shifted = np.zeros_like(plane)
        shifted[np.ix_([i + s for i in keep_rows], [j + t for j in keep_cols])] = \
            plane[np.ix_(keep_rows, keep_cols)]

        out = forward_attention_view(plane.reshape(1, gh * gw, 1), layer)
        out = out[0, :, 0].reshape(gh, gw)
        out_shifted = forward_attention_view(shifted.reshape(1, gh * gw, 1), layer)
        out_shifted = out_shifted[0, :, 0].reshape(gh, gw)
        for i in range(gh):
            for j in range(gw):
                if 0 <= i - s < gh and 0 <= j - t < gw:
                    worst = max(worst, abs(out_shifted[i, j] - out[i - s, j - t]))
    report(4, "translation equivariance on 50 shifted 8x8 cases",
           worst <= 1e-6, f"max dev {worst:.2e}")


def _gelu_grad(x):
    c = math.sqrt(2.0 / math.pi)
    inner = c * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3 * 0.044715 * x * x)


def test_criterion_05_gradient_checks():
    """Analytic and tape gradients vs central differences (h=1e-4, f64):
    layer within 1e-6, full tiny model within 1e-5."""
    start = time.time()
    gh = gw = 3
    d, b = 4, 2
    rng = SeededRng(10)
    layer = random_case_layer(rng, gh, gw, d, F64)
    x = rng.normal((b, gh * gw, d), dtype=F64)
    names = ("kernel", "value.weight", "value.bias", "x")
    params = dict(zip(names, (layer.kernel.weights, layer.value.weight,
                              layer.value.bias, x)))

    def eager_loss(p):
        lay = LKCALayer(kernel=LKCAKernel(p["kernel"], gh, gw),
                        value=ValueProjection(p["value.weight"], p["value.bias"]))
        out = np.asarray(forward_attention_view(p["x"], lay))
        return float(np.sum(0.5 * out * (1.0 + np.tanh(
            math.sqrt(2.0 / math.pi) * (out + 0.044715 * out ** 3)))))

    numeric = ad.finite_diff(eager_loss, params, h=1e-4)
    out = forward_attention_view(x, layer)
    gx, gk, gw_, gb = backward(x, layer, _gelu_grad(out))
    analytic_errs = {
        "kernel": ad.relative_error(gk, numeric["kernel"]),
        "value.weight": ad.relative_error(gw_, numeric["value.weight"]),
        "value.bias": ad.relative_error(gb, numeric["value.bias"]),
        "x": ad.relative_error(gx, numeric["x"]),
    }

    def tape_loss(p):
        lay = LKCALayer(kernel=LKCAKernel(p["kernel"], gh, gw),
                        value=ValueProjection(p["value.weight"], p["value.bias"]))
        return ad.sum_all(ad.gelu(forward_attention_view(p["x"], lay)))

    tape_report = ad.grad_check(tape_loss, params, tolerance=1e-6, h=1e-4)

    cfg = ModelConfig(image_h=8, image_w=8, channels=1, patch=4, dim=8,
                      mixers="LL", mlp_ratio=2, num_classes=2,
                      kernel_init="trunc_normal")
    base = build_model(cfg, seed=3)
    model_params = {k: v.astype(F64) for k, v in param_registry(base).items()}
    model64 = model_lib.bind_params(base, model_params)
    images = rng.uniform(2 * 64).reshape(2, 8, 8, 1)
    labels = rng.integers(0, 2, 2)

    def model_loss(p):
        logits = model_lib.model_forward(images, model_lib.bind_params(model64, p))
        return ad.cross_entropy_smoothed(logits, labels, 0.1)

    model_report = ad.grad_check(model_loss, model_params, tolerance=1e-5, h=1e-4)

    elapsed = time.time() - start
    layer_worst = max(analytic_errs.values())
    ok = (layer_worst <= 1e-6 and tape_report.passed and model_report.passed
          and elapsed < 300.0)
    report(5, "analytic and tape gradients match finite differences",
           ok, f"layer analytic {layer_worst:.2e}, layer tape "
               f"{max(tape_report.errors.values()):.2e}, model "
               f"{max(model_report.errors.values()):.2e}, {elapsed:.1f}s")


def test_criterion_06_adjoint_equivalence():
    """Kernel gradient through the attention tape equals the convolution
    tape within 1e-10 (f64)."""
    gh, gw, d, b = 3, 4, 6, 2
    rng = SeededRng(11)
    layer = random_case_layer(rng, gh, gw, d, F64)
    x = rng.normal((b, gh * gw, d), dtype=F64)
    g_out = rng.normal((b, gh * gw, d), dtype=F64)

    def kernel_grad(forward_fn):
        tape = ad.Tape()
        k = tape.leaf("kernel", layer.kernel.weights)
        lay = LKCALayer(kernel=LKCAKernel(k, gh, gw), value=layer.value)
        loss = ad.sum_all(ad.mul(forward_fn(x, lay), tape.constant(g_out)))
        return tape.backward(loss)["kernel"]

    dev = float(np.abs(kernel_grad(forward_attention_view)
                       - kernel_grad(forward_conv_view)).max())
    report(6, "kernel adjoints agree between attention and convolution tapes",
           dev <= 1e-10, f"max dev {dev:.2e}")


def _lkca_tiny(**overrides):
    base = dict(image_h=8, image_w=8, channels=1, patch=1, dim=32, mixers="LL",
                mlp_ratio=2, num_classes=2)
    base.update(overrides)
    return ModelConfig(**base)


def test_criterion_07_lockstep_training():
    """Same seed, attention vs convolution view, 100 AdamW steps: per-step
    losses within 1e-4 relative (f32)."""
    def run(view):
        cfg = TrainConfig(model=_lkca_tiny(), view=view, batch_size=16,
                          total_steps=100, warmup_steps=10, base_lr=1e-3,
                          eval_every=100, seed=0, train_samples=64)
        return train_loop(cfg).losses

    losses_a = run("attention")
    losses_c = run("convolution")
    worst = max(abs(a - c) / max(1.0, abs(a), abs(c))
                for a, c in zip(losses_a, losses_c))
    report(7, "100-step lockstep training across views", worst <= 1e-4,
           f"max per-step rel diff {worst:.2e}")


def test_criterion_08_overfit_smoke():
    """64 stripes samples memorized to 100% train accuracy within 500 steps."""
    start = time.time()
    cfg = TrainConfig(model=_lkca_tiny(), batch_size=16, total_steps=500,
                      warmup_steps=50, base_lr=1e-3, eval_every=10, seed=0,
                      train_samples=64)
    result = train_loop(cfg)
    hit = next((r.step for r in result.history if r.train_acc == 1.0), None)
    elapsed = time.time() - start
    ok = hit is not None and hit <= 500 and elapsed < 120.0
    report(8, "overfit smoke reaches 100% train accuracy within 500 steps",
           ok, f"first at step {hit}, {elapsed:.1f}s")


def test_criterion_09_generalization_smoke():
    """Trained on half of the bar offsets, at least 85% accuracy on the
    held-out offsets within 2000 steps."""
    cfg = TrainConfig(model=_lkca_tiny(), batch_size=16, total_steps=1000,
                      warmup_steps=100, base_lr=1e-3, eval_every=100, seed=0)
    train = gen_stripes(256, 8, cfg.seed + 1, allowed_offsets=[0, 2, 4, 6])
    held_out = gen_stripes(128, 8, cfg.seed + 3, allowed_offsets=[1, 3, 5])
    result = train_loop(cfg, train_data=train, test_data=held_out)
    best = max(r.test_acc for r in result.history if r.test_acc is not None)
    report(9, "held-out offset accuracy reaches 85% within 2000 steps",
           best >= 0.85, f"best {best:.3f} within {cfg.total_steps} steps")


def test_criterion_10_accounting():
    """Worked 723-parameter config counts exactly; count_flops/2 equals the
    instrumented MAC count for both views on 10 random cases, exactly."""
    worked = ModelConfig(image_h=16, image_w=16, channels=1, patch=4, dim=8,
                         mixers="L", mlp_ratio=2, num_classes=2,
                         use_pos_embed=True)
    registry_total = sum(v.size
                         for v in param_registry(build_model(worked, seed=0)).values())
    ok = count_model_params(worked) == registry_total == 723

    rng = SeededRng(12)
    for _ in range(10):
        gh = int(rng.integers(1, 9, 1)[0])
        gw = int(rng.integers(1, 9, 1)[0])
        d = int(rng.integers(1, 17, 1)[0])
        b = int(rng.integers(1, 5, 1)[0])
        layer = random_case_layer(rng, gh, gw, d, F32)
        x = rng.normal((b, gh * gw, d), dtype=F32)
        for view in ("attention", "convolution"):
            macs = MacCounter()
            attention.forward(x, with_view(layer, view), macs)
            ok = ok and count_flops(layer, b) == 2 * macs.macs
    report(10, "parameter and FLOP accounting are exact", ok,
           f"registry total {registry_total}")


def test_criterion_11_training_determinism(tmp_path):
    """Two identical train commands produce byte-identical metrics CSVs."""
    config = tmp_path / "run.cfg"
    config.write_text("image_h = 8\nimage_w = 8\npatch = 2\ndim = 8\n"
                      "mixers = L\nnum_classes = 2\nbatch_size = 8\n"
                      "total_steps = 20\nwarmup_steps = 2\neval_every = 5\n"
                      "train_samples = 16\nseed = 0\n")
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    code_a = main(["train", "--config", str(config), "--out", str(out_a)])
    code_b = main(["train", "--config", str(config), "--out", str(out_b)])
    bytes_a = (out_a / "metrics.csv").read_bytes()
    bytes_b = (out_b / "metrics.csv").read_bytes()
    ok = code_a == 0 and code_b == 0 and bytes_a == bytes_b
    report(11, "repeated training runs emit byte-identical metrics CSVs", ok,
           f"{len(bytes_a)} bytes")


def test_criterion_12_idx_round_trip(tmp_path):
    """Hand-built fixtures parse exactly; three malformed fixtures raise the
    three distinct parse errors."""
    import struct

    images_blob = bytes([0, 0, 8, 3]) + struct.pack(">3I", 2, 2, 2) + bytes(range(8))
    (tmp_path / "i.idx").write_bytes(images_blob)
    images = load_idx(tmp_path / "i.idx")
    ok = (images.shape == (2, 2, 2)
          and np.array_equal(images, (np.arange(8) / 255.0)
                             .reshape(2, 2, 2).astype(np.float32)))

    labels_blob = bytes([0, 0, 8, 1]) + struct.pack(">I", 3) + bytes([1, 0, 1])
    (tmp_path / "l.idx").write_bytes(labels_blob)
    ok = ok and load_idx(tmp_path / "l.idx").tolist() == [1, 0, 1]

    failures = []
    fixtures = {
        "magic": bytes([9, 9, 8, 1]) + struct.pack(">I", 1) + b"\x00",
        "type": bytes([0, 0, 0x0B, 1]) + struct.pack(">I", 1) + b"\x00",
        "trunc": bytes([0, 0, 8, 1]) + struct.pack(">I", 5) + b"\x00\x00",
    }
    for name, blob in fixtures.items():
        (tmp_path / f"{name}.idx").write_bytes(blob)
        try:
            load_idx(tmp_path / f"{name}.idx")
        except IdxFormatError as exc:
            failures.append(str(exc))
    distinct_markers = ("bytes 0-1", "byte 2", "length mismatch")
    ok = ok and len(failures) == 3
    ok = ok and all(marker in msg for marker, msg in zip(distinct_markers, failures))
    report(12, "IDX fixtures round-trip and malformed files raise distinct "
               "errors", ok)
