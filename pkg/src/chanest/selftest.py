"""Built-in invariant checks behind ``chanest selftest``.

Each check returns (name, passed, detail).  These are quick versions of the
properties the test suite pins down; they exist so a deployed install can be
sanity-checked without pytest.
"""

from __future__ import annotations

import io

import numpy as np

from chanest import baseband as bb
from chanest import channel as chn
from chanest import estimators as est
from chanest import mambanet as mnet
from chanest import reference as ref
from chanest import tensor as tz
from chanest import training as trn
from chanest.scan_backend import available_backends


def _rng(seed=0):
    return np.random.default_rng(seed)


def check_scan_equivalence():
    rng = _rng(1)
    worst = 0.0
    for length in (1, 2, 3, 64, 228, 512):
        for _ in range(10):
            a = tz.Tensor(rng.uniform(1e-4, 1.0 - 1e-4, (length, 8)))
            b = tz.Tensor(rng.standard_normal((length, 8)))
            hs = mnet.bidirectional_scan(a, b, "sequential").data
            hp = mnet.bidirectional_scan(a, b, "parallel").data
            worst = max(worst, float(np.abs(hs - hp).max()))
    ok = worst < 1e-10
    return "scan parallel == sequential", ok, f"max abs diff {worst:.2e}"


def check_scan_quotient_oracle():
    rng = _rng(2)
    worst = 0.0
    for length in (1, 2, 5, 17, 32):
        a = rng.uniform(0.05, 0.95, (length, 4))
        b = rng.standard_normal((length, 4))
        hs = mnet.bidirectional_scan(tz.Tensor(a), tz.Tensor(b)).data
        hq = ref.scan_quotient(a, b)
        worst = max(worst, float(np.abs(hs - hq).max()))
    ok = worst < 1e-9
    return "scan matches literal quotient form (short L)", ok, f"max abs diff {worst:.2e}"


def check_scan_backends():
    rng = _rng(3)
    backends = available_backends()
    if len(backends) < 2:
        return "scan backends agree", True, "only one backend importable"
    a = np.ascontiguousarray(rng.uniform(0.01, 0.99, (228, 24)))
    b = np.ascontiguousarray(rng.standard_normal((228, 24)))
    results = [mod.bidir_scan(a, b) for mod in backends.values()]
    diff = max(
        float(np.abs(results[0][i] - other[i]).max())
        for other in results[1:]
        for i in (0, 1)
    )
    return "scan backends agree", diff < 1e-12, f"max abs diff {diff:.2e}"


def check_dft():
    rng = _rng(4)
    worst = 0.0
    for n in (8, 57, 228):
        x = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        f = bb.unitary_dft(x)
        worst = max(worst, abs(np.linalg.norm(f) ** 2 - np.linalg.norm(x) ** 2))
        worst = max(worst, float(np.abs(bb.unitary_dft(f, inverse=True) - x).max()))
        worst = max(worst, float(np.abs(f - ref.dft_direct(x)).max()))
    return "unitary DFT (energy, inverse, direct oracle)", worst < 1e-11, f"max err {worst:.2e}"


def check_softmax_rows():
    rng = _rng(5)
    x = tz.softmax_rows(tz.Tensor(rng.standard_normal((50, 17)) * 10))
    err = float(np.abs(x.data.sum(axis=-1) - 1.0).max())
    return "softmax rows sum to one", err < 1e-12, f"max err {err:.2e}"


def check_loopback():
    rng = _rng(6)
    cfg = bb.BasebandConfig()
    errors = 0
    for _ in range(20):
        bits = rng.integers(0, 2, cfg.n_data_bits)
        grid = bb.build_slot(bb.qpsk_modulate(bits), cfg)
        ch = chn.sample_realization(chn.ETU, 97.0, rng, cfg)
        h = chn.freq_response(ch, cfg)
        y = chn.apply_channel_freq(grid, h, None, rng)
        data = bb.extract_data(bb.SlotGrid(y.values / h.h, kind="received"), cfg)
        errors += int(np.count_nonzero(bb.qpsk_demodulate(data) != bits))
    return "zero-noise perfect-CSI loopback BER", errors == 0, f"{errors} bit errors"


def check_time_freq_paths():
    rng = _rng(7)
    cfg = bb.BasebandConfig()
    worst = 0.0
    for _ in range(5):
        gains = (rng.standard_normal(3) + 1j * rng.standard_normal(3)) / np.sqrt(3)
        ch = chn.ChannelRealization(gains, [0.0, 4.0, 11.0], [0.0, 0.0, 0.0], rng.uniform(0, 2 * np.pi, 3), 0.0)
        bits = rng.integers(0, 2, cfg.n_data_bits)
        grid = bb.build_slot(bb.qpsk_modulate(bits), cfg)
        yt = bb.ofdm_demodulate(
            chn.apply_channel_time(bb.ofdm_modulate(grid, cfg), ch, None, rng, cfg), cfg
        )
        yf = chn.apply_channel_freq(grid, chn.freq_response(ch, cfg), None, rng)
        worst = max(worst, float(np.abs(yt.values - yf.values).max()))
    return "time/frequency pathway equivalence", worst < 1e-9, f"max abs diff {worst:.2e}"


def check_interpolation():
    cfg = bb.BasebandConfig()
    k = np.arange(cfg.n_f)[:, None]
    l = np.arange(cfg.n_s)[None, :]
    plane = (0.37 - 0.11j) * k + (0.21 + 0.4j) * l + 2.0
    pilots = est.PilotLsGrid(plane[cfg.pilot_subcarriers[:, None], list(cfg.pilot_symbols)])
    err = float(np.abs(est.interpolate_grid(pilots, cfg).values - plane).max())
    return "linear interpolation reproduces affine surfaces", err < 1e-9, f"max err {err:.2e}"


def check_mmse_identities():
    cfg = bb.BasebandConfig()
    scalar = est.CorrelationSet(np.ones((1, 1)), np.ones((1, 1)), 0.25)
    w = est.mmse_weight_matrix(scalar)[0, 0]
    ok1 = abs(w - 0.8) < 1e-9
    flat = est.correlation_from_pdp(chn.PowerDelayProfile("flat", (0.0,), (0.0,)), cfg)
    ls = est.PilotLsGrid(np.full((cfg.n_f // cfg.l_s, cfg.n_pilot), 0.7 - 0.2j))
    out = est.mmse_estimate(ls, flat, cfg)
    sub = out.values[cfg.pilot_subcarriers[:, None], list(cfg.pilot_symbols)]
    ok2 = float(np.abs(sub - (0.7 - 0.2j)).max()) < 1e-9
    return "MMSE scalar and flat-channel identities", ok1 and ok2, f"scalar w={w:.6f}"


def check_op_gradients():
    rng = _rng(8)
    worst = 0.0

    def fd_check(build, arrays):
        nonlocal worst
        tensors = [tz.Tensor(a.copy(), requires_grad=True) for a in arrays]
        loss = build(*tensors)
        loss.backward()
        for tt in tensors:
            fd = ref.fd_gradient(lambda: build(*[tz.Tensor(u.data) for u in tensors]).item(), tt.data)
            worst = max(worst, ref.relative_gradient_error(tt.grad, fd.reshape(tt.shape)))

    w = rng.standard_normal((4, 3))
    fd_check(lambda a, b: tz.sum_all(tz.mul(tz.Tensor(w), tz.matmul(a, b))),
             [rng.standard_normal((4, 5)), rng.standard_normal((5, 3))])
    wc = rng.standard_normal((2, 5, 4, 3))
    fd_check(
        lambda x, k, b: tz.sum_all(tz.mul(tz.Tensor(wc), tz.conv2d_same(x, k, b))),
        [rng.standard_normal((2, 5, 4, 2)), rng.standard_normal((3, 3, 2, 3)), rng.standard_normal(3)],
    )
    wl = rng.standard_normal((6, 3))
    fd_check(
        lambda x, g, b: tz.sum_all(tz.mul(tz.Tensor(wl), tz.layer_norm(x, g, b))),
        [rng.standard_normal((6, 3)), rng.standard_normal(6), rng.standard_normal(6)],
    )
    ws = rng.standard_normal((7, 2))
    fd_check(
        lambda a, b: tz.sum_all(tz.mul(tz.Tensor(ws), mnet.bidirectional_scan(tz.sigmoid(a), b))),
        [rng.standard_normal((7, 2)), rng.standard_normal((7, 2))],
    )
    return "op gradients match finite differences", worst < 1e-5, f"max rel err {worst:.2e}"


def check_model_gradients():
    rng = _rng(9)
    cfg = mnet.MambaNetConfig(n_f=8, n_s=4, l_s=4, n_pilot=2, n_heads=2, c_spread=2,
                              n_res_blocks=1, cnn_channels=3, head_kernel=(4, 3), body_kernel=(3, 3))
    params = mnet.init_mambanet(cfg, rng)
    tokens = rng.standard_normal((cfg.seq_len, 2))
    target = rng.standard_normal((cfg.n_f, cfg.n_s, 2))

    def loss_value():
        with tz.no_grad():
            out = mnet.forward_tokens(tz.Tensor(tokens), params, cfg)
            return trn.huber_loss(out, target).item()

    loss = trn.huber_loss(mnet.forward_tokens(tz.Tensor(tokens), params, cfg), target)
    loss.backward()
    worst = 0.0
    for name, p in params.items():
        fd = ref.fd_gradient(loss_value, p.data).reshape(p.shape)
        worst = max(worst, ref.relative_gradient_error(p.grad, fd))
    params.zero_grad()
    return "tiny full-model gradients match finite differences", worst < 1e-4, f"max rel err {worst:.2e}"


def check_backward_linearity():
    rng = _rng(10)
    x = tz.Tensor(rng.standard_normal((5, 3)), requires_grad=True)
    a = tz.sum_all(tz.silu(x))
    b = tz.mean_all(tz.mul(x, x))
    tz.backward(a + b)
    combined = x.grad.copy()
    x.zero_grad()
    tz.backward(tz.sum_all(tz.silu(x)))
    tz.backward(tz.mean_all(tz.mul(x, x)))
    err = float(np.abs(x.grad - combined).max())
    return "backward is additive across losses", err < 1e-12, f"max err {err:.2e}"


def check_parameter_counts():
    cfg = mnet.MambaNetConfig()
    params = mnet.init_mambanet(cfg, _rng(11))
    total = mnet.count_parameters(params)
    proj = mnet.attention_projection_count(cfg)
    ok = proj == 156636 and 250_000 <= total <= 450_000
    return "parameter counts (projection closed form, total band)", ok, f"total {total}, projection {proj}"


def check_optimizer_basics():
    ok = abs(trn.TrainConfig().lr_at(60) - 1.25e-4) < 1e-12
    p = trn.huber_loss(tz.Tensor(np.array([2.0])), np.array([0.0]), 1.0).item()
    ok = ok and abs(p - 1.5) < 1e-12
    cfg = mnet.MambaNetConfig(n_f=8, n_s=4, l_s=4, n_pilot=2, n_heads=2, c_spread=2,
                              n_res_blocks=1, cnn_channels=2, head_kernel=(4, 3), body_kernel=(3, 3))
    params = mnet.init_mambanet(cfg, _rng(12))
    state = trn.init_adam_state(params)
    before = params["mamba.w_a"].data.copy()
    grads = {name: np.zeros_like(q.data) for name, q in params.items()}
    grads["mamba.w_a"] = np.full_like(before, 0.37)
    trn.adam_step(params, grads, state, lr=1e-3)
    step = params["mamba.w_a"].data - before
    ok = ok and np.abs(step + 1e-3).max() < 1e-6
    return "optimizer and loss basics", bool(ok), "lr schedule, huber knee, first Adam step"


def check_dataset_determinism():
    cfg = bb.BasebandConfig(n_f=16, l_cp=4)
    d1 = trn.generate_dataset(8, (5, 25), (0, 97), cfg, chn.ETU, seed=5)
    d2 = trn.generate_dataset(8, (5, 25), (0, 97), cfg, chn.ETU, seed=5, workers=2)
    buf1, buf2 = io.BytesIO(), io.BytesIO()

    ok = (
        np.array_equal(d1.inputs, d2.inputs)
        and np.array_equal(d1.labels, d2.labels)
        and np.array_equal(d1.snr_db, d2.snr_db)
    )
    return "dataset generation is seed-deterministic", ok, "8 samples, 1 vs 2 workers"


def check_noise_calibration():
    rng = _rng(13)
    cfg = bb.BasebandConfig()
    grid = bb.build_slot(bb.qpsk_modulate(rng.integers(0, 2, cfg.n_data_bits)), cfg)
    flat = chn.FrequencyResponse(np.ones((cfg.n_f, cfg.n_s)))
    total, count = 0.0, 0
    for _ in range(40):
        y = chn.apply_channel_freq(grid, flat, 10.0, rng)
        total += float(np.sum(np.abs(y.values - grid.values) ** 2))
        count += grid.values.size
    measured_db = -10.0 * np.log10(total / count / 1.0)
    err = abs(measured_db - 10.0)
    return "injected noise matches requested SNR", err < 0.2, f"off by {err:.3f} dB"


ALL_CHECKS = [
    check_scan_equivalence,
    check_scan_quotient_oracle,
    check_scan_backends,
    check_dft,
    check_softmax_rows,
    check_loopback,
    check_time_freq_paths,
    check_interpolation,
    check_mmse_identities,
    check_op_gradients,
    check_model_gradients,
    check_backward_linearity,
    check_parameter_counts,
    check_optimizer_basics,
    check_dataset_determinism,
    check_noise_calibration,
]


def run_all(log=print) -> bool:
    """Run every check, log one PASS/FAIL line each, return overall result."""
    all_ok = True
    for check in ALL_CHECKS:
        name, ok, detail = check()
        all_ok &= ok
        log(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")
    return all_ok
