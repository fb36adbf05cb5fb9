"""Independent numerical oracles: finite-difference gradient checks, FFT
roundtrips, brute-force attention, and structural/schedule/metric probes.

Everything here is written against the public contracts only, with loop-level
reference math kept separate from the implementations it checks.
"""

import copy
import math
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch

from .blocks import (
    ChannelFFN,
    F2T2Block,
    FFTLayer,
    HiTBlock,
    NAFBlock,
    SpatialFFN,
    spatial_self_correlation,
    window_merge,
    window_partition,
)
from .errors import ConfigError
from .metrics import psnr, ssim
from .network import ModelConfig, build_model, desk_model_config
from .training import TrainConfig, cosine_restart_lr

GRAD_TOLERANCE = 1e-3
LINEAR_GRAD_TOLERANCE = 1e-8
REL_ERROR_FLOOR = 1e-8
FD_STEP = 1e-4
MIN_COORDS = 64


@dataclass
class GradCheckReport:
    op_name: str
    input_shape: tuple
    max_rel_error: float
    elapsed_seconds: float
    passed: bool
    note: str = ""


@dataclass
class CheckResult:
    name: str
    group: str
    passed: bool
    detail: str = ""
    value: Optional[float] = None

    def as_dict(self):
        return {"name": self.name, "group": self.group, "passed": self.passed,
                "detail": self.detail, "value": self.value}


def finite_diff_grad_check(op_name, module, input_shape, seed=0, step=FD_STEP,
                           coords=MIN_COORDS, tolerance=GRAD_TOLERANCE,
                           negate_first_grad=False):
    """Compare autograd against central differences on sampled coordinates.

    The module is copied to double precision and its parameters are jittered
    so that zero-initialized gains do not hide entire paths. A random probe
    turns the output into a scalar objective. negate_first_grad flips the
    sign of one analytic gradient to prove the check can fail.
    """
    started = time.perf_counter()
    work = copy.deepcopy(module).double()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        with torch.no_grad():
            for p in work.parameters():
                p.add_(0.25 * torch.randn_like(p))
        x = torch.randn(input_shape, dtype=torch.float64, requires_grad=True)
        y = work(x)
        probe = torch.randn_like(y)

    def objective():
        return float((work(x) * probe).sum())

    value = (work(x) * probe).sum()
    params = [p for p in work.parameters() if p.requires_grad]
    grads = list(torch.autograd.grad(value, [x] + params))
    if negate_first_grad:
        grads[0] = -grads[0]

    tensors = [x] + params
    sizes = [t.numel() for t in tensors]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    picked = (np.arange(total) if total <= coords
              else rng.choice(total, size=coords, replace=False))

    max_rel = 0.0
    try:
        with torch.no_grad():
            for flat in picked:
                flat = int(flat)
                which = 0
                while flat >= sizes[which]:
                    flat -= sizes[which]
                    which += 1
                holder = tensors[which].view(-1)
                original = float(holder[flat])
                holder[flat] = original + step
                plus = objective()
                holder[flat] = original - step
                minus = objective()
                holder[flat] = original
                numeric = (plus - minus) / (2 * step)
                analytic = float(grads[which].view(-1)[flat])
                rel = abs(analytic - numeric) / max(
                    abs(analytic), abs(numeric), REL_ERROR_FLOOR)
                max_rel = max(max_rel, rel)
    except Exception as exc:  # op failed mid-perturbation
        return GradCheckReport(op_name, tuple(input_shape), float("inf"),
                               time.perf_counter() - started, False,
                               note=f"op raised during perturbation: {exc}")

    elapsed = time.perf_counter() - started
    return GradCheckReport(op_name, tuple(input_shape), max_rel, elapsed,
                           max_rel < tolerance)


def attention_oracle(q, k, v):
    """softmax(Q^T K / sqrt(C)) applied to V by explicit loops.

    Takes one window's (C, h, w) planes; positions are tokens, channels are
    feature depth. Deliberately slow and simple.
    """
    qa = np.asarray(q, dtype=np.float64)
    ka = np.asarray(k, dtype=np.float64)
    va = np.asarray(v, dtype=np.float64)
    channels, h, w = qa.shape
    n = h * w
    qf = qa.reshape(channels, n)
    kf = ka.reshape(channels, n)
    vf = va.reshape(channels, n)

    scores = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            s = 0.0
            for c in range(channels):
                s += qf[c, i] * kf[c, j]
            scores[i, j] = s / math.sqrt(channels)

    out = np.zeros((channels, n))
    for i in range(n):
        top = scores[i].max()
        exp_row = np.array([math.exp(scores[i, j] - top) for j in range(n)])
        weights = exp_row / exp_row.sum()
        for c in range(channels):
            acc = 0.0
            for j in range(n):
                acc += weights[j] * vf[c, j]
            out[c, i] = acc
    return out.reshape(channels, h, w)


def spectral_roundtrip_check(shape, trials=10, dtype=torch.float64, seed=0,
                             constant=False):
    """Max |irFFT(rFFT(x)) - x| over random (or constant) trials."""
    max_err = 0.0
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for _ in range(trials):
            if constant:
                x = torch.full(shape, 0.5, dtype=dtype)
            else:
                x = torch.randn(shape, dtype=dtype)
            spectrum = torch.fft.rfft2(x, norm="ortho")
            back = torch.fft.irfft2(spectrum, s=x.shape[-2:], norm="ortho")
            max_err = max(max_err, float((back - x).abs().max()))
    return max_err


def _grad_checks(inject_fault=False):
    conv = torch.nn.Conv2d(6, 4, kernel_size=1)
    # a large step is exact for linear maps and dodges cancellation error
    cases = [
        ("conv1x1", conv, (2, 6, 5, 5), LINEAR_GRAD_TOLERANCE, 0.5),
        ("naf_block", NAFBlock(8), (1, 8, 8, 8), GRAD_TOLERANCE, FD_STEP),
        ("hit_block", HiTBlock(16, (4, 8, 16)), (1, 16, 16, 16),
         GRAD_TOLERANCE, FD_STEP),
        ("f2t2_block", F2T2Block(8), (1, 8, 8, 8), GRAD_TOLERANCE, FD_STEP),
        ("fft_layer", FFTLayer(8), (1, 8, 7, 9), GRAD_TOLERANCE, FD_STEP),
        ("spatial_ffn", SpatialFFN(8), (1, 8, 9, 9), GRAD_TOLERANCE, FD_STEP),
        ("channel_ffn", ChannelFFN(8), (1, 8, 6, 6), GRAD_TOLERANCE, FD_STEP),
        ("network", build_model(
            ModelConfig(base_width=8, num_levels=2, enc_blocks=(1,),
                        middle_blocks=1, dec_blocks=(1,),
                        window_hierarchy=(4,)), "full", seed=3),
         (1, 3, 32, 32), GRAD_TOLERANCE, FD_STEP),
    ]
    results = []
    for index, (name, module, shape, tol, step) in enumerate(cases):
        report = finite_diff_grad_check(
            name, module, shape, seed=11 + index, step=step, tolerance=tol,
            negate_first_grad=inject_fault and index == 0)
        detail = (f"max rel err {report.max_rel_error:.3e} "
                  f"(tol {tol:.0e}, {report.elapsed_seconds:.2f}s)")
        if report.note:
            detail += f"; {report.note}"
        results.append(CheckResult(
            f"grad/{name}", "gradients", report.passed, detail,
            report.max_rel_error))
    return results


def _spectral_checks():
    cases = [
        ("even_dims", (3, 16, 16), False, 1e-12),
        ("odd_dims", (3, 17, 13), False, 1e-12),
        ("constant", (3, 16, 16), True, 1e-13),
    ]
    results = []
    for name, shape, constant, bound in cases:
        err = spectral_roundtrip_check(shape, trials=10, constant=constant)
        results.append(CheckResult(
            f"spectral/{name}", "spectral", err < bound,
            f"max abs err {err:.3e} (bound {bound:.0e})", err))
    return results


def _structure_checks():
    results = []
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(5)
        x = torch.randn(2, 6, 24, 16)
        windows = window_partition(x, 8)
        back = window_merge(windows, (2, 24, 16))
        err = float((back - x).abs().max())
    results.append(CheckResult(
        "structure/partition_merge", "structure", err == 0.0,
        f"roundtrip max abs err {err:.1e}", err))

    model = build_model(desk_model_config(), "full", seed=0)
    model.eval()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(6)
        probe = torch.rand(1, 3, 40, 56)
    with torch.no_grad():
        out = model(probe)
    err = float((out - probe).abs().max())
    results.append(CheckResult(
        "structure/identity_at_init", "structure", err == 0.0,
        f"fresh model deviates from identity by {err:.1e}", err))
    return results


def _schedule_checks():
    cfg = TrainConfig()
    expected = [
        ("start", 0, 1e-4),
        ("second_period", 100000, 5e-5),
        ("third_period", 200000, 2.5e-5),
        ("midpoint", 50000,
         cfg.eta_min + (cfg.lr0 - cfg.eta_min) / 2),
    ]
    results = []
    for name, iteration, want in expected:
        got = cosine_restart_lr(iteration, cfg)
        err = abs(got - want)
        results.append(CheckResult(
            f"schedule/{name}", "schedule", err < 1e-12,
            f"lr({iteration}) = {got:.6e}, expected {want:.6e}", got))
    return results


def _metric_checks():
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(7)
        a = torch.rand(3, 32, 32, dtype=torch.float64) * 0.8 + 0.05
    b = a + 0.1
    got = psnr(b, a)
    results = [CheckResult(
        "metrics/psnr_offset", "metrics", abs(got - 20.0) < 1e-9,
        f"psnr at constant 0.1 offset = {got:.9f} dB", got)]
    results.append(CheckResult(
        "metrics/psnr_identical", "metrics", psnr(a, a) == 100.0,
        "identical images cap at 100 dB", psnr(a, a)))
    same = ssim(a, a)
    results.append(CheckResult(
        "metrics/ssim_identical", "metrics", abs(same - 1.0) < 1e-9,
        f"ssim of identical images = {same:.9f}", same))
    noisy = (a + 0.2 * torch.randn_like(a)).clamp(0, 1)
    lower = ssim(noisy, a)
    results.append(CheckResult(
        "metrics/ssim_noise", "metrics", lower < same,
        f"ssim drops under noise ({lower:.4f} < {same:.4f})", lower))
    return results


def _attention_checks():
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(8)
        q = torch.randn(6, 4, 4, dtype=torch.float64)
        k = torch.randn(6, 4, 4, dtype=torch.float64)
        v = torch.randn(6, 4, 4, dtype=torch.float64)
    fast = spatial_self_correlation(q, k, v, window_size=4)
    slow = torch.from_numpy(attention_oracle(q, k, v))
    err = float((fast - slow).abs().max())
    return [CheckResult(
        "attention/oracle_match", "attention", err < 1e-5,
        f"window attention vs loop oracle, max abs err {err:.3e}", err)]


CHECK_GROUPS = ("gradients", "spectral", "structure", "schedule", "metrics",
                "attention")


def run_checks(scope=None, inject_gradient_fault=False):
    """Run the verification suite, optionally restricted to one group."""
    if scope is not None and scope not in CHECK_GROUPS:
        raise ConfigError(
            f"unknown scope {scope!r}; choose from {', '.join(CHECK_GROUPS)}")
    runners = {
        "gradients": lambda: _grad_checks(inject_gradient_fault),
        "spectral": _spectral_checks,
        "structure": _structure_checks,
        "schedule": _schedule_checks,
        "metrics": _metric_checks,
        "attention": _attention_checks,
    }
    results = []
    for group in CHECK_GROUPS:
        if scope is None or group == scope:
            results.extend(runners[group]())
    return results
