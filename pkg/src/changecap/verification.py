"""Finite-difference verification scopes and the scan benchmark.

Everything here runs in float64. Each scope returns {check_name: max_rel_err}
so both the CLI and the test suite can assert the per-scope thresholds:
1e-6 for primitives, 1e-5 for the selective pipeline, 1e-4 for blocks and
decoders, 1e-3 for the multi-layer encoder stack.
"""

from __future__ import annotations

import time

import numpy as np

from . import ops
from .decoders import caption_loss, init_decoder, teacher_forced_logits
from .encoder import (BiTemporalPair, EncoderStackConfig, init_encoder,
                      init_spatial_block, init_temporal_block)
from .gradcheck import check_parameters, finite_difference_check
from .nn import named_parameters
from .rng import stream
from .ssm import (demo_params, random_scan_instance, scan_parallel,
                  scan_sequential, selective_ssm)
from .tensor import Tensor
from .vocabulary import BOS, PAD

SCOPES = ("ops", "ssm", "sdssm", "ttssm", "stack", "decoders")
THRESHOLDS = {"ops": 1e-6, "ssm": 1e-5, "sdssm": 1e-4, "ttssm": 1e-4,
              "stack": 1e-3, "decoders": 1e-4}


def _proj(rng, shape) -> np.ndarray:
    """Fixed random readout so the scalar loss is sensitive to every output."""
    return rng.normal(size=shape)


def _condition_timescales(module, seed: int = 99) -> None:
    """Re-draw delta biases so softplus lands in [0.2, 1.0].

    The training init keeps timescales in [1e-3, 1e-1]; those make a_log
    gradients small enough that h=1e-5 central differences sit on the f64
    roundoff floor. The backward code is input-independent, so checking it
    at better-conditioned timescales loses nothing.
    """
    rng = stream(seed, "gradcheck-delta")
    for name, t in named_parameters(module).items():
        if name.endswith("delta_bias"):
            dt = rng.uniform(0.25, 0.6, size=t.shape)
            t.data = np.log(np.expm1(dt)).astype(t.data.dtype)


def _scalarize(out: Tensor, proj: np.ndarray) -> Tensor:
    return (out * Tensor(proj)).sum()


def check_ops(seed: int = 0) -> dict[str, float]:
    rng = stream(seed, "gradcheck-ops")
    errs: dict[str, float] = {}

    def fd(name, f, x):
        errs[name] = finite_difference_check(f, x)

    x34 = Tensor(rng.normal(size=(3, 4)), dtype=np.float64)
    x4 = Tensor(rng.normal(size=4), dtype=np.float64)
    p34 = _proj(rng, (3, 4))

    fd("add.lhs", lambda t: _scalarize(ops.add(t, x4), p34), Tensor(rng.normal(size=(3, 4)), dtype=np.float64))
    fd("add.rhs_broadcast", lambda t: _scalarize(ops.add(x34, t), p34), Tensor(rng.normal(size=4), dtype=np.float64))
    fd("sub", lambda t: _scalarize(ops.sub(t, x4), p34), Tensor(rng.normal(size=(3, 4)), dtype=np.float64))
    fd("mul", lambda t: _scalarize(ops.mul(t, x34), p34), Tensor(rng.normal(size=4), dtype=np.float64))
    fd("div", lambda t: _scalarize(ops.div(x34, t), p34), Tensor(rng.uniform(0.5, 2.0, size=4), dtype=np.float64))
    for name in ("exp", "sigmoid", "softplus", "silu"):
        fd(name, lambda t, op=name: _scalarize(ops.elementwise(op, t), p34),
           Tensor(rng.normal(size=(3, 4)), dtype=np.float64))

    w = Tensor(rng.normal(size=(4, 2)), dtype=np.float64)
    p32 = _proj(rng, (3, 2))
    fd("matmul.lhs", lambda t: _scalarize(ops.matmul(t, w), p32), Tensor(rng.normal(size=(3, 4)), dtype=np.float64))
    fd("matmul.rhs", lambda t: _scalarize(ops.matmul(x34, t), p32), Tensor(rng.normal(size=(4, 2)), dtype=np.float64))
    xb = Tensor(rng.normal(size=(2, 3, 4)), dtype=np.float64)
    pb = _proj(rng, (2, 3, 2))
    fd("matmul.batched_rhs", lambda t: _scalarize(ops.matmul(xb, t), pb), Tensor(rng.normal(size=(4, 2)), dtype=np.float64))

    gamma = Tensor(rng.normal(size=6) + 1.0, dtype=np.float64)
    beta = Tensor(rng.normal(size=6), dtype=np.float64)
    p46 = _proj(rng, (4, 6))
    fd("layer_norm.x", lambda t: _scalarize(ops.layer_norm(t, gamma, beta), p46), Tensor(rng.normal(size=(4, 6)), dtype=np.float64))
    x46 = Tensor(rng.normal(size=(4, 6)), dtype=np.float64)
    fd("layer_norm.gamma", lambda t: _scalarize(ops.layer_norm(x46, t, beta), p46), Tensor(rng.normal(size=6), dtype=np.float64))
    fd("layer_norm.beta", lambda t: _scalarize(ops.layer_norm(x46, gamma, t), p46), Tensor(rng.normal(size=6), dtype=np.float64))

    kern = Tensor(rng.normal(size=(3, 3)), dtype=np.float64)
    p53 = _proj(rng, (5, 3))
    fd("conv.same.x", lambda t: _scalarize(ops.depthwise_conv1d(t, kern, "same"), p53), Tensor(rng.normal(size=(5, 3)), dtype=np.float64))
    x53 = Tensor(rng.normal(size=(5, 3)), dtype=np.float64)
    fd("conv.same.kernel", lambda t: _scalarize(ops.depthwise_conv1d(x53, t, "same"), p53), Tensor(rng.normal(size=(3, 3)), dtype=np.float64))
    fd("conv.causal.x", lambda t: _scalarize(ops.depthwise_conv1d(t, kern, "causal"), p53), Tensor(rng.normal(size=(5, 3)), dtype=np.float64))

    fd("flip_seq", lambda t: _scalarize(ops.flip_seq(t), p53), Tensor(rng.normal(size=(5, 3)), dtype=np.float64))
    fd("softmax", lambda t: _scalarize(ops.softmax(t), p34), Tensor(rng.normal(size=(3, 4)), dtype=np.float64))

    targets = np.array([1, 3, 0])
    fd("softmax_cross_entropy", lambda t: ops.softmax_cross_entropy(t, targets),
       Tensor(rng.normal(size=(3, 4)), dtype=np.float64))
    mask = np.array([1.0, 0.0, 1.0])
    fd("softmax_cross_entropy.masked", lambda t: ops.softmax_cross_entropy(t, targets, mask=mask),
       Tensor(rng.normal(size=(3, 4)), dtype=np.float64))

    fd("reduce_sum", lambda t: ops.reduce_sum(t), Tensor(rng.normal(size=(3, 4)), dtype=np.float64))
    p3 = _proj(rng, (3,))
    fd("reduce_mean.axis", lambda t: _scalarize(ops.reduce_mean(t, axis=-1), p3), Tensor(rng.normal(size=(3, 4)), dtype=np.float64))
    p38 = _proj(rng, (3, 8))
    fd("concat", lambda t: _scalarize(ops.concat([t, x34], axis=-1), p38), Tensor(rng.normal(size=(3, 4)), dtype=np.float64))
    p23 = _proj(rng, (2, 3))
    fd("row_slice.strided", lambda t: _scalarize(ops.row_slice(t, 1, None, 2), p23), Tensor(rng.normal(size=(5, 3)), dtype=np.float64))
    p103 = _proj(rng, (10, 3))
    fd("interleave_rows", lambda t: _scalarize(ops.interleave_rows(t, x53), p103), Tensor(rng.normal(size=(5, 3)), dtype=np.float64))
    ids = np.array([0, 2, 2, 1])
    p43 = _proj(rng, (4, 3))
    fd("embedding", lambda t: _scalarize(ops.embedding(t, ids), p43), Tensor(rng.normal(size=(5, 3)), dtype=np.float64))
    p26 = _proj(rng, (2, 6))
    fd("reshape", lambda t: _scalarize(ops.reshape(t, (2, 6)), p26), Tensor(rng.normal(size=(3, 4)), dtype=np.float64))
    fd("transpose", lambda t: _scalarize(ops.transpose(t, (1, 0)), p43), Tensor(rng.normal(size=(3, 4)), dtype=np.float64))
    return errs


def check_ssm(seed: int = 0) -> dict[str, float]:
    rng = stream(seed, "gradcheck-ssm")
    errs: dict[str, float] = {}

    x, a_bar, b_bar, c, skip = random_scan_instance(rng, length=6, width=4, state_size=3)
    proj = _proj(rng, x.shape)
    for scan, tag in ((scan_sequential, "seq"), (scan_parallel, "par")):
        errs[f"scan_{tag}.x"] = finite_difference_check(
            lambda t: _scalarize(scan(t, a_bar, b_bar, c, skip), proj),
            Tensor(x.data.copy(), dtype=np.float64))
        errs[f"scan_{tag}.a_bar"] = finite_difference_check(
            lambda t: _scalarize(scan(x, t, b_bar, c, skip), proj),
            Tensor(a_bar.data.copy(), dtype=np.float64))
        errs[f"scan_{tag}.b_bar"] = finite_difference_check(
            lambda t: _scalarize(scan(x, a_bar, t, c, skip), proj),
            Tensor(b_bar.data.copy(), dtype=np.float64))
        errs[f"scan_{tag}.c"] = finite_difference_check(
            lambda t: _scalarize(scan(x, a_bar, b_bar, t, skip), proj),
            Tensor(c.data.copy(), dtype=np.float64))
        errs[f"scan_{tag}.skip"] = finite_difference_check(
            lambda t: _scalarize(scan(x, a_bar, b_bar, c, t), proj),
            Tensor(skip.data.copy(), dtype=np.float64))

    # full selective pipeline (project -> discretize -> scan), both modes
    for mode in ("euler", "exact"):
        params = demo_params(4, 3, seed=seed + 1)
        xin = Tensor(rng.normal(size=(5, 4)), dtype=np.float64)
        pproj = _proj(rng, (5, 4))

        def pipeline():
            return _scalarize(selective_ssm(xin, params, mode=mode), pproj)

        named = {f"pipeline[{mode}].{k}": v for k, v in vars(params).items()}
        named[f"pipeline[{mode}].x"] = xin
        errs.update(check_parameters(pipeline, named))
    return errs


def _block_errors(block, pair: BiTemporalPair, proj: np.ndarray,
                  prefix: str) -> dict[str, float]:
    params = named_parameters(block, prefix=prefix)
    params[f"{prefix}/input_t1"] = pair.t1
    params[f"{prefix}/input_t2"] = pair.t2

    def f():
        out = block(pair)
        merged = ops.concat([out.t1, out.t2], axis=-1)
        return _scalarize(merged, proj)

    return check_parameters(f, params)


def check_sdssm(seed: int = 0) -> dict[str, float]:
    rng = stream(seed, "gradcheck-sdssm")
    cfg = EncoderStackConfig(num_layers=1, width=8, state_size=4)
    block = init_spatial_block(cfg, rng, dtype=np.float64)
    _condition_timescales(block)
    pair = BiTemporalPair(Tensor(rng.normal(size=(6, 8)), dtype=np.float64),
                          Tensor(rng.normal(size=(6, 8)), dtype=np.float64))
    return _block_errors(block, pair, _proj(rng, (6, 16)), "sdssm")


def check_ttssm(seed: int = 0) -> dict[str, float]:
    rng = stream(seed, "gradcheck-ttssm")
    cfg = EncoderStackConfig(num_layers=1, width=8, state_size=4,
                          temporal_variant="interleave")
    block = init_temporal_block(cfg, rng, dtype=np.float64)
    _condition_timescales(block)
    pair = BiTemporalPair(Tensor(rng.normal(size=(5, 8)), dtype=np.float64),
                          Tensor(rng.normal(size=(5, 8)), dtype=np.float64))
    return _block_errors(block, pair, _proj(rng, (5, 16)), "ttssm")


def check_stack(seed: int = 0) -> dict[str, float]:
    rng = stream(seed, "gradcheck-stack")
    cfg = EncoderStackConfig(num_layers=2, width=8, state_size=4)
    enc = init_encoder(cfg, seq_len=4, rng=rng, dtype=np.float64)
    _condition_timescales(enc)
    pair = BiTemporalPair(Tensor(rng.normal(size=(4, 8)), dtype=np.float64),
                          Tensor(rng.normal(size=(4, 8)), dtype=np.float64))
    proj = _proj(rng, (4, 8))
    params = named_parameters(enc, prefix="stack")
    params["stack/input_t1"] = pair.t1
    params["stack/input_t2"] = pair.t2

    def f():
        return _scalarize(enc(pair), proj)

    return check_parameters(f, params)


def check_decoders(seed: int = 0) -> dict[str, float]:
    rng = stream(seed, "gradcheck-decoders")
    errs: dict[str, float] = {}
    tokens = np.array([BOS, 5, 7, 4])
    targets = np.array([5, 7, 4, PAD])
    for kind in ("mamba", "gpt_style", "cross_attention"):
        dec = init_decoder(kind, vocab_size=10, width=8, rng=rng, num_blocks=1,
                           n_heads=2, state_size=3, max_len=6, dtype=np.float64)
        _condition_timescales(dec)
        visual = Tensor(rng.normal(size=(3, 8)), dtype=np.float64)
        params = named_parameters(dec, prefix=f"decoder[{kind}]")
        params[f"decoder[{kind}]/visual"] = visual

        def f(dec=dec, visual=visual):
            return caption_loss(teacher_forced_logits(dec, visual, tokens), targets)

        errs.update(check_parameters(f, params))
    return errs


_SCOPE_FNS = {"ops": check_ops, "ssm": check_ssm, "sdssm": check_sdssm,
              "ttssm": check_ttssm, "stack": check_stack, "decoders": check_decoders}


def run_scope(scope: str, seed: int = 0) -> dict[str, float]:
    if scope not in _SCOPE_FNS:
        raise ValueError(f"unknown gradcheck scope '{scope}'")
    return _SCOPE_FNS[scope](seed)


def run_scopes(scopes, seed: int = 0):
    """(per-scope errors, per-scope worst, failures list)."""
    details: dict[str, dict[str, float]] = {}
    failures: list[str] = []
    for scope in scopes:
        errs = run_scope(scope, seed)
        details[scope] = errs
        limit = THRESHOLDS[scope]
        for name, err in errs.items():
            if err > limit:
                failures.append(f"{scope}:{name} err={err:.3e} > {limit:.0e}")
    return details, failures


# ---- scan benchmark ---------------------------------------------------------

def bench_scan(lengths, impls=("seq", "par"), repeats: int = 5, width: int = 4,
               state_size: int = 4, seed: int = 0):
    """Median forward wall time per implementation and length.

    Verifies parallel/sequential agreement (<= 1e-10 max abs) on every
    instance before timing anything. The default width/state keep the whole
    working set inside the cache at every length, so the measured cost is
    the step count rather than a memory-hierarchy cliff.
    """
    rng = stream(seed, "bench-scan")
    instances = {}
    diffs = {}
    for length in lengths:
        inst = random_scan_instance(rng, length, width=width, state_size=state_size)
        diff = float(np.abs(scan_sequential(*inst).data - scan_parallel(*inst).data).max())
        if diff > 1e-10:
            raise AssertionError(f"scan equivalence failed at L={length}: {diff:.3e}")
        instances[length] = inst
        diffs[length] = diff

    fns = {"seq": scan_sequential, "par": scan_parallel}
    cells = [(impl, length) for impl in impls for length in lengths]
    inner = 3  # calls per timed run; raises the quantum above scheduler jitter
    times: dict[tuple[str, int], list[float]] = {c: [] for c in cells}
    for impl, length in cells:  # settle the allocator before timing
        fns[impl](*instances[length])
        fns[impl](*instances[length])
    for _ in range(repeats):
        # round-robin over cells so slow drift hits every cell equally
        for impl, length in cells:
            fn, inst = fns[impl], instances[length]
            t0 = time.perf_counter()
            for _ in range(inner):
                fn(*inst)
            times[(impl, length)].append((time.perf_counter() - t0) * 1e3 / inner)

    rows = []
    for impl, length in cells:
        ts = sorted(times[(impl, length)])
        rows.append({"impl": impl, "L": length, "median_ms": ts[len(ts) // 2],
                     "max_abs_diff": diffs[length]})
    return rows
