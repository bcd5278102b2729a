"""
Invariant suite run by ``cli_bench.py selftest``.

Checks:
- adjoint identity <Hx, v> = <x, H^T v> on random pairs for every operator configuration
- apply_H, apply_Ht and project_onto_constraint against dense-matrix oracles on 24x24 images
- cg_solve against a dense direct solve of (H H^T) a = b
- projection residual and idempotence
- finite-difference gradient check of the denoiser architecture
- delta schedule endpoints and the floor

The operator functions are injectable so that a deliberately broken adjoint can
be shown to fail the suite.
"""
import logging
import math
import time
from dataclasses import dataclass

import numpy as np

import nn_engine as nn
from denoiser_bank import BANK_PROFILES, NoiseLevel, nearest_level
from idbp_driver import DeltaSchedule, delta_at, first_floor_index
from linops import (
    CgConfig,
    DegradationOperator,
    apply_H,
    apply_Ht,
    build_dense_operator,
    cg_solve,
    make_bicubic_kernel,
    make_gaussian_kernel,
    project_onto_constraint,
)

logger = logging.getLogger(__name__)

ADJOINT_TOL = 1e-9
DENSE_TOL = 1e-5
CG_TOL = 1e-6
RESIDUAL_TOL = 1e-5
IDEMPOTENCE_TOL = 1e-6
GRADCHECK_TOL = 1e-4
ORACLE_CG = CgConfig(tolerance=1e-12, max_iters=1000)
IDEMPOTENCE_CG = CgConfig(tolerance=1e-9, max_iters=500)


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    limit: float
    detail: str = ""

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.value:.3e} (limit {self.limit:.1e}) {self.detail}".rstrip()


def selftest_operators():
    return [
        ("bicubic_x2", DegradationOperator(make_bicubic_kernel(2), 2)),
        ("bicubic_x3", DegradationOperator(make_bicubic_kernel(3), 3)),
        ("gaussian_x3", DegradationOperator(make_gaussian_kernel(7, 1.6), 3)),
    ]


def _reflect(q, n):
    # half-sample symmetric: ... x1 x0 | x0 x1 ... x_{n-1} | x_{n-1} x_{n-2} ...
    while q < 0 or q >= n:
        q = -q - 1 if q < 0 else 2 * n - q - 1
    return q


def reference_dense_H(op: DegradationOperator, hr_dims) -> np.ndarray:
    """Dense H written out tap by tap from the blur-then-decimate definition."""
    h, w = hr_dims
    lh, lw = op.lr_shape(hr_dims)
    taps = op.kernel.taps
    ar, ac = op.kernel.anchor
    s, p = op.scale, op.phase
    matrix = np.zeros((lh * lw, h * w))
    for i in range(lh):
        for j in range(lw):
            row = i * lw + j
            for u in range(taps.shape[0]):
                for v in range(taps.shape[1]):
                    q = _reflect(s * i + p - u + ar, h)
                    r = _reflect(s * j + p - v + ac, w)
                    matrix[row, q * w + r] += taps[u, v]
    return matrix


def check_adjoint(ops=None, n_pairs=100, hr_dims=(24, 24), seed=0, apply_H_fn=apply_H, apply_Ht_fn=apply_Ht):
    results = []
    rng = np.random.default_rng(seed)
    for name, op in ops or selftest_operators():
        lr_dims = op.lr_shape(hr_dims)
        worst = 0.0
        for _ in range(n_pairs):
            x = rng.standard_normal(hr_dims)
            v = rng.standard_normal(lr_dims)
            hx = apply_H_fn(op, x)
            lhs = float(np.vdot(hx, v))
            rhs = float(np.vdot(x, apply_Ht_fn(op, v, hr_dims)))
            scale = float(np.linalg.norm(hx) * np.linalg.norm(v)) or 1.0
            worst = max(worst, abs(lhs - rhs) / scale)
        results.append(CheckResult(f"adjoint {name}", worst <= ADJOINT_TOL, worst, ADJOINT_TOL, f"{n_pairs} pairs"))
    return results


def check_dense_oracle(ops=None, hr_dims=(24, 24), seed=0, apply_H_fn=apply_H, apply_Ht_fn=apply_Ht):
    results = []
    rng = np.random.default_rng(seed)
    for name, op in ops or selftest_operators():
        dense = reference_dense_H(op, hr_dims)
        lr_dims = op.lr_shape(hr_dims)
        x = rng.random(hr_dims)
        v = rng.standard_normal(lr_dims)

        err_h = float(np.max(np.abs(apply_H_fn(op, x).ravel() - dense @ x.ravel())))
        err_ht = float(np.max(np.abs(apply_Ht_fn(op, v, hr_dims).ravel() - dense.T @ v.ravel())))
        err_matrix = float(np.max(np.abs(build_dense_operator(op, hr_dims) - dense)))

        y = dense @ rng.random(hr_dims).ravel()
        x_tilde = rng.random(hr_dims)
        pinv = np.linalg.pinv(dense)
        expected = pinv @ y + x_tilde.ravel() - pinv @ (dense @ x_tilde.ravel())
        proj = project_onto_constraint(op, x_tilde, y.reshape(lr_dims), ORACLE_CG)
        err_proj = float(np.max(np.abs(proj.z.ravel() - expected)))

        worst = max(err_h, err_ht, err_matrix, err_proj)
        detail = f"H {err_h:.1e}, Ht {err_ht:.1e}, matrix {err_matrix:.1e}, projection {err_proj:.1e}"
        results.append(CheckResult(f"dense oracle {name}", worst <= DENSE_TOL, worst, DENSE_TOL, detail))
    return results


def check_cg(ops=None, hr_dims=(24, 24), seed=0):
    results = []
    rng = np.random.default_rng(seed)
    for name, op in ops or selftest_operators():
        lr_dims = op.lr_shape(hr_dims)
        dense = reference_dense_H(op, hr_dims)
        b = rng.standard_normal(lr_dims)

        def apply_HHt(a):
            return apply_H(op, apply_Ht(op, a, hr_dims))

        cg = cg_solve(apply_HHt, b, ORACLE_CG)
        direct = np.linalg.solve(dense @ dense.T, b.ravel())
        err = float(np.max(np.abs(cg.solution.ravel() - direct)))
        passed = cg.converged and err <= CG_TOL
        results.append(CheckResult(f"cg vs dense {name}", passed, err, CG_TOL, f"{cg.iterations} iterations"))
    return results


def check_projection(ops=None, hr_dims=(48, 48), seed=0):
    results = []
    rng = np.random.default_rng(seed)
    for name, op in ops or selftest_operators():
        y = apply_H(op, rng.random(hr_dims))
        x_tilde = rng.random(hr_dims)
        first = project_onto_constraint(op, x_tilde, y)
        tight = project_onto_constraint(op, x_tilde, y, IDEMPOTENCE_CG)
        again = project_onto_constraint(op, tight.z, y, IDEMPOTENCE_CG)
        rms = float(np.sqrt(np.mean((again.z - tight.z) ** 2)))
        results.append(
            CheckResult(f"projection residual {name}", first.constraint_residual <= RESIDUAL_TOL, first.constraint_residual, RESIDUAL_TOL)
        )
        results.append(CheckResult(f"projection idempotence {name}", rms <= IDEMPOTENCE_TOL, rms, IDEMPOTENCE_TOL))
    return results


def check_gradients(n_configs=100, seed=0, width=8, depth=4, patch=6, grads_hook=None):
    """Finite-difference check of the denoiser architecture at random weights and inputs.

    ``grads_hook(grads) -> grads`` may corrupt the analytic gradients.
    """
    worst = 0.0
    seqs = np.random.SeedSequence(seed).spawn(n_configs)
    for seq in seqs:
        rng = np.random.default_rng(seq)
        net = nn.build_denoiser_net(width, depth, np.float64, rng)
        for conv in net.convs:
            conv.bias[:] = rng.normal(0.0, 0.1, conv.bias.shape)
        inputs = rng.random((2, 1, patch, patch))
        targets = rng.normal(0.0, 0.1, inputs.shape)
        grads = None
        if grads_hook is not None:
            _, grads = net.loss_and_grads(nn.TrainBatch(inputs, targets))
            grads = grads_hook(grads)
        err = nn.gradcheck(net, inputs, targets, h=1e-5, n_checks=8, rng=rng, grads=grads)
        worst = max(worst, err)
    return [CheckResult("gradcheck denoiser", worst <= GRADCHECK_TOL, worst, GRADCHECK_TOL, f"{n_configs} configurations")]


def check_schedule():
    results = []
    for s in (2, 3, 4):
        sched = DeltaSchedule(s, 30)
        err = max(abs(delta_at(sched, 0) - 12.0 * s), abs(delta_at(sched, 29) - s))
        results.append(CheckResult(f"schedule endpoints x{s}", err <= 1e-12, err, 1e-12))
    floored = DeltaSchedule(3, 30, floor=10.0)
    start = first_floor_index(floored)
    tail = floored.values()[start:] if start is not None else []
    levels = {nearest_level([NoiseLevel(v) for v in BANK_PROFILES["desk"]], d) for d in tail}
    ok = start is not None and all(d == 10.0 for d in tail) and len(levels) == 1
    results.append(
        CheckResult("schedule floor x3 at 10", ok, float(start if start is not None else math.nan), 29.0, f"first floored iteration {start}")
    )
    return results


def run_selftest(apply_H_fn=apply_H, apply_Ht_fn=apply_Ht, gradcheck_configs=100, seed=0, grads_hook=None):
    """Run every check; returns the list of CheckResult records."""
    results = []
    stages = [
        ("adjoint", lambda: check_adjoint(seed=seed, apply_H_fn=apply_H_fn, apply_Ht_fn=apply_Ht_fn)),
        ("dense oracle", lambda: check_dense_oracle(seed=seed, apply_H_fn=apply_H_fn, apply_Ht_fn=apply_Ht_fn)),
        ("cg", lambda: check_cg(seed=seed)),
        ("projection", lambda: check_projection(seed=seed)),
        ("gradcheck", lambda: check_gradients(gradcheck_configs, seed, grads_hook=grads_hook)),
        ("schedule", check_schedule),
    ]
    for label, stage in stages:
        start = time.perf_counter()
        results.extend(stage())
        logger.info("selftest %s done in %.1fs", label, time.perf_counter() - start)
    return results


def all_passed(results) -> bool:
    return all(r.passed for r in results)
