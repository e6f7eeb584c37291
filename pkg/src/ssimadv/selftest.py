"""Invariant suites run by ``ssimadv selftest``.

Each check draws its own random cases from a fixed seed and compares the
library against an independent oracle (finite differences, direct formulas,
hand traces of the c schedule).
"""

import time
from dataclasses import dataclass

import numpy as np

from .attacks import SsimAttackConfig, binary_search_c, lagrangian, lagrangian_grad
from .metrics import (
    ConstraintThresholds,
    SsimParams,
    batch_constraint_gradients,
    batch_constraints,
    nmse,
    ssim,
)
from .model import Conv2D, Dense, Flatten, ReLU, ScoreModel


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self):
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.2f}s)"


def _timed(name, fn, *args):
    t = time.perf_counter()
    passed, detail = fn(*args)
    return CheckResult(name, bool(passed), detail, time.perf_counter() - t)


def random_image_pair(rng):
    side = int(rng.integers(4, 29))
    ch = int(rng.choice([1, 3]))
    x = rng.random((side, side, ch))
    mode = rng.integers(3)
    if mode == 0:
        y = rng.random(x.shape)
    elif mode == 1:
        y = np.clip(x + rng.normal(0, rng.uniform(0.01, 0.5), x.shape), 0, 1)
    else:
        y = 1.0 - x
    return x, y


def ssim_properties(n=1000, seed=0):
    rng = np.random.default_rng(seed)
    worst_sym = 0.0
    bad = 0
    for _ in range(n):
        x, y = random_image_pair(rng)
        a, b = ssim(x, y), ssim(y, x)
        worst_sym = max(worst_sym, abs(a - b))
        if ssim(x, x) != 1.0 or not -1.0 < a <= 1.0:
            bad += 1
    return worst_sym <= 1e-12 and bad == 0, f"{n} pairs, max |asym| {worst_sym:.1e}, violations {bad}"


def fd(f, y, h=1e-4):
    g = np.zeros_like(y)
    for idx in np.ndindex(y.shape):
        yp, ym = y.copy(), y.copy()
        yp[idx] += h
        ym[idx] -= h
        g[idx] = (f(yp) - f(ym)) / (2 * h)
    return g


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def constraint_gradient_check(n=100, seed=0, tol=1e-4):
    rng = np.random.default_rng(seed)
    p = SsimParams()
    worst = 0.0
    for _ in range(n):
        shape = (int(rng.integers(3, 7)), int(rng.integers(3, 7)), int(rng.choice([1, 3])))
        x = rng.random(shape)
        y = np.clip(x + rng.normal(0, 0.2, shape), 0, 1)
        t = ConstraintThresholds(*rng.uniform(0, 1, 2))
        grads = batch_constraint_gradients(y[None], x[None], p, t)[0]
        for i in range(4):
            num = fd(lambda yy: batch_constraints(yy[None], x[None], p, t)[0, i], y)
            worst = max(worst, _rel(grads[i], num))
    return worst <= tol, f"{n} cases x 4 constraints, worst rel. err {worst:.1e}"


def probe_model(seed, shape=(6, 6, 1), n_classes=4):
    rng = np.random.default_rng(seed)
    conv = Conv2D(shape[2], 4, 3, stride=1, rng=rng)
    conv.bias = rng.normal(0, 0.1, 4)
    flat = int(np.prod(conv.output_shape(shape)))
    d1 = Dense(flat, 10, rng=rng)
    d1.bias = rng.normal(0, 0.1, 10)
    return ScoreModel([conv, ReLU(), Flatten(), d1, ReLU(), Dense(10, n_classes, rng=rng)], shape, n_classes)


def _kink_distance(model, x, label):
    """Distance to the nearest ReLU kink, hinge, or score tie at ``x``."""
    a = x[None]
    dist = np.inf
    for layer in model.layers:
        if layer.kind == "relu":
            dist = min(dist, np.abs(a).min())
        a, _ = layer.forward(a)
    s = np.sort(np.delete(a[0], label))
    gap = a[0, label] - s[-1]
    return min(dist, abs(gap), s[-1] - s[-2])


def lagrangian_gradient_check(n=100, seed=0, tol=1e-3, h=1e-4):
    rng = np.random.default_rng(seed)
    cfg = SsimAttackConfig(thresholds=ConstraintThresholds(0.8, 0.8))
    worst, done, drawn = 0.0, 0, 0
    while done < n and drawn < 20 * n:
        drawn += 1
        m = probe_model(int(rng.integers(2**31)))
        x = rng.random((1,) + m.input_shape)
        label = m.predict(x)
        delta = rng.normal(0, 0.05, x.shape)
        if _kink_distance(m, (x + delta)[0], int(label[0])) < 1e-2:
            continue
        lam = rng.uniform(0, 5, (1, 4))
        c = np.array([rng.uniform(0.5, 20)])
        grad, _, _ = lagrangian_grad(m, x, label, delta, lam, c, cfg)
        num = fd(lambda d: lagrangian(m, x, label, d, lam, c, cfg)[0], delta, h)
        worst = max(worst, _rel(grad, num))
        done += 1
    return done == n and worst <= tol, f"{done} cases ({drawn} drawn), worst rel. err {worst:.1e}"


def quasiconvexity_check(n=1000, seed=0):
    rng = np.random.default_rng(seed)
    violations = 0
    for _ in range(n):
        d = int(rng.integers(1, 12))
        C = float(rng.choice([0.0, rng.uniform(0, 2)]))
        v = rng.normal(size=d)
        us = []
        while len(us) < 2:
            u = rng.normal(size=d) * rng.uniform(0.1, 3)
            if u @ v >= -C / 2:
                us.append(u)
        mid = nmse((us[0] + us[1]) / 2, v, C)
        if mid > max(nmse(us[0], v, C), nmse(us[1], v, C)) + 1e-9:
            violations += 1
    return violations == 0, f"{n} instances, {violations} violations"


def _trace(decide, steps):
    seen = []

    def runner(c):
        seen.append(float(c[0]))
        return np.zeros((1, 1, 1, 1)), np.array([decide(c[0])]), np.array([0.0])

    res = binary_search_c(runner, np.zeros((1, 1, 1, 1)), [0], steps)
    return seen, res


def binary_search_traces():
    fail, _ = _trace(lambda c: False, 9)
    expected_fail = [1e-3]
    for _ in range(8):
        expected_fail.append(expected_fail[-1] * 10)
    succeed, _ = _trace(lambda c: True, 3)
    _, mixed = _trace(lambda c: c >= 1.0, 9)
    upper = mixed.upper_trace[:, 0]
    ok = (fail == expected_fail and succeed == [1e-3, 5e-4, 2.5e-4]
          and bool(np.all(np.diff(upper) <= 0)) and bool(mixed.success[0]))
    return ok, f"fail trace {fail[0]:g}..{fail[-1]:g}, succeed trace {succeed}, mixed upper monotone"


SUITES = {
    "ssim-properties": ssim_properties,
    "constraint-gradients": constraint_gradient_check,
    "lagrangian-gradients": lagrangian_gradient_check,
    "nmse-quasiconvexity": quasiconvexity_check,
    "binary-search-traces": binary_search_traces,
}


def run_all(echo=print):
    results = [_timed(name, fn) for name, fn in SUITES.items()]
    for r in results:
        echo(r.line())
    return results
