"""Untargeted attacks: PGD, elastic-net, and the SSIM-constrained Lagrangian attack.

Every attack works on a stack of images at once with per-image state (scale
``c``, multipliers, optimiser moments), so a whole evaluation batch shares
each forward/backward pass.  Single-image entry points wrap the batched ones.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .metrics import (
    ConstraintThresholds,
    SsimParams,
    batch_constraint_gradients,
    batch_constraints,
    batch_lp,
    batch_ssim,
)

logger = logging.getLogger(__name__)

LOSS_KINDS = ("cw", "xent")

C_INIT = 1e-3
LOWER_INIT = 0.0
UPPER_INIT = 1e10
UPPER_CUTOFF = 1e9


@dataclass(frozen=True)
class MarginLossParams:
    c: float = 1.0
    kappa: float = 0.0
    kind: str = "cw"

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("c must be positive")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"loss kind must be one of {LOSS_KINDS}")


@dataclass(frozen=True)
class PgdConfig:
    epsilon: float = 0.3
    steps: int = 10
    step_size: Optional[float] = None  # defaults to epsilon / 4
    loss: str = "xent"

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}")

    @property
    def alpha(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return self.epsilon / 4


@dataclass(frozen=True)
class EnetConfig:
    beta: float = 0.01
    iterations: int = 1000
    learning_rate: float = 0.01
    search_steps: int = 9
    kappa: float = 0.0

    def __post_init__(self):
        if not self.beta >= 0:
            raise ValueError("beta must be non-negative")
        if self.iterations < 1 or self.search_steps < 1:
            raise ValueError("iterations and search_steps must be >= 1")


@dataclass(frozen=True)
class SsimAttackConfig:
    thresholds: ConstraintThresholds = field(default_factory=ConstraintThresholds)
    iterations: int = 1000
    step_size: float = 0.01
    dual_lr: float = 10.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    init: str = "zero"
    search_steps: int = 9
    kappa: float = 0.0
    decay: bool = True
    return_final: bool = False
    ssim_params: SsimParams = field(default_factory=SsimParams)

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.search_steps < 1:
            raise ValueError("search_steps must be >= 1")
        if self.init not in ("zero", "enet"):
            raise ValueError("init must be 'zero' or 'enet'")


@dataclass
class AttackOutcome:
    success: bool
    adversarial: np.ndarray
    ssim: float
    l1: float
    l2: float
    linf: float
    true_label: int
    adv_label: int
    c_final: Optional[float] = None
    iterations: int = 0
    attack: str = ""
    image_id: int = -1


# ---------------------------------------------------------------------------
# losses


def _check_labels(scores, labels):
    if scores.shape[-1] < 2:
        raise ValueError("need at least two classes")
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels >= scores.shape[-1]):
        raise ValueError(f"label out of range [0, {scores.shape[-1]})")


def _runner_up(scores, labels):
    """Index of the highest non-true score (lowest index on ties)."""
    masked = scores.copy()
    masked[np.arange(len(labels)), labels] = -np.inf
    return np.argmax(masked, axis=1)


def batch_margin_loss(scores, labels, c, kappa=0.0):
    """Per-image ``c * (f_s - max_{s'!=s} f_s' + kappa)^+`` and its score gradient."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    _check_labels(scores, labels)
    rows = np.arange(len(labels))
    other = _runner_up(scores, labels)
    gap = scores[rows, labels] - scores[rows, other] + kappa
    active = gap > 0
    c = np.broadcast_to(np.asarray(c, dtype=np.float64), gap.shape)
    value = np.where(active, c * gap, 0.0)
    grad = np.zeros_like(scores)
    grad[rows, labels] = np.where(active, c, 0.0)
    grad[rows, other] -= np.where(active, c, 0.0)
    return value, grad


def batch_xent(scores, labels):
    """Per-image softmax cross-entropy of the true label and its score gradient."""
    scores = np.asarray(scores, dtype=np.float64)
    _check_labels(scores, labels)
    rows = np.arange(len(labels))
    z = scores - scores.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return -logp[rows, labels], grad


def margin_loss(scores, true_label: int, p: MarginLossParams = MarginLossParams()) -> float:
    scores = np.asarray(scores, dtype=np.float64)[None]
    if p.kind == "xent":
        value, _ = batch_xent(scores, [true_label])
        return float(value[0])
    value, _ = batch_margin_loss(scores, [true_label], p.c, p.kappa)
    return float(value[0])


def margin_loss_objective(true_label: int, p: MarginLossParams = MarginLossParams()):
    """``margin_loss`` as an objective for :meth:`ScoreModel.input_gradient`."""
    def objective(scores):
        s = np.asarray(scores)[None]
        if p.kind == "xent":
            v, g = batch_xent(s, [true_label])
        else:
            v, g = batch_margin_loss(s, [true_label], p.c, p.kappa)
        return float(v[0]), g[0]
    return objective


def _loss_grad(model, y, labels, c, kappa):
    """Scores at ``y`` and the input gradient of the margin loss."""
    scores, caches = model.forward_cached(y)
    value, dscores = batch_margin_loss(scores, labels, c, kappa)
    grad, _ = model.backward(caches, dscores)
    return scores, value, grad


def _success(scores, labels):
    return np.argmax(scores, axis=1) != labels


def _box(x, delta):
    return np.clip(x + delta, 0.0, 1.0) - x


# ---------------------------------------------------------------------------
# result bookkeeping


class _BestTracker:
    """Keeps, per image, the successful iterate with the highest quality."""

    def __init__(self, x):
        self.adv = x.copy()
        self.quality = np.full(len(x), -np.inf)
        self.found = np.zeros(len(x), dtype=bool)

    def update(self, candidate, success, quality):
        better = success & (quality > self.quality)
        if better.any():
            self.adv[better] = candidate[better]
            self.quality[better] = quality[better]
            self.found |= better

    def result(self, fallback):
        adv = np.where(self.found.reshape((-1,) + (1,) * (fallback.ndim - 1)), self.adv, fallback)
        return adv, self.found.copy(), self.quality.copy()


def make_outcomes(model, x, adv, labels, attack="", c=None, iterations=0, batch=500):
    """Build :class:`AttackOutcome` records, re-deriving success from the model."""
    x = np.asarray(x, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    preds = np.concatenate([model.predict(adv[i:i + batch]) for i in range(0, len(adv), batch)])
    ssims = batch_ssim(x, adv)
    norms = batch_lp(adv - x)
    out = []
    for i in range(len(x)):
        ci = None if c is None else float(np.broadcast_to(c, (len(x),))[i])
        it = int(np.broadcast_to(iterations, (len(x),))[i])
        out.append(AttackOutcome(
            success=bool(preds[i] != labels[i]),
            adversarial=adv[i],
            ssim=float(ssims[i]),
            l1=float(norms[i, 0]), l2=float(norms[i, 1]), linf=float(norms[i, 2]),
            true_label=int(labels[i]), adv_label=int(preds[i]),
            c_final=ci, iterations=it, attack=attack,
        ))
    return out


# ---------------------------------------------------------------------------
# binary search over c


@dataclass
class SearchResult:
    adversarial: np.ndarray
    success: np.ndarray
    quality: np.ndarray
    c_best: np.ndarray
    c_trace: np.ndarray  # (K, B): c used in each round
    upper_trace: np.ndarray  # (K, B): UpperBound after each round


def binary_search_c(runner: Callable, x, labels, steps: int, model=None) -> SearchResult:
    """Bracket the loss scale ``c`` per image and keep the best successful candidate.

    ``runner(c)`` receives an array of per-image scales and returns
    ``(adv, success, quality)``.  When ``model`` is given, success is
    re-checked as ``argmax f(adv) != label``; otherwise the runner's flag is
    trusted.  Schedule: start at ``c=1e-3`` with bounds ``[0, 1e10]``; success
    shrinks the upper bound, failure raises the lower bound, and ``c``
    moves to the bracket midpoint once the upper bound drops below ``1e9``
    (before that, failures multiply ``c`` by ten).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    b = len(labels)
    c = np.full(b, C_INIT)
    lower = np.full(b, LOWER_INIT)
    upper = np.full(b, UPPER_INIT)
    best = _BestTracker(x)
    best_c = np.full(b, np.nan)
    last_adv = x
    c_trace, upper_trace = [], []
    for _ in range(steps):
        adv, success, quality = runner(c.copy())
        success = np.asarray(success, dtype=bool)
        quality = np.asarray(quality, dtype=np.float64)
        if model is not None:
            success = model.predict(adv).reshape(b) != labels
        better = success & (quality > best.quality)
        best_c = np.where(better, c, best_c)
        best.update(adv, success, quality)
        last_adv = adv
        c_trace.append(c.copy())

        upper = np.where(success, np.minimum(upper, c), upper)
        lower = np.where(success, lower, np.maximum(lower, c))
        mid = (lower + upper) / 2
        bracketed = upper < UPPER_CUTOFF
        c = np.where(success, np.where(bracketed, mid, c), np.where(bracketed, mid, 10 * c))
        upper_trace.append(upper.copy())

    adv, found, quality = best.result(last_adv)
    # failed images report the scale of the last round
    best_c = np.where(found, best_c, c_trace[-1])
    return SearchResult(adv, found, quality, best_c, np.array(c_trace), np.array(upper_trace))


# ---------------------------------------------------------------------------
# PGD


def _pgd_objective_grad(model, y, labels, loss):
    """Scores at ``y`` and the gradient of the quantity PGD ascends."""
    scores, caches = model.forward_cached(y)
    if loss == "xent":
        _, dscores = batch_xent(scores, labels)
    else:
        # ascend -(margin loss) with c = 1, kappa = 0
        _, dscores = batch_margin_loss(scores, labels, 1.0, 0.0)
        dscores = -dscores
    grad, _ = model.backward(caches, dscores)
    return scores, grad


def pgd_step(x, current, grad, cfg: PgdConfig):
    """One signed-gradient ascent step projected into the eps-ball and the box."""
    nxt = current + cfg.alpha * np.sign(grad)
    nxt = np.clip(nxt, x - cfg.epsilon, x + cfg.epsilon)
    return np.clip(nxt, 0.0, 1.0)


def _pgd_iterates(model, x, labels, cfg):
    cur = x.copy()
    for _ in range(cfg.steps):
        scores, grad = _pgd_objective_grad(model, cur, labels, cfg.loss)
        yield cur, scores
        cur = pgd_step(x, cur, grad, cfg)
    yield cur, model.forward(cur)


def pgd_perturb(model, x, labels, cfg: PgdConfig) -> np.ndarray:
    """Final PGD iterate for a stack of images (used by adversarial training)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    if cfg.epsilon == 0:
        return x.copy()
    cur = x.copy()
    for _ in range(cfg.steps):
        _, grad = _pgd_objective_grad(model, cur, labels, cfg.loss)
        cur = pgd_step(x, cur, grad, cfg)
    return cur


def pgd_attack_batch(model, x, labels, cfg: PgdConfig = PgdConfig(), filter_ssim=False):
    """L-inf PGD from the clean image.

    With ``filter_ssim`` the successful iterate with the highest SSIM (over
    all steps, the starting point included) is returned; otherwise the final
    iterate.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    best = _BestTracker(x)
    final = x
    for cur, scores in _pgd_iterates(model, x, labels, cfg):
        if filter_ssim:
            best.update(cur, _success(scores, labels), batch_ssim(x, cur))
        final = cur
    adv = best.result(final)[0] if filter_ssim else final
    name = "pgd-ssim" if filter_ssim else "pgd"
    return make_outcomes(model, x, adv, labels, name, None, cfg.steps)


def pgd_attack(model, x, label, cfg: PgdConfig = PgdConfig(), filter_ssim=False) -> AttackOutcome:
    return pgd_attack_batch(model, np.asarray(x)[None], [label], cfg, filter_ssim)[0]


# ---------------------------------------------------------------------------
# elastic-net attack


def soft_threshold(z, t):
    """Elementwise shrinkage ``sign(z) * max(|z| - t, 0)``."""
    z = np.asarray(z, dtype=np.float64)
    return np.sign(z) * np.maximum(np.abs(z) - t, 0.0)


def enet_step(x, delta, loss_grad, lr, beta):
    """Proximal step on ``loss + beta*|d|_1 + |d|_2^2`` followed by box projection."""
    z = delta - lr * (loss_grad + 2.0 * delta)
    return _box(x, soft_threshold(z, beta * lr))


def enet_quality(delta, beta):
    d = delta.reshape(len(delta), -1)
    return -(beta * np.abs(d).sum(axis=1) + (d * d).sum(axis=1))


def enet_run(model, x, labels, c, cfg: EnetConfig):
    """One fixed-``c`` elastic-net optimisation; returns ``(adv, success, quality)``."""
    delta = np.zeros_like(x)
    best = _BestTracker(x)
    for t in range(1, cfg.iterations + 1):
        y = x + delta
        scores, _, grad = _loss_grad(model, y, labels, c, cfg.kappa)
        best.update(y, _success(scores, labels), enet_quality(delta, cfg.beta))
        if t == cfg.iterations:
            break
        delta = enet_step(x, delta, grad, cfg.learning_rate / np.sqrt(t), cfg.beta)
    return best.result(x + delta)


def enet_search(model, x, labels, cfg: EnetConfig = EnetConfig()) -> SearchResult:
    x = np.ascontiguousarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    return binary_search_c(lambda c: enet_run(model, x, labels, c, cfg),
                           x, labels, cfg.search_steps, model)


def enet_attack_batch(model, x, labels, cfg: EnetConfig = EnetConfig(), search=None):
    x = np.ascontiguousarray(x, dtype=np.float64)
    search = search if search is not None else enet_search(model, x, labels, cfg)
    return make_outcomes(model, x, search.adversarial, labels, "enet", search.c_best,
                         cfg.iterations * cfg.search_steps)


def enet_attack(model, x, label, cfg: EnetConfig = EnetConfig()) -> AttackOutcome:
    return enet_attack_batch(model, np.asarray(x)[None], [label], cfg)[0]


# ---------------------------------------------------------------------------
# SSIM Lagrangian attack


@dataclass
class LagrangianState:
    delta: np.ndarray  # (B, ...) perturbation
    lam: np.ndarray  # (B, 4) multipliers, always >= 0
    m: np.ndarray  # Adam first moment of the dual gradient
    v: np.ndarray  # Adam second moment
    t: int = 1

    @classmethod
    def start(cls, x, delta=None):
        b = len(x)
        delta = np.zeros_like(x) if delta is None else np.array(delta, dtype=np.float64)
        return cls(delta, np.zeros((b, 4)), np.zeros((b, 4)), np.zeros((b, 4)), 1)


def lagrangian(model, x, labels, delta, lam, c, cfg: SsimAttackConfig):
    """Per-image ``loss(x, d) + sum_i lam_i g_i(x + d, x)``."""
    y = x + delta
    value, _ = batch_margin_loss(model.forward(y), labels, c, cfg.kappa)
    g = batch_constraints(y, x, cfg.ssim_params, cfg.thresholds)
    return value + (lam * g).sum(axis=1)


def lagrangian_grad(model, x, labels, delta, lam, c, cfg: SsimAttackConfig):
    """Gradient in ``delta`` and in ``lam`` (the latter is just ``g``), plus the scores."""
    y = x + delta
    scores, _, grad = _loss_grad(model, y, labels, c, cfg.kappa)
    g = batch_constraints(y, x, cfg.ssim_params, cfg.thresholds)
    dg = batch_constraint_gradients(y, x, cfg.ssim_params, cfg.thresholds)
    grad = grad + np.einsum("bk,bk...->b...", lam, dg)
    return grad, g, scores


def ssim_lagrangian_step(state: LagrangianState, x, model, labels, c, cfg: SsimAttackConfig):
    """One primal-descent / dual-ascent iteration.

    The primal update is plain gradient descent (step ``step_size/sqrt(t)``
    when ``decay``) followed by clipping ``x + delta`` into the box; the dual
    update is Adam on ``-g`` evaluated at the pre-update ``delta``, then
    clamped at zero.  Returns ``(next_state, scores_at_current, g_at_current)``.
    """
    grad, g, scores = lagrangian_grad(model, x, labels, state.delta, state.lam, c, cfg)
    t = state.t
    eta = cfg.step_size / np.sqrt(t) if cfg.decay else cfg.step_size
    delta = _box(x, state.delta - eta * grad)

    dual_grad = -g
    m = cfg.adam_beta1 * state.m + (1 - cfg.adam_beta1) * dual_grad
    v = cfg.adam_beta2 * state.v + (1 - cfg.adam_beta2) * dual_grad * dual_grad
    m_hat = m / (1 - cfg.adam_beta1 ** t)
    v_hat = v / (1 - cfg.adam_beta2 ** t)
    lam = np.maximum(state.lam - cfg.dual_lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps), 0.0)
    return LagrangianState(delta, lam, m, v, t + 1), scores, g


def ssim_run(model, x, labels, c, cfg: SsimAttackConfig, init_delta=None):
    """Run the Lagrangian iterations for a fixed ``c``.

    Returns ``(adv, success, quality)`` with quality = SSIM.  Unless
    ``cfg.return_final`` is set, ``adv`` is the successful iterate with the
    highest SSIM (the final iterate for images that never succeed).
    """
    state = LagrangianState.start(x, init_delta)
    best = _BestTracker(x)
    final_scores = None
    for t in range(1, cfg.iterations + 1):
        current = state.delta
        nxt, scores, _ = ssim_lagrangian_step(state, x, model, labels, c, cfg)
        y = x + current
        quality = batch_ssim(x, y, cfg.ssim_params)
        best.update(y, _success(scores, labels), quality)
        final_scores = scores
        if t == cfg.iterations:
            break
        state = nxt
    final = x + state.delta
    if cfg.return_final:
        success = _success(final_scores, labels)
        return final, success, batch_ssim(x, final, cfg.ssim_params)
    return best.result(final)


def ssim_attack_batch(model, x, labels, cfg: SsimAttackConfig = SsimAttackConfig(),
                      enet_cfg: EnetConfig = EnetConfig(), enet_result: Optional[SearchResult] = None):
    """The SSIM attack (``init='zero'``, wrapped in the c search) or SSIM_E.

    For ``init='enet'`` the run starts from the elastic-net perturbation and
    reuses the elastic-net scale ``c`` with no further search.  A previously
    computed ``enet_result`` can be passed in to avoid recomputing it.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    if cfg.init == "zero":
        search = binary_search_c(lambda c: ssim_run(model, x, labels, c, cfg),
                                 x, labels, cfg.search_steps, model)
        return make_outcomes(model, x, search.adversarial, labels, "ssim", search.c_best,
                             cfg.iterations * cfg.search_steps)
    if enet_result is None:
        enet_result = enet_search(model, x, labels, enet_cfg)
    init = enet_result.adversarial - x
    adv, _, _ = ssim_run(model, x, labels, enet_result.c_best, cfg, init_delta=init)
    iters = cfg.iterations + enet_cfg.iterations * enet_cfg.search_steps
    return make_outcomes(model, x, adv, labels, "ssim-e", enet_result.c_best, iters)


def ssim_attack(model, x, label, cfg: SsimAttackConfig = SsimAttackConfig(),
                enet_cfg: EnetConfig = EnetConfig()) -> AttackOutcome:
    return ssim_attack_batch(model, np.asarray(x)[None], [label], cfg, enet_cfg)[0]


def ssim_e_config(cfg: SsimAttackConfig) -> SsimAttackConfig:
    return replace(cfg, init="enet")
