"""Drafter and target training with hand-derived gradients.

The drafter learns one-step prediction against a frozen teacher under a
three-part objective: dimension-mean squared error on the noise prediction,
one minus cosine similarity on the feature, and a Smooth-L1 penalty on the
feature residual.  Backpropagation and the Adam update are written out
explicitly; every gradient used here is certified against central finite
differences in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .models import (
    GmmTarget,
    MlpNet,
    evaluate_target_batch,
    gmm_sample,
    mlp_apply,
    mlp_init,
    time_embedding,
)
from .schedule import NoiseSchedule, reverse_mean_batch
from .stats import RngKey, keyed_gaussian, keyed_uniform

COS_GUARD = 1e-8  # denominator guard for the cosine loss

# Keeps the drafter's data stream disjoint from the target fitter's when both
# run under one seed.
_DRAFTER_STREAM = 1 << 33


@dataclass(frozen=True)
class LossWeights:
    """Objective weights; defaults follow the reference setting."""

    lambda_f: float = 0.5
    lambda_s: float = 0.005
    beta_huber: float = 1.0

    def __post_init__(self) -> None:
        if self.lambda_f < 0.0 or self.lambda_s < 0.0:
            raise ValueError("loss weights must be non-negative")
        if not self.beta_huber > 0.0:
            raise ValueError("beta_huber must be positive")


@dataclass(frozen=True)
class TrainBatch:
    """One supervised batch: inputs at x_cur, teacher outputs as labels."""

    x: np.ndarray             # states being predicted at, [n, d]
    prev_feature: np.ndarray  # teacher feature at the predecessor, [n, D]
    t: np.ndarray             # per-row step indices, [n]
    eps_ref: np.ndarray       # teacher noise prediction at (x, t), [n, d]
    f_ref: np.ndarray         # teacher feature at (x, t), [n, D]


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    hidden: int = 64


@dataclass
class TrainReport:
    """Per-epoch loss curve plus end-state residuals."""

    rows: list = field(default_factory=list)  # (epoch, l_noise, l_feat, l_smooth, total)
    final_rmse: float = float("nan")

    @property
    def initial_total(self) -> float:
        return self.rows[0][4] if self.rows else float("nan")

    @property
    def final_total(self) -> float:
        return self.rows[-1][4] if self.rows else float("nan")


def report_to_csv(report: TrainReport) -> str:
    lines = ["epoch,loss_noise,loss_feat,loss_smooth,total"]
    for row in report.rows:
        lines.append("%d,%.10g,%.10g,%.10g,%.10g" % row)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Losses (single pair) and their gradients


def loss_noise(eps_pred: np.ndarray, eps_ref: np.ndarray) -> float:
    """Dimension-mean squared noise error."""
    diff = np.asarray(eps_pred, dtype=np.float64) - eps_ref
    return float(np.mean(diff * diff))


def loss_noise_grad(eps_pred: np.ndarray, eps_ref: np.ndarray) -> np.ndarray:
    diff = np.asarray(eps_pred, dtype=np.float64) - eps_ref
    return 2.0 * diff / diff.size


def loss_feat(f_pred: np.ndarray, f_ref: np.ndarray, epsilon_div: float = COS_GUARD) -> float:
    """One minus cosine similarity, with a guarded denominator."""
    f_pred = np.asarray(f_pred, dtype=np.float64)
    f_ref = np.asarray(f_ref, dtype=np.float64)
    den = max(float(np.linalg.norm(f_pred) * np.linalg.norm(f_ref)), epsilon_div)
    return 1.0 - float(np.dot(f_pred, f_ref)) / den


def loss_feat_grad(f_pred: np.ndarray, f_ref: np.ndarray, epsilon_div: float = COS_GUARD) -> np.ndarray:
    """Gradient w.r.t. f_pred; norms are treated as constant when the guard binds."""
    f_pred = np.asarray(f_pred, dtype=np.float64)
    f_ref = np.asarray(f_ref, dtype=np.float64)
    nf = float(np.linalg.norm(f_pred))
    raw = nf * float(np.linalg.norm(f_ref))
    s = float(np.dot(f_pred, f_ref))
    if raw <= epsilon_div:
        return -f_ref / epsilon_div
    return -(f_ref / raw - s * f_pred / (raw * nf * nf))


def loss_smooth(f_pred: np.ndarray, f_ref: np.ndarray, beta_huber: float) -> float:
    """Mean Smooth-L1 of the feature residual: quadratic core, linear tails."""
    u = np.abs(np.asarray(f_pred, dtype=np.float64) - f_ref)
    phi = np.where(u < beta_huber, u * u / (2.0 * beta_huber), u - beta_huber / 2.0)
    return float(np.mean(phi))


def loss_smooth_grad(f_pred: np.ndarray, f_ref: np.ndarray, beta_huber: float) -> np.ndarray:
    u = np.asarray(f_pred, dtype=np.float64) - f_ref
    g = np.where(np.abs(u) < beta_huber, u / beta_huber, np.sign(u))
    return g / u.size


def loss_total(parts, w: LossWeights) -> float:
    """Combine (l_noise, l_feat, l_smooth) with the objective weights."""
    l_noise, l_feat, l_smooth = parts
    return float(l_noise + w.lambda_f * l_feat + w.lambda_s * l_smooth)


# ---------------------------------------------------------------------------
# Manual backprop and Adam


def backprop(net: MlpNet, inp: np.ndarray, grad_out: np.ndarray, grad_feature=None):
    """Gradients of sum(grad_out * output [+ grad_feature * feature]) w.r.t. weights.

    inp is the (n, in_dim) batch.  grad_feature, when given, is injected at
    the designated feature activation — that is how the feature losses reach
    the shared trunk.  Returns (grad_weights, grad_biases) matching the net's
    parameter lists.
    """
    out, hiddens = mlp_apply(net, inp)
    acts = [inp] + hiddens
    g_w = [None] * len(net.weights)
    g_b = [None] * len(net.biases)

    delta = grad_out
    g_w[-1] = delta.T @ acts[-1]
    g_b[-1] = delta.sum(axis=0)
    g_h = delta @ net.weights[-1]

    for l in range(len(hiddens) - 1, -1, -1):
        if grad_feature is not None and l == net.feature_layer:
            g_h = g_h + grad_feature
        dz = g_h * (1.0 - hiddens[l] * hiddens[l])  # tanh'
        g_w[l] = dz.T @ acts[l]
        g_b[l] = dz.sum(axis=0)
        if l > 0:
            g_h = dz @ net.weights[l]
    return g_w, g_b


class Adam:
    """Standard Adam with bias correction; state per parameter tensor."""

    def __init__(self, net: MlpNet, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(w) for w in net.weights] + [np.zeros_like(b) for b in net.biases]
        self.v = [np.zeros_like(w) for w in net.weights] + [np.zeros_like(b) for b in net.biases]

    def step(self, net: MlpNet, g_w, g_b) -> None:
        self.t += 1
        params = net.weights + net.biases
        grads = g_w + g_b
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            p -= self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


# ---------------------------------------------------------------------------
# Data pipelines and the two trainers


def _batch_losses(net: MlpNet, batch: TrainBatch, w: LossWeights):
    """Forward the drafter on a batch; return losses and input-side grads.

    Per-sample losses are averaged over the batch.  Returns
    (l_noise, l_feat, l_smooth, inp, grad_out, grad_feature).
    """
    n = batch.x.shape[0]
    emb = time_embedding(batch.t.astype(np.float64), net.t_scale)
    inp = np.concatenate([batch.x, emb, batch.prev_feature], axis=1)
    out, hiddens = mlp_apply(net, inp)
    feat = hiddens[net.feature_layer]

    diff = out - batch.eps_ref
    l_noise = float(np.mean(diff * diff))
    grad_out = 2.0 * diff / diff.size

    s = np.sum(feat * batch.f_ref, axis=1)
    nf = np.linalg.norm(feat, axis=1)
    nr = np.linalg.norm(batch.f_ref, axis=1)
    raw = nf * nr
    den = np.maximum(raw, COS_GUARD)
    l_feat = float(np.mean(1.0 - s / den))
    clamped = raw <= COS_GUARD
    # d(cos)/df with the guard treated as a constant where it binds
    dcos = batch.f_ref / den[:, None]
    safe_nf2 = np.where(clamped, 1.0, nf * nf)
    dcos -= np.where(clamped, 0.0, s / (den * safe_nf2))[:, None] * feat
    grad_feat_cos = -(w.lambda_f / n) * dcos

    u = feat - batch.f_ref
    beta = w.beta_huber
    phi = np.where(np.abs(u) < beta, u * u / (2.0 * beta), np.abs(u) - beta / 2.0)
    l_smooth = float(np.mean(np.mean(phi, axis=1)))
    dphi = np.where(np.abs(u) < beta, u / beta, np.sign(u))
    grad_feat_smooth = (w.lambda_s / (n * u.shape[1])) * dphi

    return l_noise, l_feat, l_smooth, inp, grad_out, grad_feat_cos + grad_feat_smooth


def make_train_batch(
    target,
    gmm: GmmTarget,
    sched: NoiseSchedule,
    n: int,
    seed: int,
    stream: int,
) -> TrainBatch:
    """Draw one supervised batch matching the engine's drafting distribution.

    Steps t are uniform over {1..T-1} (the engine never drafts the first
    reverse transition).  The predecessor state x_prev is a forward draw at
    noise level t+1; x_cur follows by one exact reverse step, so the pair
    (x_cur, prev_feature) is distributed as the drafter sees it at runtime.
    """
    d = gmm.dim
    base = stream * (n + 4)
    u = keyed_uniform(RngKey(seed, base, "data"), n)
    t = (1 + np.floor(u * (sched.T - 1))).astype(np.int64)
    t = np.minimum(t, sched.T - 1)
    x0 = gmm_sample(gmm, n, seed, step=base + 1)
    xi = keyed_gaussian(RngKey(seed, base + n + 2, "data"), n * d).reshape(n, d)
    xi2 = keyed_gaussian(RngKey(seed, base + n + 3, "data"), n * d).reshape(n, d)

    ab_prev = sched.alpha_bar[t + 1]
    x_prev = np.sqrt(ab_prev)[:, None] * x0 + np.sqrt(1.0 - ab_prev)[:, None] * xi
    eps_prev, f_prev = evaluate_target_batch(target, x_prev, t + 1, sched)
    mean_prev = reverse_mean_batch(x_prev, eps_prev, t + 1, sched)
    x_cur = mean_prev + np.sqrt(sched.sigma2[t])[:, None] * xi2

    eps_ref, f_ref = evaluate_target_batch(target, x_cur, t, sched)
    return TrainBatch(x=x_cur, prev_feature=f_prev, t=t, eps_ref=eps_ref, f_ref=f_ref)


def train_drafter(target, drafter: MlpNet, gmm: GmmTarget, sched: NoiseSchedule, cfg: TrainConfig) -> TrainReport:
    """Fit the drafter to the frozen teacher; one fresh batch per epoch."""
    report = TrainReport()
    if cfg.epochs == 0:
        return report
    opt = Adam(drafter, cfg.lr)
    for epoch in range(cfg.epochs):
        batch = make_train_batch(
            target, gmm, sched, cfg.batch_size, cfg.seed, _DRAFTER_STREAM + epoch
        )
        l_n, l_f, l_s, inp, g_out, g_feat = _batch_losses(drafter, batch, cfg.weights)
        total = loss_total((l_n, l_f, l_s), cfg.weights)
        if not math.isfinite(total):
            raise RuntimeError(f"non-finite loss {total} at epoch {epoch}")
        report.rows.append((epoch, l_n, l_f, l_s, total))
        g_w, g_b = backprop(drafter, inp, g_out, g_feat)
        opt.step(drafter, g_w, g_b)
    report.final_rmse = math.sqrt(report.rows[-1][1])
    return report


def init_drafter(gmm_dim: int, feature_dim: int, sched: NoiseSchedule, cfg: TrainConfig) -> MlpNet:
    """Fresh drafter net sized for (state, embedding, previous feature)."""
    dims = [gmm_dim + 3 + feature_dim, cfg.hidden, feature_dim, gmm_dim]
    return mlp_init(dims, cfg.seed, t_scale=sched.T)


def fit_target_mlp(gmm: GmmTarget, sched: NoiseSchedule, cfg: TrainConfig) -> tuple[MlpNet, TrainReport]:
    """Regress a feature-bearing net onto the mixture's exact noise field.

    Supervision is deterministic (the analytic eps at sampled (x, t)), so two
    runs with one seed produce identical weights.
    """
    d = gmm.dim
    net = mlp_init([d + 3, cfg.hidden, cfg.hidden, d], cfg.seed, t_scale=sched.T)
    report = TrainReport()
    if cfg.epochs == 0:
        return net, report
    opt = Adam(net, cfg.lr)
    n = cfg.batch_size
    for epoch in range(cfg.epochs):
        base = epoch * (n + 3)
        u = keyed_uniform(RngKey(cfg.seed, base, "data"), n)
        t = np.minimum((1 + np.floor(u * sched.T)).astype(np.int64), sched.T)
        x0 = gmm_sample(gmm, n, cfg.seed, step=base + 1)
        xi = keyed_gaussian(RngKey(cfg.seed, base + n + 2, "data"), n * d).reshape(n, d)
        ab = sched.alpha_bar[t]
        x_t = np.sqrt(ab)[:, None] * x0 + np.sqrt(1.0 - ab)[:, None] * xi
        eps_star, _ = evaluate_target_batch(gmm, x_t, t, sched)

        inp = np.concatenate([x_t, time_embedding(t.astype(np.float64), sched.T)], axis=1)
        out, _ = mlp_apply(net, inp)
        diff = out - eps_star
        l_noise = float(np.mean(diff * diff))
        if not math.isfinite(l_noise):
            raise RuntimeError(f"non-finite loss {l_noise} at epoch {epoch}")
        report.rows.append((epoch, l_noise, 0.0, 0.0, l_noise))
        g_w, g_b = backprop(net, inp, 2.0 * diff / diff.size)
        opt.step(net, g_w, g_b)
    report.final_rmse = math.sqrt(report.rows[-1][1])
    return net, report
