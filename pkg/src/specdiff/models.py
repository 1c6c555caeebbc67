"""Score models and drafter variants sharing one evaluation interface.

Every model maps (state, step [, previous feature]) to a ModelOutput: a noise
prediction eps plus a feature vector.  Two target families are provided — an
analytic Gaussian mixture with closed-form diffused score, and a small dense
net whose last hidden activation serves as the feature.  The mixture has no
hidden representation, so its feature is defined as the eps vector itself;
that degenerate choice keeps the frozen-drafter and profiling flows total.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .coupling import GaussianKernel
from .schedule import NoiseSchedule, reverse_mean
from .stats import RngKey, keyed_gaussian, keyed_uniform

_FEATURE_EMBED_DIM = 3  # t/T plus one sinusoidal pair


@dataclass(frozen=True)
class ModelOutput:
    eps: np.ndarray
    feature: np.ndarray


@dataclass(frozen=True)
class GmmTarget:
    """Isotropic Gaussian mixture; the analytic stand-in for a target model."""

    weights: np.ndarray   # [K], positive, sums to 1
    means: np.ndarray     # [K, d]
    variances: np.ndarray  # [K], isotropic

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        v = np.asarray(self.variances, dtype=np.float64)
        if w.ndim != 1 or m.shape[0] != w.shape[0] or v.shape != w.shape:
            raise ValueError("inconsistent mixture shapes")
        if np.any(w <= 0.0) or abs(float(w.sum()) - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        if np.any(v <= 0.0):
            raise ValueError("component variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def default_gmm() -> GmmTarget:
    """Two tight, well-separated 2D modes: the package's stock experiment.

    Tight modes make the score stiffen near the data manifold, so stale draft
    predictions deviate most at late steps — the regime where uncertainty
    profiling and relaxation have something to measure.
    """
    return GmmTarget(
        weights=np.array([0.5, 0.5]),
        means=np.array([[2.0, 0.0], [-2.0, 0.0]]),
        variances=np.array([0.002, 0.002]),
    )


def _marginal_terms(target: GmmTarget, x: np.ndarray, t: int, sched: NoiseSchedule):
    """Per-component diffused-marginal responsibilities and mean offsets."""
    if not 1 <= t <= sched.T:
        raise ValueError(f"step {t} outside 1..{sched.T}")
    ab = sched.alpha_bar[t]
    mvar = ab * target.variances + (1.0 - ab)          # [K]
    diff = x[..., None, :] - math.sqrt(ab) * target.means  # [..., K, d]
    sq = np.sum(diff * diff, axis=-1)                   # [..., K]
    d = target.dim
    logw = (
        np.log(target.weights)
        - 0.5 * d * np.log(2.0 * np.pi * mvar)
        - 0.5 * sq / mvar
    )
    return logw, diff, mvar


def gmm_log_density(target: GmmTarget, x: np.ndarray, t: int, sched: NoiseSchedule):
    """log q_t(x) of the diffused mixture, logsumexp-stable."""
    x = np.asarray(x, dtype=np.float64)
    logw, _, _ = _marginal_terms(target, x, t, sched)
    peak = np.max(logw, axis=-1, keepdims=True)
    out = peak[..., 0] + np.log(np.sum(np.exp(logw - peak), axis=-1))
    return out if out.ndim else float(out)


def gmm_score(target: GmmTarget, x: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Exact score of the diffused mixture at step t.

    Component i of the diffused marginal is N(√ᾱ_t·μ_i, (ᾱ_t·v_i + 1−ᾱ_t)I);
    the score is the responsibility-weighted sum of the component scores.
    Accepts a single state (d,) or a batch (n, d).
    """
    x = np.asarray(x, dtype=np.float64)
    logw, diff, mvar = _marginal_terms(target, x, t, sched)
    peak = np.max(logw, axis=-1, keepdims=True)
    resp = np.exp(logw - peak)
    resp /= np.sum(resp, axis=-1, keepdims=True)
    return -np.sum(resp[..., None] * diff / mvar[:, None], axis=-2)


def eps_from_score(score: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Rescale a score into the noise-prediction parameterisation."""
    if not 1 <= t <= sched.T:
        raise ValueError(f"step {t} outside 1..{sched.T}")
    return -math.sqrt(1.0 - sched.alpha_bar[t]) * np.asarray(score, dtype=np.float64)


def score_from_eps(eps: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Inverse of eps_from_score."""
    if not 1 <= t <= sched.T:
        raise ValueError(f"step {t} outside 1..{sched.T}")
    return -np.asarray(eps, dtype=np.float64) / math.sqrt(1.0 - sched.alpha_bar[t])


def gmm_sample(target: GmmTarget, n: int, seed: int, step: int = 0) -> np.ndarray:
    """n exact draws from the mixture via the keyed stream.

    Consumes data-purpose keys at steps step..step+n: one block of component
    picks, then one key per sample for the Gaussian offset.
    """
    u = keyed_uniform(RngKey(seed, step, "data"), n)
    comps = np.searchsorted(np.cumsum(target.weights), u)
    comps = np.minimum(comps, target.weights.shape[0] - 1)
    d = target.dim
    out = np.empty((n, d))
    for i in range(n):
        z = keyed_gaussian(RngKey(seed, step + 1 + i, "data"), d)
        out[i] = target.means[comps[i]] + math.sqrt(target.variances[comps[i]]) * z
    return out


# ---------------------------------------------------------------------------
# Dense nets


def time_embedding(t, t_scale: int) -> np.ndarray:
    """Step embedding: (t/T, sin 2πt/T, cos 2πt/T); shape (..., 3)."""
    frac = np.asarray(t, dtype=np.float64) / t_scale
    return np.stack(
        [frac, np.sin(2.0 * np.pi * frac), np.cos(2.0 * np.pi * frac)], axis=-1
    )


@dataclass
class MlpNet:
    """Dense tanh network; the designated feature is a hidden activation.

    weights[l] has shape (fan_out, fan_in), row-major.  The final layer is
    linear; its output is the eps prediction and must match the state
    dimension.  t_scale is the step count the time embedding was built for.
    """

    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    activation: str = "tanh"
    feature_layer: int = 0  # 0-based index among hidden activations
    t_scale: int = 100

    def __post_init__(self) -> None:
        if self.activation != "tanh":
            raise ValueError("only tanh nets are supported")
        n_hidden = len(self.weights) - 1
        if not 0 <= self.feature_layer < max(n_hidden, 1):
            raise ValueError("feature layer index out of range")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights[self.feature_layer].shape[0]


def mlp_init(layer_dims: list, seed: int, t_scale: int) -> MlpNet:
    """Gaussian 1/√fan_in init, zero biases, feature = last hidden."""
    if len(layer_dims) < 3:
        raise ValueError("need at least one hidden layer")
    weights, biases = [], []
    for l in range(len(layer_dims) - 1):
        fan_in, fan_out = layer_dims[l], layer_dims[l + 1]
        w = keyed_gaussian(RngKey(seed, l, "init"), fan_in * fan_out)
        weights.append(w.reshape(fan_out, fan_in) / math.sqrt(fan_in))
        biases.append(np.zeros(fan_out))
    return MlpNet(
        weights=weights,
        biases=biases,
        feature_layer=len(layer_dims) - 3,
        t_scale=t_scale,
    )


def mlp_apply(net: MlpNet, inp: np.ndarray):
    """Forward pass on a (n, in_dim) batch returning every activation.

    Returns (output, hiddens) where hiddens[i] is the i-th hidden activation;
    training reuses the cache for backpropagation.
    """
    h = inp
    hiddens = []
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        h = np.tanh(h @ w.T + b)
        hiddens.append(h)
    out = h @ net.weights[-1].T + net.biases[-1]
    return out, hiddens


def _single(net: MlpNet, inp: np.ndarray) -> ModelOutput:
    out, hiddens = mlp_apply(net, inp[None, :])
    return ModelOutput(eps=out[0], feature=hiddens[net.feature_layer][0])


def mlp_forward(net: MlpNet, x: np.ndarray, t: int) -> ModelOutput:
    """Evaluate the target net at (x, t); feature = designated activation."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] + _FEATURE_EMBED_DIM != net.in_dim:
        raise ValueError("state dimension does not match the net")
    return _single(net, np.concatenate([x, time_embedding(t, net.t_scale)]))


def drafter_forward(net: MlpNet, x: np.ndarray, t: int, prev_feature: np.ndarray) -> ModelOutput:
    """Evaluate the drafter with last step's feature fused by concatenation."""
    x = np.asarray(x, dtype=np.float64)
    prev_feature = np.asarray(prev_feature, dtype=np.float64)
    if x.shape[0] + _FEATURE_EMBED_DIM + prev_feature.shape[0] != net.in_dim:
        raise ValueError("state/feature dimensions do not match the net")
    inp = np.concatenate([x, time_embedding(t, net.t_scale), prev_feature])
    return _single(net, inp)


def mlp_forward_batch(net: MlpNet, x: np.ndarray, t) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised mlp_forward over rows; t is a scalar or per-row vector."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    tv = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
    inp = np.concatenate([x, time_embedding(tv, net.t_scale)], axis=1)
    out, hiddens = mlp_apply(net, inp)
    return out, hiddens[net.feature_layer]


def frozen_drafter(anchor_output: ModelOutput, x: np.ndarray, t: int, sched: NoiseSchedule) -> GaussianKernel:
    """Proposal that reuses the round anchor's noise prediction verbatim.

    At the anchor state this equals the target kernel exactly; farther from
    the anchor the stale eps drifts away from the target's.
    """
    mean = reverse_mean(x, anchor_output.eps, t, sched)
    return GaussianKernel(mean=mean, var=float(sched.sigma2[t - 1]))


def evaluate_target(model, x: np.ndarray, t: int, sched: NoiseSchedule) -> ModelOutput:
    """Uniform target interface over GmmTarget and MlpNet."""
    if isinstance(model, GmmTarget):
        eps = eps_from_score(gmm_score(model, x, t, sched), t, sched)
        return ModelOutput(eps=eps, feature=eps.copy())
    if isinstance(model, MlpNet):
        return mlp_forward(model, x, t)
    raise TypeError(f"not a target model: {type(model).__name__}")


def _gmm_eps_batch(target: GmmTarget, x: np.ndarray, tv: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """gmm_score → eps over rows with per-row steps (training data path)."""
    ab = sched.alpha_bar[tv]                                    # [n]
    mvar = ab[:, None] * target.variances + (1.0 - ab[:, None])  # [n, K]
    diff = x[:, None, :] - np.sqrt(ab)[:, None, None] * target.means  # [n, K, d]
    sq = np.sum(diff * diff, axis=-1)
    logw = (
        np.log(target.weights)
        - 0.5 * target.dim * np.log(2.0 * np.pi * mvar)
        - 0.5 * sq / mvar
    )
    peak = np.max(logw, axis=-1, keepdims=True)
    resp = np.exp(logw - peak)
    resp /= np.sum(resp, axis=-1, keepdims=True)
    score = -np.sum(resp[..., None] * diff / mvar[..., None], axis=1)
    return -np.sqrt(1.0 - ab)[:, None] * score


def evaluate_target_batch(model, x: np.ndarray, t, sched: NoiseSchedule):
    """Batched evaluate_target; t is a scalar or per-row vector.

    Returns (eps, feature) as (n, d) and (n, D) arrays.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    tv = np.broadcast_to(np.asarray(t, dtype=np.int64), (x.shape[0],))
    if np.any(tv < 1) or np.any(tv > sched.T):
        raise ValueError("step outside 1..T")
    if isinstance(model, GmmTarget):
        eps = _gmm_eps_batch(model, x, tv, sched)
        return eps, eps.copy()
    if isinstance(model, MlpNet):
        return mlp_forward_batch(model, x, tv)
    raise TypeError(f"not a target model: {type(model).__name__}")


def net_to_json(net: MlpNet) -> str:
    """Checkpoint: layer dims, row-major weights, activation, feature index."""
    dims = [net.in_dim] + [w.shape[0] for w in net.weights]
    return json.dumps(
        {
            "layers": dims,
            "weights": [w.ravel().tolist() for w in net.weights],
            "biases": [b.tolist() for b in net.biases],
            "activation": net.activation,
            "feature_layer": net.feature_layer,
            "t_scale": net.t_scale,
        }
    )


def net_from_json(text: str) -> MlpNet:
    doc = json.loads(text)
    dims = doc["layers"]
    weights = [
        np.asarray(flat, dtype=np.float64).reshape(dims[l + 1], dims[l])
        for l, flat in enumerate(doc["weights"])
    ]
    biases = [np.asarray(b, dtype=np.float64) for b in doc["biases"]]
    return MlpNet(
        weights=weights,
        biases=biases,
        activation=doc["activation"],
        feature_layer=int(doc["feature_layer"]),
        t_scale=int(doc["t_scale"]),
    )
