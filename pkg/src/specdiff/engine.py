"""The drafter-verifier sampling loop and its offline companions.

Engine-local indexing: state s_0 is pure noise, s_T the final sample, and the
transition that produces s_k uses schedule tables at t = T - k + 1.  Noise
for engine step k always comes from the keyed stream at step k, so a state
costs bitwise the same randomness whether it was reached serially or through
an accepted draft.

Each speculation round does one serial target pass (finalising one step),
rolls the drafter L' = min(L, steps remaining) states ahead, evaluates the
target on all drafted predecessors in one parallel batch, then verifies
sequentially; the first rejection finalises its reflected sample and discards
the rest.  A round therefore finalises between 2 and L'+1 steps against 2
counted invocations (serial pass + batch), which caps parallel efficiency at
(L+1)/2.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .coupling import VerifyResult, verify_relaxed
from .models import (
    GmmTarget,
    MlpNet,
    ModelOutput,
    drafter_forward,
    evaluate_target,
    evaluate_target_batch,
    score_from_eps,
)
from .schedule import NoiseSchedule, SdeCoefficients, em_kernel, reverse_mean
from .stats import RngKey, keyed_gaussian

LAMBDA_MIN_DEFAULT = 0.05


@dataclass(frozen=True)
class ScoreBiasDrafter:
    """Diagnostic drafter: the target's score plus a constant bias.

    Gives a step-independent mean gap whose scaled size is known in closed
    form, which is what the stochasticity-sweep calibration measures against.
    """

    bias: np.ndarray


@dataclass
class DraftSequence:
    """One round's speculative states, features, proposal means and eps."""

    anchor: int
    states: list = field(default_factory=list)
    features: list = field(default_factory=list)
    means: list = field(default_factory=list)
    eps: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.states)


@dataclass
class RelaxProfile:
    """Per-step coupling relaxation, non-increasing from strict to loose."""

    lam: np.ndarray
    floor: float = LAMBDA_MIN_DEFAULT
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        lam = np.asarray(self.lam, dtype=np.float64)
        if np.any(lam > 1.0) or np.any(lam < self.floor - 1e-12):
            raise ValueError("profile values must lie in [floor, 1]")
        if np.any(lam[1:] > lam[:-1] + 1e-12):
            raise ValueError("profile must be non-increasing in step index")
        self.lam = lam


@dataclass
class RunMetrics:
    """Invocation counts, acceptance tallies and the uncertainty trace."""

    T: int
    L: int
    serial: int = 0
    batches: int = 0
    drafted: int = 0
    steps: int = 0
    accepted_by_depth: dict = field(default_factory=dict)
    rejected_by_depth: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)  # (step, eps_delta, accept_prob)

    @property
    def accepted(self) -> int:
        return sum(self.accepted_by_depth.values())

    @property
    def rejected(self) -> int:
        return sum(self.rejected_by_depth.values())


@dataclass(frozen=True)
class CostModel:
    """Wall-clock surrogate: drafter cost and batch latency per target pass."""

    t_target: float = 1.0
    draft_ratio: float = 1.0 / 28.0
    t_comm: float = 0.0

    def __post_init__(self) -> None:
        if self.t_target <= 0.0 or self.draft_ratio < 0.0 or self.t_comm < 0.0:
            raise ValueError("cost model parameters out of range")


def t_for_step(k: int, T: int) -> int:
    """Schedule step backing engine step k (k = 1 is the first transition)."""
    return T - k + 1


def _model_dim(target) -> int:
    if isinstance(target, GmmTarget):
        return target.dim
    if isinstance(target, MlpNet):
        return target.out_dim
    raise TypeError(f"not a target model: {type(target).__name__}")


def _check_em(sched: NoiseSchedule, sde: SdeCoefficients | None) -> None:
    if sde is None:
        return
    if sched.variance_mode != "em" or sched.epsilon != sde.epsilon:
        raise ValueError("sde coefficients do not match the schedule's variance mode")


def _kernel(x, eps, t, sched, sde):
    """Reverse-kernel (mean, var) at predecessor x in the active mode."""
    if sde is None:
        return reverse_mean(x, eps, t, sched), float(sched.sigma2[t - 1])
    k = em_kernel(x, score_from_eps(eps, t, sched), t, sde)
    return k.mean, k.var


def sample_vanilla(target, sched: NoiseSchedule, seed: int, sde: SdeCoefficients | None = None):
    """Sequential reference sampler: T serial target passes.

    Returns (trajectory [T+1, d], RunMetrics).  Arithmetic and keyed noise
    match the speculative engine's serial path exactly.
    """
    _check_em(sched, sde)
    T = sched.T
    d = _model_dim(target)
    traj = np.empty((T + 1, d))
    x = keyed_gaussian(RngKey(seed, 0, "init"), d)
    traj[0] = x
    metrics = RunMetrics(T=T, L=0)
    for k in range(1, T + 1):
        t = t_for_step(k, T)
        out = evaluate_target(target, x, t, sched)
        mean, var = _kernel(x, out.eps, t, sched, sde)
        x = mean + math.sqrt(var) * keyed_gaussian(RngKey(seed, k, "noise"), d)
        traj[k] = x
        metrics.serial += 1
        metrics.steps = k
    return traj, metrics


def sample_vanilla_batch(target, sched: NoiseSchedule, seeds, sde: SdeCoefficients | None = None) -> np.ndarray:
    """Final states of many vanilla chains, vectorised across chains.

    Distribution-identical to per-chain sample_vanilla (same keyed draws);
    used where only final samples matter and chain count is large.
    """
    _check_em(sched, sde)
    T = sched.T
    d = _model_dim(target)
    seeds = list(seeds)
    x = np.stack([keyed_gaussian(RngKey(s, 0, "init"), d) for s in seeds])
    for k in range(1, T + 1):
        t = t_for_step(k, T)
        eps, _ = evaluate_target_batch(target, x, t, sched)
        if sde is None:
            coef = (1.0 - sched.alpha[t - 1]) / math.sqrt(1.0 - sched.alpha_bar[t])
            mean = (x - coef * eps) / math.sqrt(sched.alpha[t - 1])
            var = float(sched.sigma2[t - 1])
        else:
            score = -eps / math.sqrt(1.0 - sched.alpha_bar[t])
            eps2 = sde.epsilon**2
            drift = -sde.f[t - 1] * x + 0.5 * (1.0 + eps2) * sde.g2[t - 1] * score
            mean = x + sde.gamma * drift
            var = float(eps2 * sde.gamma * sde.g2[t - 1])
        z = np.stack([keyed_gaussian(RngKey(s, k, "noise"), d) for s in seeds])
        x = mean + math.sqrt(var) * z
    return x


def _draft_eps(drafter, target, anchor_out: ModelOutput, prev_feature, x, t, sched):
    """Drafter dispatch: returns (eps, feature) at predecessor x, step t."""
    if drafter == "oracle":
        out = evaluate_target(target, x, t, sched)
        return out.eps, out.feature
    if drafter == "frozen":
        return anchor_out.eps, anchor_out.feature
    if isinstance(drafter, ScoreBiasDrafter):
        out = evaluate_target(target, x, t, sched)
        eps = out.eps - math.sqrt(1.0 - sched.alpha_bar[t]) * drafter.bias
        return eps, out.feature
    if isinstance(drafter, MlpNet):
        out = drafter_forward(drafter, x, t, prev_feature)
        return out.eps, out.feature
    raise TypeError(f"not a drafter: {type(drafter).__name__}")


def sample_free(
    target,
    drafter,
    L: int,
    sched: NoiseSchedule,
    seed: int,
    relax: RelaxProfile | None = None,
    sde: SdeCoefficients | None = None,
    verify_fn=None,
):
    """Speculative sampler; distribution-exact vs sample_vanilla when relax is None.

    drafter is "oracle", "frozen", a ScoreBiasDrafter, or a trained MlpNet.
    verify_fn defaults to the coupling module's relaxed verification and is
    injectable only so negative controls can corrupt it deliberately.
    Returns (trajectory [T+1, d], RunMetrics).
    """
    if L < 1:
        raise ValueError("speculation length L must be >= 1")
    _check_em(sched, sde)
    if relax is not None and relax.lam.shape[0] != sched.T:
        raise ValueError("relaxation profile length differs from T")
    if verify_fn is None:
        verify_fn = verify_relaxed

    T = sched.T
    d = _model_dim(target)
    traj = np.empty((T + 1, d))
    x = keyed_gaussian(RngKey(seed, 0, "init"), d)
    traj[0] = x
    metrics = RunMetrics(T=T, L=L)

    a = 0
    while a < T:
        # Serial pass: the target finalises step a+1 and seeds the round.
        t1 = t_for_step(a + 1, T)
        anchor_out = evaluate_target(target, x, t1, sched)
        mean, var = _kernel(x, anchor_out.eps, t1, sched, sde)
        x1 = mean + math.sqrt(var) * keyed_gaussian(RngKey(seed, a + 1, "noise"), d)
        metrics.serial += 1
        a1 = a + 1
        traj[a1] = x1
        if a1 == T:
            metrics.steps = a1
            break

        # Autoregressive drafting from the freshly finalised state.
        Lp = min(L, T - a1)
        seq = DraftSequence(anchor=a1)
        cur = x1
        prev_feature = anchor_out.feature
        for j in range(1, Lp + 1):
            k = a1 + j
            t = t_for_step(k, T)
            eps_d, feat_d = _draft_eps(drafter, target, anchor_out, prev_feature, cur, t, sched)
            m_hat, var = _kernel(cur, eps_d, t, sched, sde)
            cur = m_hat + math.sqrt(var) * keyed_gaussian(RngKey(seed, k, "noise"), d)
            seq.states.append(cur)
            seq.features.append(feat_d)
            seq.means.append(m_hat)
            seq.eps.append(eps_d)
            prev_feature = feat_d
        metrics.drafted += Lp

        # One parallel batch: target evaluations at every drafted predecessor.
        predecessors = [x1] + seq.states[:-1]
        eps_refs = [
            evaluate_target(target, predecessors[j], t_for_step(a1 + j + 1, T), sched).eps
            for j in range(Lp)
        ]
        metrics.batches += 1

        # Sequential accept/reflect; first rejection ends the round.
        final, committed = seq.states[-1], a1 + Lp
        for j in range(Lp):
            k = a1 + j + 1
            t = t_for_step(k, T)
            m_ref, var = _kernel(predecessors[j], eps_refs[j], t, sched, sde)
            lam = 1.0 if relax is None else float(relax.lam[k - 1])
            eps_d = seq.eps[j]
            res: VerifyResult = verify_fn(
                seq.means[j], m_ref, var, seq.states[j], lam, RngKey(seed, k, "verify")
            )
            metrics.trace.append(
                (k, float(np.linalg.norm(eps_d - eps_refs[j])), res.acceptance_prob)
            )
            depth = j + 1
            if res.accepted:
                metrics.accepted_by_depth[depth] = metrics.accepted_by_depth.get(depth, 0) + 1
                traj[k] = res.sample
            else:
                metrics.rejected_by_depth[depth] = metrics.rejected_by_depth.get(depth, 0) + 1
                traj[k] = res.sample
                final, committed = res.sample, k
                break
        x = final
        a = committed
        metrics.steps = a
    return traj, metrics


def self_spec_run(target, L: int, sched: NoiseSchedule, seed: int):
    """Offline profiling pass: the frozen drafter races its own target.

    Returns the uncertainty trace, one (step, eps_delta, accept_prob) row per
    verified draft.
    """
    _, metrics = sample_free(target, "frozen", L, sched, seed)
    return metrics.trace


def _pav_nondecreasing(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted pool-adjacent-violators fit, non-decreasing."""
    vals: list[float] = []
    wts: list[float] = []
    counts: list[int] = []
    for v, w in zip(values, weights):
        vals.append(float(v))
        wts.append(float(w))
        counts.append(1)
        while len(vals) > 1 and vals[-2] > vals[-1]:
            w_tot = wts[-2] + wts[-1]
            v_tot = (vals[-2] * wts[-2] + vals[-1] * wts[-1]) / w_tot
            c_tot = counts[-2] + counts[-1]
            vals[-2:] = [v_tot]
            wts[-2:] = [w_tot]
            counts[-2:] = [c_tot]
    out = np.empty(int(sum(counts)))
    pos = 0
    for v, c in zip(vals, counts):
        out[pos : pos + c] = v
        pos += c
    return out


def fit_relax_profile(trace, lambda_min: float = LAMBDA_MIN_DEFAULT, T: int | None = None) -> RelaxProfile:
    """Isotonic fit of the uncertainty trace, inverted into a relaxation profile.

    Mean eps_delta per step is fitted non-decreasing by pool-adjacent-
    violators; lambda_t = clamp(f_min / f(t), lambda_min, 1).  Steps absent
    from the trace carry the last fitted value forward (starting strict at 1),
    so the profile is total and non-increasing.  An all-zero trace yields the
    identity profile: nothing measured, nothing relaxed.
    """
    rows = list(trace)
    if not rows:
        raise ValueError("empty uncertainty trace")
    if not 0.0 < lambda_min <= 1.0:
        raise ValueError("lambda_min must lie in (0, 1]")
    steps = np.array([int(r[0]) for r in rows])
    deltas = np.array([float(r[1]) for r in rows])
    if T is None:
        T = int(steps.max())

    uniq = np.unique(steps)
    means = np.array([deltas[steps == s].mean() for s in uniq])
    counts = np.array([(steps == s).sum() for s in uniq], dtype=np.float64)
    fitted = _pav_nondecreasing(means, counts)
    f_min = float(fitted.min())

    lam_at = {}
    for s, f in zip(uniq, fitted):
        if f <= f_min or f_min == 0.0:
            lam_at[int(s)] = 1.0 if f <= f_min else lambda_min
        else:
            lam_at[int(s)] = min(1.0, max(lambda_min, f_min / float(f)))

    lam = np.empty(T)
    current = 1.0
    for k in range(1, T + 1):
        current = lam_at.get(k, current)
        lam[k - 1] = current
    return RelaxProfile(
        lam=lam,
        floor=lambda_min,
        metadata={"fit_method": "pav-reciprocal", "trace_rows": len(rows), "f_min": f_min},
    )


def parallel_efficiency(metrics: RunMetrics) -> float:
    """Steps finalised per counted invocation (serial passes + batches)."""
    inv = metrics.serial + metrics.batches
    if inv == 0:
        raise ValueError("no invocations recorded")
    return metrics.steps / inv


def wall_clock_model(metrics: RunMetrics, cost: CostModel) -> float:
    """Modeled speedup over a purely serial run under the cost surrogate.

    time = serial·t_target + drafted·draft_ratio·t_target
         + batches·(t_target + t_comm); speedup = steps·t_target / time.
    """
    modeled = (
        metrics.serial * cost.t_target
        + metrics.drafted * cost.draft_ratio * cost.t_target
        + metrics.batches * (cost.t_target + cost.t_comm)
    )
    if modeled <= 0.0:
        raise ValueError("modeled time must be positive")
    return metrics.steps * cost.t_target / modeled


# ---------------------------------------------------------------------------
# Run artifacts


def trace_to_csv(trace) -> str:
    lines = ["step,eps_delta,accept_prob"]
    for step, eps_delta, accept_prob in trace:
        lines.append("%d,%.10g,%.10g" % (step, eps_delta, accept_prob))
    return "\n".join(lines) + "\n"


def trace_from_csv(text: str):
    rows = []
    lines = [ln for ln in text.strip().splitlines() if ln]
    if lines and lines[0].lower().startswith("step"):
        lines = lines[1:]
    for ln in lines:
        s, d, p = ln.split(",")
        rows.append((int(s), float(d), float(p)))
    return rows


def metrics_to_json(metrics: RunMetrics, extra: dict | None = None) -> str:
    doc = {
        "T": metrics.T,
        "L": metrics.L,
        "serial": metrics.serial,
        "batches": metrics.batches,
        "drafted": metrics.drafted,
        "steps": metrics.steps,
        "accepted_by_depth": {str(k): v for k, v in sorted(metrics.accepted_by_depth.items())},
        "rejected_by_depth": {str(k): v for k, v in sorted(metrics.rejected_by_depth.items())},
        "trace_rows": len(metrics.trace),
    }
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2)


def profile_to_json(profile: RelaxProfile) -> str:
    return json.dumps(
        {"lambda": profile.lam.tolist(), "floor": profile.floor, "metadata": profile.metadata}
    )


def profile_from_json(text: str) -> RelaxProfile:
    doc = json.loads(text)
    return RelaxProfile(
        lam=np.asarray(doc["lambda"], dtype=np.float64),
        floor=float(doc["floor"]),
        metadata=dict(doc.get("metadata", {})),
    )


def write_trajectory(path, traj: np.ndarray) -> None:
    """Single-file dump: one JSON header line, then raw little-endian floats."""
    arr = np.ascontiguousarray(traj, dtype="<f8")
    header = json.dumps({"shape": list(arr.shape), "dtype": "<f8"}) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(arr.tobytes())


def read_trajectory(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        data = np.frombuffer(fh.read(), dtype=header["dtype"])
    return data.reshape(header["shape"])
