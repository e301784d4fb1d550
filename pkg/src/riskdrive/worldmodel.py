"""Probabilistic ensemble world model with hierarchical opponent reasoning.

N independent members, each a stack of K+1 diagonal-Gaussian nets over
(next_state, cost). Level 0 conditions on (s, a); level k >= 1 appends the
level-(k-1) mean prediction (s_hat, c_hat) to its input, so deeper levels
refine a recursive guess about how the scene reacts. All levels train
against real transitions by NLL; lower-level predictions are fed forward
as constants (no gradient through the recursion during training).

The model also owns the risk machinery built on top of the ensemble:

* aleatoric variance: mean predicted variance over members, levels, dims
* epistemic variance: population variance of top-level member means
* amplification kappa = min(u1 * max_i |v_ego - v_i|, u1) from the
  observation's speed channels (raw m/s)
* sigma_hat = kappa * sqrt(sigma_a^2 + sigma_e^2), squashed to [0,1] by a
  running-max normalizer
* potential risk f = beta * c_hat + (1 - beta) * sigma_hat
* adaptive rollout horizon m* = floor(clip(-u2 sigma_hat + m_base, ...))

``risk_input_grads`` returns df/ds and df/da with every path chained by
hand (clamp masks included, kappa and the normalizer held constant), so
actor and barrier updates can differentiate through the risk head. The
finite-difference suite checks these chains end to end.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .numkit import AdamState, DenseNet, gaussian_nll_batch, gaussian_nll_grads, split_gaussian_raw

BETA_RISK = 0.90
U1_DEFAULT = 2.0


@dataclass
class ObsLayout:
    """Semantic indices into the (scaled) observation vector.

    v_scale/d_scale convert scaled entries back to m/s and meters.
    """

    dim: int
    d_indices: tuple
    v_indices: tuple
    v_ego_index: int
    v_scale: float = 1.0
    d_scale: float = 1.0


def slot_layout(dim: int, v_scale: float = 1.0, d_scale: float = 1.0) -> ObsLayout:
    """Layout for observations that start with six (d, phi, v, theta) slots."""
    return ObsLayout(
        dim=dim,
        d_indices=tuple(4 * i for i in range(6)),
        v_indices=tuple(4 * i + 2 for i in range(6)),
        v_ego_index=24,
        v_scale=v_scale,
        d_scale=d_scale,
    )


@dataclass
class RiskEstimate:
    c_hat: np.ndarray
    sigma_a2: np.ndarray
    sigma_e2: np.ndarray
    kappa: np.ndarray
    sigma_hat: np.ndarray
    f: np.ndarray


@dataclass
class HorizonPolicy:
    """Rollout depth shrinks linearly with normalized uncertainty."""

    u2: float = 8.0
    m_base: float = 10.0
    m_min: int = 1
    m_max: int = 15

    def __post_init__(self):
        if not (1 <= self.m_min <= self.m_base <= self.m_max):
            raise ValueError("need 1 <= m_min <= m_base <= m_max")

    def horizon(self, sigma_hat: float) -> int:
        raw = -self.u2 * float(sigma_hat) + self.m_base
        return int(np.floor(np.clip(raw, self.m_min, self.m_max)))


def potential_risk(c_hat, sigma_hat, beta: float = BETA_RISK):
    """Convex blend of predicted violation probability and uncertainty."""
    return beta * np.asarray(c_hat) + (1.0 - beta) * np.asarray(sigma_hat)


class RunningMax:
    """Running-max normalizer with a positive floor; maps into [0, 1]."""

    FLOOR = 1e-6

    def __init__(self, value: float | None = None):
        self.value = max(float(value), self.FLOOR) if value is not None else self.FLOOR

    def observe(self, x) -> None:
        m = float(np.max(x)) if np.size(x) else 0.0
        if np.isfinite(m) and m > self.value:
            self.value = m

    def normalize(self, x):
        return np.clip(np.asarray(x, dtype=np.float64) / self.value, 0.0, 1.0)


class EnsembleWorldModel:
    """N members x (K+1) levels of Gaussian (next_state, cost) predictors."""

    def __init__(self, obs_dim: int, act_dim: int, layout: ObsLayout,
                 n_members: int = 5, k_levels: int = 2, hidden=(64, 64),
                 lr: float = 1e-3, u1: float = U1_DEFAULT, beta: float = BETA_RISK,
                 rng: np.random.Generator | None = None):
        if n_members < 2:
            raise ValueError("epistemic variance needs at least 2 members")
        if k_levels < 0:
            raise ValueError("k_levels must be >= 0")
        if rng is None:
            rng = np.random.default_rng()
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.layout = layout
        self.n = n_members
        self.k = k_levels
        self.u1 = u1
        self.beta = beta
        self.out_dim = obs_dim + 1  # next state plus cost
        self.nets = []
        for _ in range(n_members):
            stack = []
            for k in range(k_levels + 1):
                in_dim = obs_dim + act_dim + (self.out_dim if k >= 1 else 0)
                stack.append(DenseNet.build([in_dim, *hidden, 2 * self.out_dim], "tanh", rng))
            self.nets.append(stack)
        self.opts = [[AdamState(net.parameters(), lr) for net in stack] for stack in self.nets]
        self.normalizer = RunningMax()

    # -- single-head prediction ------------------------------------------------

    def _level_input(self, s, a, prev):
        if prev is None:
            return np.concatenate([s, a], axis=-1)
        return np.concatenate([s, a, prev[0], prev[1]], axis=-1)

    def predict_level(self, n: int, k: int, s, a, prev=None):
        """Gaussian (mu, var) over (s', c) from member n's level-k head.

        prev = (s_hat, c_hat) from level k-1, required iff k >= 1 (level 0
        ignores it). The cost component of mu is clamped to [0, 1].
        """
        if not (0 <= n < self.n):
            raise ValueError(f"member {n} out of range")
        if not (0 <= k <= self.k):
            raise ValueError(f"level {k} out of range")
        if k >= 1 and prev is None:
            raise ValueError("levels >= 1 need the previous-level prediction")
        s = np.asarray(s, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        x = self._level_input(s, a, prev) if k >= 1 else self._level_input(s, a, None)
        raw = self.nets[n][k].forward(x)
        mean, log_var, _ = split_gaussian_raw(raw)
        mean = mean.copy()
        mean[..., -1] = np.clip(mean[..., -1], 0.0, 1.0)
        return mean, np.exp(log_var)

    def _stack_forward(self, n: int, s, a, cached: bool = False):
        """Run member n through all levels; returns per-level dicts."""
        levels = []
        prev = None
        for k in range(self.k + 1):
            x = self._level_input(s, a, prev)
            net = self.nets[n][k]
            if cached:
                raw, cache = net.forward_cached(x)
            else:
                raw, cache = net.forward(x), None
            mean, log_var, inside = split_gaussian_raw(raw)
            c_clamped = np.clip(mean[..., -1:], 0.0, 1.0)
            c_mask = ((mean[..., -1:] > 0.0) & (mean[..., -1:] < 1.0)).astype(np.float64)
            levels.append({"x": x, "cache": cache, "mean": mean, "log_var": log_var,
                           "inside": inside, "c": c_clamped, "c_mask": c_mask})
            prev = (mean[..., :-1], c_clamped)
        return levels

    # -- training ------------------------------------------------------------------

    def train_members(self, batches) -> list | None:
        """One Adam step per member and level on NLL of (s', c).

        batches: one (s, a, s_next, cost) tuple per member (independent
        mini-batches). Every level trains against the real targets; inputs
        built from lower levels carry no gradient. Returns per-member lists
        of mean per-sample NLL, or None for empty input.
        """
        if not batches or any(b[0].shape[0] == 0 for b in batches):
            warnings.warn("train_members called with an empty batch; skipping")
            return None
        losses = []
        for n, (s, a, s_next, cost) in enumerate(batches):
            target = np.concatenate([s_next, np.asarray(cost, dtype=np.float64).reshape(-1, 1)], axis=1)
            bsz = s.shape[0]
            prev = None
            member_losses = []
            for k in range(self.k + 1):
                x = self._level_input(s, a, prev)
                net = self.nets[n][k]
                raw, cache = net.forward_cached(x)
                mean, log_var, inside = split_gaussian_raw(raw)
                member_losses.append(float(np.mean(gaussian_nll_batch(mean, log_var, target))))
                d_mean, d_lv = gaussian_nll_grads(mean, log_var, target, inside)
                grad_raw = np.concatenate([d_mean, d_lv], axis=1) / bsz
                grads, _ = net.backward(cache, grad_raw)
                self.opts[n][k].step(net.parameters(), grads)
                prev = (mean[:, :-1], np.clip(mean[:, -1:], 0.0, 1.0))
            losses.append(member_losses)
        return losses

    # -- ensemble statistics ------------------------------------------------------------

    def _ensemble_pass(self, s, a, cached: bool = False):
        return [self._stack_forward(n, s, a, cached=cached) for n in range(self.n)]

    def kappa(self, s) -> np.ndarray:
        """Interaction amplification from raw speed gaps, capped at u1."""
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        lay = self.layout
        v_ego = s[:, lay.v_ego_index] * lay.v_scale
        v_nb = s[:, list(lay.v_indices)] * lay.v_scale
        dv = np.max(np.abs(v_nb - v_ego[:, None]), axis=1) if len(lay.v_indices) else np.zeros(s.shape[0])
        return np.minimum(self.u1 * dv, self.u1)

    def ensemble_stats(self, s, a):
        """Aggregate means/variances used by risk, uncertainty, and rollouts."""
        s2 = np.atleast_2d(np.asarray(s, dtype=np.float64))
        a2 = np.atleast_2d(np.asarray(a, dtype=np.float64))
        members = self._ensemble_pass(s2, a2)
        top_means = np.stack([m[self.k]["mean"] for m in members])        # (N,B,D+1)
        all_vars = np.stack([np.stack([np.exp(l["log_var"]) for l in m]) for m in members])
        c_hat = np.mean(np.stack([m[self.k]["c"][:, 0] for m in members]), axis=0)
        sigma_a2 = np.mean(all_vars, axis=(0, 1, 3))                      # (B,)
        mu_bar = np.mean(top_means, axis=0)
        sigma_e2 = np.mean(np.mean((top_means - mu_bar) ** 2, axis=0), axis=1)
        # Eq.-style rollout spread: mean member std at the top level
        top_sigma = np.mean(np.sqrt(np.exp(np.stack([m[self.k]["log_var"] for m in members]))),
                            axis=(0, 2))
        return {
            "members": members,
            "top_means": top_means,
            "c_hat": c_hat,
            "sigma_a2": sigma_a2,
            "sigma_e2": sigma_e2,
            "top_sigma": top_sigma,
            "s_next": np.mean(top_means[:, :, :-1], axis=0),
        }

    def uncertainty(self, s, a, v_ego=None, v_nearby=None, update_normalizer: bool = False) -> RiskEstimate:
        """Dual-uncertainty risk estimate at (s, a).

        v_ego / v_nearby override the speeds read from the observation via
        the layout (raw m/s). With update_normalizer the running max
        absorbs this batch before normalizing.
        """
        stats = self.ensemble_stats(s, a)
        if v_ego is not None:
            v_ego = np.atleast_1d(np.asarray(v_ego, dtype=np.float64))
            if v_nearby is not None and np.size(v_nearby):
                v_nb = np.atleast_2d(np.asarray(v_nearby, dtype=np.float64))
                dv = np.max(np.abs(v_nb - v_ego[:, None]), axis=1)
            else:
                dv = np.zeros_like(v_ego)
            kap = np.minimum(self.u1 * dv, self.u1)
        else:
            kap = self.kappa(s)
        raw_sigma = kap * np.sqrt(stats["sigma_a2"] + stats["sigma_e2"])
        if update_normalizer:
            self.normalizer.observe(raw_sigma)
        sigma_hat = self.normalizer.normalize(raw_sigma)
        f = potential_risk(stats["c_hat"], sigma_hat, self.beta)
        return RiskEstimate(stats["c_hat"], stats["sigma_a2"], stats["sigma_e2"],
                            kap, sigma_hat, f)

    def risk(self, s, a) -> np.ndarray:
        return self.uncertainty(s, a).f

    # -- analytic risk gradients ----------------------------------------------------------

    def risk_input_grads(self, s, a):
        """f(s, a) with df/ds and df/da, all shapes batched.

        kappa and the running-max value are treated as constants (kappa
        depends only on speed channels through a piecewise-constant cap and
        is never differentiated by callers; the normalizer is frozen during
        loss evaluation).
        """
        s2 = np.atleast_2d(np.asarray(s, dtype=np.float64))
        a2 = np.atleast_2d(np.asarray(a, dtype=np.float64))
        bsz = s2.shape[0]
        d_out = self.out_dim
        members = self._ensemble_pass(s2, a2, cached=True)

        top_means = np.stack([m[self.k]["mean"] for m in members])
        mu_bar = np.mean(top_means, axis=0)
        sigma_e2 = np.mean(np.mean((top_means - mu_bar) ** 2, axis=0), axis=1)
        all_vars = np.stack([np.stack([np.exp(l["log_var"]) for l in m]) for m in members])
        sigma_a2 = np.mean(all_vars, axis=(0, 1, 3))
        c_hat = np.mean(np.stack([m[self.k]["c"][:, 0] for m in members]), axis=0)

        kap = self.kappa(s2)
        total = sigma_a2 + sigma_e2
        raw_sigma = kap * np.sqrt(total)
        scaled = raw_sigma / self.normalizer.value
        sigma_hat = np.clip(scaled, 0.0, 1.0)
        f = potential_risk(c_hat, sigma_hat, self.beta)

        # d f / d total-variance, zero where the clip or sqrt kill the path
        interior = (scaled > 0.0) & (scaled < 1.0) & (total > 1e-300)
        dS = np.where(interior,
                      (1.0 - self.beta) * kap / (2.0 * self.normalizer.value * np.sqrt(np.maximum(total, 1e-300))),
                      0.0)

        df_ds = np.zeros_like(s2)
        df_da = np.zeros_like(a2)
        var_count = self.n * (self.k + 1) * d_out
        for n, levels in enumerate(members):
            g_mu = [np.zeros((bsz, d_out)) for _ in range(self.k + 1)]
            top = levels[self.k]
            # epistemic path: d sigma_e^2 / d mu_nK = 2 (mu - mu_bar) / (N * D)
            g_mu[self.k] += dS[:, None] * 2.0 * (top["mean"] - mu_bar) / (self.n * d_out)
            # violation-probability path through the clamped cost mean
            g_mu[self.k][:, -1] += self.beta / self.n * top["c_mask"][:, 0]
            for k in range(self.k, -1, -1):
                lvl = levels[k]
                g_lv = dS[:, None] * np.exp(lvl["log_var"]) / var_count * lvl["inside"]
                grad_raw = np.concatenate([g_mu[k], g_lv], axis=1)
                _, gx = self.nets[n][k].backward(lvl["cache"], grad_raw)
                df_ds += gx[:, :self.obs_dim]
                df_da += gx[:, self.obs_dim:self.obs_dim + self.act_dim]
                if k > 0:
                    tail = gx[:, self.obs_dim + self.act_dim:]
                    g_mu[k - 1][:, :-1] += tail[:, :-1]
                    g_mu[k - 1][:, -1] += tail[:, -1] * levels[k - 1]["c_mask"][:, 0]
        parts = RiskEstimate(c_hat, sigma_a2, sigma_e2, kap, sigma_hat, f)
        return f, df_ds, df_da, parts

    # -- virtual rollouts ---------------------------------------------------------------------

    def rollout(self, s0, policy_fn, barrier, horizon: int, rng: np.random.Generator,
                update_normalizer: bool = True):
        """Generate up to `horizon` virtual steps from each start state.

        policy_fn(s_batch) -> encoded actions; barrier may be None (no
        distance adjustment). Aggregation is the deterministic ensemble
        mean; the per-step spread is kappa * mean member std, normalized by
        the shared running max. Truncates cleanly on non-finite predictions.
        Returns (transitions, info) where transitions is a list of
        (s, a, c, s_next) batches.
        """
        s = np.atleast_2d(np.asarray(s0, dtype=np.float64))
        out = []
        f_log = []
        for _ in range(horizon):
            a = np.atleast_2d(policy_fn(s))
            stats = self.ensemble_stats(s, a)
            s_next = stats["s_next"]
            c_pred = stats["c_hat"]
            if not (np.all(np.isfinite(s_next)) and np.all(np.isfinite(c_pred))):
                break
            raw_sigma = self.kappa(s) * stats["top_sigma"]
            if update_normalizer:
                self.normalizer.observe(raw_sigma)
            sigma_hat = self.normalizer.normalize(raw_sigma)
            if barrier is not None:
                s_next = barrier.adjust_batch(s_next, sigma_hat, rng)
            f_log.append(potential_risk(c_pred, sigma_hat, self.beta))
            out.append((s, a, c_pred, s_next))
            s = s_next
        return out, {"f": f_log}

    # -- persistence -----------------------------------------------------------------------------

    def to_networks(self) -> dict:
        return {f"wm/member{n}/level{k}": self.nets[n][k]
                for n in range(self.n) for k in range(self.k + 1)}

    def load_networks(self, nets: dict) -> None:
        for n in range(self.n):
            for k in range(self.k + 1):
                self.nets[n][k].load_from(nets[f"wm/member{n}/level{k}"])
