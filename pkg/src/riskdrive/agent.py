"""Risk-constrained off-policy actor-critic.

Actor: diagonal Gaussian over a pre-squash acceleration, tanh-squashed to
[-1, 1] and affinely mapped to the scenario's acceleration bounds, plus an
optional 3-way categorical lane-change head (left / keep / right). Twin
utility critics with Polyak-averaged targets estimate the return; a
non-negative dual variable prices model-predicted risk into both the
critic targets and the actor objective. Transitions that recorded any
cost train the critics toward the fixed penalty -c*, a horizon-limited
constant large enough that every unsafe trajectory is worth less than any
safe one.

All gradients are explicit. The actor update differentiates the exact
3-way expectation over the lane head (no sampling bias) and chains
dQ/da and df/da through the critic and world-model input gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numkit import AdamState, DenseNet

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LANE_COMMANDS = (1, 0, -1)  # encoded lane head order: left, keep, right


@dataclass
class ActionSpace:
    """Acceleration bounds in m/s^2 plus an optional lane-change head."""

    acc_lo: float
    acc_hi: float
    lane: bool = False

    @property
    def enc_dim(self) -> int:
        # encoded action as seen by critics / world model
        return 4 if self.lane else 1

    def acc_from_norm(self, norm):
        return self.acc_lo + (np.asarray(norm) + 1.0) * 0.5 * (self.acc_hi - self.acc_lo)

    def encode(self, acc_norm, lane_idx=None) -> np.ndarray:
        acc_norm = np.atleast_1d(np.asarray(acc_norm, dtype=np.float64))
        if not self.lane:
            return acc_norm[:, None]
        onehot = np.zeros((acc_norm.shape[0], 3))
        onehot[np.arange(acc_norm.shape[0]), np.asarray(lane_idx, dtype=int)] = 1.0
        return np.concatenate([acc_norm[:, None], onehot], axis=1)

    def env_action(self, acc_norm: float, lane_idx: int | None = None) -> np.ndarray:
        acc = float(self.acc_from_norm(acc_norm))
        if not self.lane:
            return np.array([acc])
        return np.array([acc, float(LANE_COMMANDS[int(lane_idx)])])


class Actor:
    """Squashed-Gaussian acceleration policy with optional lane logits."""

    def __init__(self, obs_dim: int, space: ActionSpace, hidden=(64, 64), lr: float = 3e-4,
                 rng: np.random.Generator | None = None):
        self.space = space
        out = 2 + (3 if space.lane else 0)  # acc mean, acc log-std, lane logits
        self.net = DenseNet.build([obs_dim, *hidden, out], "tanh", rng)
        self.opt = AdamState(self.net.parameters(), lr)

    def heads(self, s):
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        raw = self.net.forward(s)
        mu = raw[:, 0]
        log_std = np.clip(raw[:, 1], LOG_STD_MIN, LOG_STD_MAX)
        logits = raw[:, 2:] if self.space.lane else None
        return mu, log_std, logits

    @staticmethod
    def _softmax(logits):
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def act(self, s, rng: np.random.Generator | None = None, deterministic: bool = False):
        """Returns (env_action, encoded_action) for a single observation."""
        mu, log_std, logits = self.heads(s)
        if deterministic:
            acc_norm = math.tanh(mu[0])
            lane = int(np.argmax(logits[0])) if self.space.lane else None
        else:
            if rng is None:
                raise ValueError("stochastic action needs an rng")
            pre = mu[0] + math.exp(log_std[0]) * rng.standard_normal()
            acc_norm = math.tanh(pre)
            lane = None
            if self.space.lane:
                p = self._softmax(logits)[0]
                lane = int(rng.choice(3, p=p))
        enc = self.space.encode([acc_norm], [lane] if lane is not None else None)[0]
        return self.space.env_action(acc_norm, lane), enc

    def act_batch(self, s, rng: np.random.Generator):
        """Stochastic encoded actions for a batch (used by rollouts)."""
        mu, log_std, logits = self.heads(s)
        pre = mu + np.exp(log_std) * rng.standard_normal(mu.shape[0])
        acc_norm = np.tanh(pre)
        if not self.space.lane:
            return self.space.encode(acc_norm)
        p = self._softmax(logits)
        u = rng.random((mu.shape[0], 1))
        lane = (u > np.cumsum(p, axis=1)).sum(axis=1)
        return self.space.encode(acc_norm, np.clip(lane, 0, 2))

    def to_networks(self) -> dict:
        return {"actor/theta": self.net}

    def load_networks(self, nets: dict) -> None:
        self.net.load_from(nets["actor/theta"])


def select_action(actor: Actor, s, mode: str = "stochastic",
                  rng: np.random.Generator | None = None):
    if mode not in ("stochastic", "deterministic"):
        raise ValueError(f"unknown mode {mode!r}")
    return actor.act(s, rng=rng, deterministic=(mode == "deterministic"))


# -- critics ---------------------------------------------------------------------


class CriticPair:
    """Twin Q networks plus Polyak-averaged target copies."""

    def __init__(self, obs_dim: int, enc_dim: int, hidden=(64, 64), lr: float = 3e-4,
                 rng: np.random.Generator | None = None):
        dims = [obs_dim + enc_dim, *hidden, 1]
        self.q1 = DenseNet.build(dims, "tanh", rng)
        self.q2 = DenseNet.build(dims, "tanh", rng)
        self.t1 = self.q1.copy()
        self.t2 = self.q2.copy()
        self.opt1 = AdamState(self.q1.parameters(), lr)
        self.opt2 = AdamState(self.q2.parameters(), lr)

    @staticmethod
    def _join(s, enc):
        return np.concatenate([np.atleast_2d(s), np.atleast_2d(enc)], axis=1)

    def target_min(self, s, enc) -> np.ndarray:
        x = self._join(s, enc)
        return np.minimum(self.t1.forward(x)[:, 0], self.t2.forward(x)[:, 0])

    def online_min(self, s, enc) -> np.ndarray:
        x = self._join(s, enc)
        return np.minimum(self.q1.forward(x)[:, 0], self.q2.forward(x)[:, 0])

    def update(self, s, enc, y) -> float:
        """One Adam step per critic on mean squared error to constant y."""
        x = self._join(s, enc)
        y = np.asarray(y, dtype=np.float64)
        bsz = x.shape[0]
        total = 0.0
        for net, opt in ((self.q1, self.opt1), (self.q2, self.opt2)):
            q, cache = net.forward_cached(x)
            err = q[:, 0] - y
            total += float(np.mean(err * err))
            grads, _ = net.backward(cache, (2.0 * err / bsz)[:, None])
            opt.step(net.parameters(), grads)
        return 0.5 * total

    def polyak(self, tau: float) -> None:
        for online, target in ((self.q1, self.t1), (self.q2, self.t2)):
            for p, t in zip(online.parameters(), target.parameters()):
                t *= tau
                t += (1.0 - tau) * p

    def min_with_grads(self, s, enc):
        """min(Q1, Q2) and its gradient w.r.t. the encoded action."""
        x = self._join(s, enc)
        v1, c1 = self.q1.forward_cached(x)
        v2, c2 = self.q2.forward_cached(x)
        v1, v2 = v1[:, 0], v2[:, 0]
        pick1 = v1 <= v2
        ones = np.ones((x.shape[0], 1))
        _, g1 = self.q1.backward(c1, ones)
        _, g2 = self.q2.backward(c2, ones)
        gx = np.where(pick1[:, None], g1, g2)
        obs_dim = np.atleast_2d(s).shape[1]
        return np.where(pick1, v1, v2), gx[:, obs_dim:]

    def to_networks(self) -> dict:
        return {"critic/phi1": self.q1, "critic/phi2": self.q2,
                "critic/target1": self.t1, "critic/target2": self.t2}

    def load_networks(self, nets: dict) -> None:
        self.q1.load_from(nets["critic/phi1"])
        self.q2.load_from(nets["critic/phi2"])
        self.t1.load_from(nets["critic/target1"])
        self.t2.load_from(nets["critic/target2"])


def polyak_update(critics: CriticPair, tau: float = 0.995) -> None:
    critics.polyak(tau)


# -- dual variable and unsafe penalty ------------------------------------------------


class DualVariable:
    """Projected-gradient Lagrange multiplier on mean predicted risk."""

    def __init__(self, lam: float = 0.0, lr: float = 1e-3, f0: float = 0.5):
        if lam < 0.0:
            raise ValueError("lambda must start non-negative")
        self.lam = lam
        self.lr = lr
        self.f0 = f0

    def update(self, f_samples) -> float:
        f = np.asarray(f_samples, dtype=np.float64)
        if not np.all(np.isfinite(f)):
            raise ValueError("non-finite risk samples")
        self.lam = max(0.0, self.lam - self.lr * float(np.mean(self.f0 - f)))
        return self.lam


@dataclass
class PenaltySpec:
    """Inputs of the horizon-limited unsafe penalty c*."""

    r_hi: float = 2.0
    r_lo: float = -2.0
    gamma: float = 0.99
    horizon: int = 5
    lam: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("gamma must be in (0,1)")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.r_hi < self.r_lo:
            raise ValueError("r_hi < r_lo")

    def c_star(self) -> float:
        g_h = self.gamma ** self.horizon
        return ((self.r_hi - self.r_lo) / (g_h * (1.0 - self.gamma))
                + self.lam / g_h - self.r_hi / (1.0 - self.gamma))

    def validate_dominates(self) -> None:
        """-c* must undercut the worst attainable safe return."""
        if not (-self.c_star() < self.r_lo / (1.0 - self.gamma)):
            raise ValueError("penalty does not dominate worst-case safe return")


def penalty_coefficient(spec: PenaltySpec) -> float:
    return spec.c_star()


# -- targets and updates -----------------------------------------------------------------


def critic_target(r, cost, s_next, terminal, actor: Actor, critics: CriticPair,
                  risk_fn, lam: float, gamma: float, c_star: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Batched target y per the safety-gated bootstrap rule.

    unsafe (cost > 0):        y = -c*
    terminal safe (goal):     y = r
    otherwise:                y = r + gamma * (min_z Qbar(s', a') - lam f(s', a'))
    with a' sampled from the current policy.
    """
    r = np.asarray(r, dtype=np.float64)
    cost = np.asarray(cost, dtype=np.float64)
    terminal = np.asarray(terminal, dtype=bool)
    enc_next = actor.act_batch(s_next, rng)
    q_next = critics.target_min(s_next, enc_next)
    f_next = risk_fn(s_next, enc_next) if lam != 0.0 else np.zeros_like(q_next)
    y = r + gamma * (q_next - lam * f_next)
    y = np.where(terminal, r, y)
    return np.where(cost > 0.0, -c_star, y)


def update_critics(critics: CriticPair, s, enc, y) -> float:
    return critics.update(s, enc, y)


def update_actor(actor: Actor, critics: CriticPair, s, lam: float, risk_grad_fn=None,
                 entropy_alpha: float = 0.0, rng: np.random.Generator | None = None) -> float:
    """One ascent step on J = E[min Q(s, a_theta) - lam f(s, a_theta)].

    The acceleration is reparameterized (fixed standard-normal draw); the
    lane head contributes through its exact probability-weighted
    expectation, so no score-function estimator is needed. risk_grad_fn(s,
    enc) -> (f, df/denc); optional entropy bonus for the SAC-style
    baselines. Returns the (pre-step) objective value.
    """
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    bsz = s.shape[0]
    raw, cache = actor.net.forward_cached(s)
    mu = raw[:, 0]
    log_std = np.clip(raw[:, 1], LOG_STD_MIN, LOG_STD_MAX)
    inside_std = (raw[:, 1] > LOG_STD_MIN) & (raw[:, 1] < LOG_STD_MAX)
    eps = rng.standard_normal(bsz) if rng is not None else np.zeros(bsz)
    std = np.exp(log_std)
    pre = mu + std * eps
    acc = np.tanh(pre)
    dacc_dpre = 1.0 - acc * acc

    lane = actor.space.lane
    n_lane = 3 if lane else 1
    values = np.zeros((bsz, n_lane))
    dv_dacc = np.zeros((bsz, n_lane))
    for li in range(n_lane):
        enc = actor.space.encode(acc, np.full(bsz, li, dtype=int)) if lane else actor.space.encode(acc)
        q, dq_denc = critics.min_with_grads(s, enc)
        values[:, li] = q
        dv_dacc[:, li] = dq_denc[:, 0]
        if lam != 0.0 and risk_grad_fn is not None:
            f, df_denc = risk_grad_fn(s, enc)
            values[:, li] -= lam * f
            dv_dacc[:, li] -= lam * df_denc[:, 0]

    g_out = np.zeros_like(raw)
    if lane:
        logits = raw[:, 2:]
        p = Actor._softmax(logits)
        j_per = np.sum(p * values, axis=1)
        dj_dacc = np.sum(p * dv_dacc, axis=1)
        g_out[:, 2:] = p * (values - j_per[:, None])
        if entropy_alpha > 0.0:
            logp = np.log(np.maximum(p, 1e-12))
            ent = -np.sum(p * logp, axis=1)
            g_out[:, 2:] += entropy_alpha * (-p * (logp + ent[:, None]))
            j_per = j_per + entropy_alpha * ent
    else:
        j_per = values[:, 0]
        dj_dacc = dv_dacc[:, 0]

    g_out[:, 0] = dj_dacc * dacc_dpre
    g_out[:, 1] = dj_dacc * dacc_dpre * std * eps * inside_std
    if entropy_alpha > 0.0:
        # analytic entropy of the pre-squash Gaussian: dH/dlog_std = 1
        g_out[:, 1] += entropy_alpha * inside_std
        j_per = j_per + entropy_alpha * (log_std + 0.5 * math.log(2.0 * math.pi * math.e))

    grads, _ = actor.net.backward(cache, -g_out / bsz)  # ascend
    actor.opt.step(actor.net.parameters(), grads)
    return float(np.mean(j_per))


def update_dual(dual: DualVariable, f_samples) -> float:
    return dual.update(f_samples)


# -- runtime safety shield ------------------------------------------------------------------


def safety_shield(actor: Actor, risk_fn, s, f0: float = 0.5, k_retry: int = 8,
                  noise_scale: float | None = None, rng: np.random.Generator | None = None):
    """Deterministic action unless its predicted risk exceeds f0.

    risk_fn(s, enc) -> scalar risk. Above threshold, up to k_retry
    Gaussian-perturbed accelerations (lane resampled from the policy) are
    probed; the first to clear f0 wins, otherwise the lowest-risk
    candidate. Never raises merely because all candidates stay risky.
    Returns (env_action, encoded, shielded_flag).
    """
    if rng is None:
        rng = np.random.default_rng()
    if noise_scale is None:
        noise_scale = 0.3 * 2.0  # tanh-normalized acceleration spans [-1, 1]
    env_a, enc = actor.act(s, deterministic=True)
    base_f = float(np.asarray(risk_fn(np.atleast_2d(s), np.atleast_2d(enc))).ravel()[0])
    if base_f <= f0:
        return env_a, enc, False
    mu, _, logits = actor.heads(s)
    acc0 = math.tanh(mu[0])
    p = Actor._softmax(logits)[0] if actor.space.lane else None
    best = None
    for _ in range(k_retry):
        acc = float(np.clip(acc0 + noise_scale * rng.standard_normal(), -1.0, 1.0))
        lane = int(rng.choice(3, p=p)) if actor.space.lane else None
        enc_j = actor.space.encode([acc], [lane] if lane is not None else None)[0]
        f_j = float(np.asarray(risk_fn(np.atleast_2d(s), np.atleast_2d(enc_j))).ravel()[0])
        if best is None or f_j < best[0]:
            best = (f_j, acc, lane)
        if f_j <= f0:
            break
    _, acc, lane = best
    return actor.space.env_action(acc, lane), actor.space.encode([acc], [lane] if lane is not None else None)[0], True
