"""End-to-end training/evaluation orchestration.

Owns everything around the learners: replay buffers, the episode loop,
update scheduling (world model -> rollouts -> critic -> actor -> barrier
-> dual -> Polyak, asserted by instrumentation), ablation switches,
baseline variants, metrics accounting, and the on-disk artifacts
(metrics.csv, summary.json, checkpoint.json, horizon_log.csv).

Algorithms:
  gtr2l    risk-constrained actor-critic with the ensemble world model,
           adaptive-horizon rollouts, barrier tightening, dual ascent,
           and an evaluation-time safety shield
  sac      same actor-critic with entropy bonus, lambda pinned to zero,
           no world model, no shield
  sac_lag  sac plus a dual variable driven by realized episode cost
           (enters through the unsafe-penalty coefficient)
  idm      rule-based car following, no learnable parameters
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .agent import (
    ActionSpace,
    Actor,
    CriticPair,
    DualVariable,
    PenaltySpec,
    critic_target,
    safety_shield,
    update_actor,
    update_critics,
)
from .kvconfig import load_kv_config
from .numkit import (
    checkpoint_document,
    checkpoint_hash,
    load_checkpoint,
    networks_from_document,
    save_checkpoint,
    scalars_from_document,
)
from .reachability import BarrierPolicy
from .traffsim import SENSE_RADIUS, IDMParams, TrafficEnv, idm_accel, make_scenario
from .worldmodel import EnsembleWorldModel, HorizonPolicy, slot_layout

ALGOS = ("gtr2l", "sac", "sac_lag", "idm")
ABLATIONS = ("ah", "gr", "rc")
WINDOW = 10
ETA_DS = 0.8
V_OBS_SCALE = 20.0
DEFAULT_EPISODES = {1: 300, 2: 300, 3: 500, 4: 800, 6: 300}

METRIC_COLUMNS = ("episode", "window_SR", "window_CR", "window_VR",
                  "TNC", "mean_speed", "DS")


@dataclass
class Hyperparams:
    """Learning constants; field names follow the config-file schema."""

    gamma: float = 0.99
    tau: float = 0.995
    l_a: float = 3e-4
    l_c: float = 3e-4
    l_w: float = 1e-3
    l_b: float = 1e-3
    l_d: float = 1e-3
    f0: float = 0.5
    beta: float = 0.90
    u1: float = 2.0
    u2: float = 8.0
    u3: float = 5.0
    m_base: float = 10.0
    m_min: int = 1
    m_max: int = 15
    n_members: int = 5
    k_levels: int = 2
    penalty_h: int = 5
    k_retry: int = 8
    action_repeat: int = 1
    warmup_policy: str = "mixed"  # "random" | "idm" | "mixed"
    rl_batch: int = 64
    wm_batch: int = 128
    rollout_starts: int = 8
    wm_steps: int = 10
    agent_steps: int = 24
    warmup_episodes: int = 10
    buffer_real: int = 100_000
    buffer_virtual: int = 20_000
    unsafe_frac_wm: float = 0.25
    unsafe_frac_rl: float = 0.10
    unsafe_anneal_ep: int = 100  # >0: decay unsafe_frac_rl linearly to 0 by this episode
    entropy_alpha: float = 0.1
    hidden_wm: tuple = (64, 64)
    hidden_actor: tuple = (64, 64)
    hidden_critic: tuple = (64, 64)
    hidden_barrier: tuple = (32, 32)


@dataclass
class RunConfig:
    scenario: int = 1
    flow: int = 1
    algo: str = "gtr2l"
    seed: int = 0
    episodes: int = 300
    ablate: tuple = ()
    out_dir: str = "runs/out"
    hp: Hyperparams = field(default_factory=Hyperparams)

    def __post_init__(self):
        if self.scenario not in (1, 2, 3, 4, 6):
            raise ValueError(f"unknown scenario {self.scenario}")
        if self.flow not in (1, 2):
            raise ValueError(f"unknown flow {self.flow}")
        if self.algo not in ALGOS:
            raise ValueError(f"unknown algo {self.algo!r}")
        bad = set(self.ablate) - set(ABLATIONS)
        if bad:
            raise ValueError(f"unknown ablation flags {sorted(bad)}")
        if self.episodes < 0:
            raise ValueError("episodes must be >= 0")


# -- observation scaling -------------------------------------------------------------


class ObsCodec:
    """Divides raw observation channels into roughly unit-scale net inputs."""

    def __init__(self, env_cfg, goal_s: float):
        dim = env_cfg.obs_dim
        scale = np.ones(dim)
        for i in range(6):
            scale[4 * i] = SENSE_RADIUS
            scale[4 * i + 1] = math.pi
            scale[4 * i + 2] = V_OBS_SCALE
            scale[4 * i + 3] = math.pi
        scale[24] = V_OBS_SCALE
        scale[25] = math.pi
        idx = 26
        if env_cfg.has_goal_term:
            scale[idx] = max(goal_s, 1.0)
            idx += 1
        if env_cfg.lights:
            scale[idx] = SENSE_RADIUS
            scale[idx + 1] = 2.0
        self.scale = scale
        self.layout = slot_layout(dim, v_scale=V_OBS_SCALE, d_scale=SENSE_RADIUS)

    def encode(self, obs_raw: np.ndarray) -> np.ndarray:
        return np.asarray(obs_raw, dtype=np.float64) / self.scale


# -- replay buffers --------------------------------------------------------------------


class ReplayBuffer:
    """Fixed-capacity ring of transitions with uniform seeded sampling."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int,
                 rng: np.random.Generator):
        self.capacity = int(capacity)
        self.rng = rng
        self.s = np.zeros((self.capacity, obs_dim))
        self.a = np.zeros((self.capacity, act_dim))
        self.r = np.zeros(self.capacity)
        self.c = np.zeros(self.capacity)
        self.s2 = np.zeros((self.capacity, obs_dim))
        self.goal = np.zeros(self.capacity, dtype=bool)
        self.size = 0
        self.cursor = 0

    def __len__(self) -> int:
        return self.size

    def add(self, s, a, r, c, s2, goal: bool) -> None:
        i = self.cursor
        self.s[i] = s
        self.a[i] = a
        self.r[i] = r
        self.c[i] = c
        self.s2[i] = s2
        self.goal[i] = goal
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def add_batch(self, s, a, r, c, s2, goal) -> None:
        for i in range(len(s)):
            self.add(s[i], a[i], r[i], c[i], s2[i], bool(goal[i]))

    def sample(self, n: int):
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = self.rng.integers(0, self.size, size=n)
        return self.rows(idx)

    def rows(self, idx):
        return (self.s[idx], self.a[idx], self.r[idx], self.c[idx],
                self.s2[idx], self.goal[idx])

    def unsafe_indices(self) -> np.ndarray:
        return np.flatnonzero(self.c[:self.size] > 0.0)

    def sample_mixed(self, n: int, unsafe_frac: float):
        """Uniform draw with a quota of cost-bearing rows mixed in.

        Unsafe transitions are a tiny fraction of on-policy data; without
        the quota the cost head and the -c* critic anchors are starved.
        The quota is capped by the pool size (no within-batch repetition)
        so a single rare event cannot flood a batch, and falls back to
        plain uniform while no unsafe rows exist yet.
        """
        pool = self.unsafe_indices()
        k = min(int(round(n * unsafe_frac)), len(pool), n)
        if k == 0:
            return self.sample(n)
        idx = np.concatenate([
            self.rng.integers(0, self.size, size=n - k),
            self.rng.choice(pool, size=k, replace=False),
        ])
        return self.rows(idx)

    def clear(self) -> None:
        self.size = 0
        self.cursor = 0


# -- metrics -----------------------------------------------------------------------------


@dataclass
class EpisodeRecord:
    success: bool
    collision: bool
    violation: bool
    steps: int
    mean_speed: float
    mean_abs_acc: float


def driving_score(sr: float, mean_speed: float, v_max: float, eta: float = ETA_DS) -> float:
    """Weighted blend of success rate and normalized speed."""
    if v_max <= 0.0:
        raise ValueError("v_max must be positive")
    ratio = min(max(mean_speed / v_max, 0.0), 1.0)
    return eta * sr + (1.0 - eta) * ratio


class MetricsAccumulator:
    """Per-episode outcomes plus trailing-window rates and cumulative TNC."""

    def __init__(self, window: int = WINDOW):
        self.window = window
        self.records: list[EpisodeRecord] = []

    def add(self, rec: EpisodeRecord) -> None:
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def window_stats(self, i: int):
        lo = max(0, i + 1 - self.window)
        chunk = self.records[lo:i + 1]
        n = len(chunk)
        sr = sum(r.success for r in chunk) / n
        cr = sum(r.collision for r in chunk) / n
        vr = sum(r.violation for r in chunk) / n
        speed = sum(r.mean_speed for r in chunk) / n
        return sr, cr, vr, speed

    def rows(self, v_max: float):
        tnc = 0
        for i, rec in enumerate(self.records):
            tnc += int(rec.collision)
            sr, cr, vr, speed = self.window_stats(i)
            yield (i + 1, sr, cr, vr, tnc, speed, driving_score(sr, speed, v_max))

    def tail_stats(self, n: int):
        """Aggregate flags over the last n episodes."""
        chunk = self.records[-n:] if n else []
        if not chunk:
            return {"sr": 0.0, "cr": 0.0, "vr": 0.0, "mean_speed": 0.0}
        m = len(chunk)
        return {
            "sr": sum(r.success for r in chunk) / m,
            "cr": sum(r.collision for r in chunk) / m,
            "vr": sum(r.violation for r in chunk) / m,
            "mean_speed": sum(r.mean_speed for r in chunk) / m,
        }

    def overall(self):
        if not self.records:
            return {"sr": 0.0, "cr": 0.0, "vr": 0.0, "tnc": 0,
                    "mean_speed": 0.0, "mean_abs_acc": 0.0}
        n = len(self.records)
        return {
            "sr": sum(r.success for r in self.records) / n,
            "cr": sum(r.collision for r in self.records) / n,
            "vr": sum(r.violation for r in self.records) / n,
            "tnc": sum(int(r.collision) for r in self.records),
            "mean_speed": sum(r.mean_speed for r in self.records) / n,
            "mean_abs_acc": sum(r.mean_abs_acc for r in self.records) / n,
        }


def export_metrics(acc: MetricsAccumulator, path: str, v_max: float) -> None:
    """metrics.csv: one row per episode, full-precision floats."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for row in acc.rows(v_max):
            writer.writerow([row[0]] + [repr(float(x)) for x in row[1:4]]
                            + [row[4]] + [repr(float(x)) for x in row[5:]])


# -- rule-based controller ------------------------------------------------------------------


def idm_policy_action(obs_raw: np.ndarray, env_cfg) -> np.ndarray:
    """Car-follow the front slot; brake for amber/red lights; never change lane."""
    d_front, _, v_front = obs_raw[0], obs_raw[1], obs_raw[2]
    v_ego = obs_raw[24]
    gap = None
    v_lead = None
    if d_front < SENSE_RADIUS - 1e-9:
        gap = max(d_front - env_cfg.vehicle_length, 0.1)
        v_lead = v_front
    a = idm_accel(v_ego, gap, v_lead, IDMParams(v0=env_cfg.v_max))
    if env_cfg.lights:
        idx = 26 + (1 if env_cfg.has_goal_term else 0)
        d_tl, z_tl = obs_raw[idx], obs_raw[idx + 1]
        if z_tl >= 1.0 and 0.5 < d_tl < 60.0:
            a_stop = -(v_ego * v_ego) / (2.0 * max(d_tl - 2.0, 0.5))
            if a_stop >= -6.0:  # stoppable; otherwise roll through
                a = min(a, a_stop)
    a = min(max(a, env_cfg.acc_range[0]), env_cfg.acc_range[1])
    if env_cfg.lane_action:
        return np.array([a, 0.0])
    return np.array([a])


# -- update-order instrumentation ---------------------------------------------------------------


class PhaseTrace:
    """Collects update-phase marks; the trainer asserts the fixed order."""

    def __init__(self):
        self.phases: list[str] = []

    def mark(self, phase: str) -> None:
        self.phases.append(phase)

    def verify(self, wm_marks: int, cycle: tuple, cycles: int, trailing: tuple = ()) -> None:
        want = ["world_model"] * wm_marks + list(cycle) * cycles + list(trailing)
        if self.phases != want:
            raise RuntimeError(
                f"update phases out of order: got {self.phases[:10]}..., "
                f"want {want[:10]}...")
        self.phases = []


def reward_bounds(env_cfg, action_repeat: int = 1) -> tuple:
    """Per-decision reward range used to size the unsafe penalty.

    The terminal goal bonus is excluded (it never recurs in a discounted
    tail); the lower bound includes the worst step cost and, where
    present, the navigation shaping floor. When decisions are held for
    several simulator steps the per-step range scales accordingly.
    """
    r_hi = env_cfg.v_max * 1.1 / env_cfg.omega1
    r_lo = -2.0 - (math.log(2.0) if env_cfg.has_goal_term else 0.0)
    k = max(1, int(action_repeat))
    return r_hi * k, r_lo * k


# -- trainer ---------------------------------------------------------------------------------------


class Trainer:
    """Builds all learners for a config and owns one seeded run."""

    def __init__(self, cfg: RunConfig, env: TrafficEnv | None = None):
        self.cfg = cfg
        hp = cfg.hp
        self.rng = np.random.Generator(np.random.PCG64(cfg.seed))
        self.env = env if env is not None else TrafficEnv(make_scenario(cfg.scenario, cfg.flow))
        self.codec = ObsCodec(self.env.cfg, self.env.goal_s)
        lo, hi = self.env.cfg.acc_range
        self.space = ActionSpace(lo, hi, lane=self.env.cfg.lane_action)
        obs_dim = self.env.obs_dim

        self.learnable = cfg.algo != "idm"
        self.actor = None
        self.critics = None
        self.model = None
        self.barrier = None
        self.dual = None
        self.horizon_policy = None
        if self.learnable:
            self.actor = Actor(obs_dim, self.space, hp.hidden_actor, hp.l_a, self.rng)
            self.critics = CriticPair(obs_dim, self.space.enc_dim, hp.hidden_critic,
                                      hp.l_c, self.rng)
        if cfg.algo == "gtr2l":
            k = 0 if "gr" in cfg.ablate else hp.k_levels
            self.model = EnsembleWorldModel(obs_dim, self.space.enc_dim, self.codec.layout,
                                            hp.n_members, k, hp.hidden_wm, hp.l_w,
                                            hp.u1, hp.beta, self.rng)
            if "rc" not in cfg.ablate:
                self.barrier = BarrierPolicy(obs_dim, self.codec.layout, hp.hidden_barrier,
                                             hp.u3, hp.l_b, self.rng)
            self.horizon_policy = HorizonPolicy(hp.u2, hp.m_base, hp.m_min, hp.m_max)
        if cfg.algo in ("gtr2l", "sac_lag"):
            self.dual = DualVariable(0.0, hp.l_d, hp.f0)

        r_hi, r_lo = reward_bounds(self.env.cfg, hp.action_repeat)
        self.penalty = PenaltySpec(r_hi, r_lo, hp.gamma, hp.penalty_h, 0.0)
        self.penalty.validate_dominates()

        if self.learnable:
            self.buf_real = ReplayBuffer(hp.buffer_real, obs_dim, self.space.enc_dim, self.rng)
            self.buf_virtual = ReplayBuffer(hp.buffer_virtual, obs_dim, self.space.enc_dim,
                                            self.rng)
        self.metrics = MetricsAccumulator()
        self.trace = PhaseTrace()
        self.horizon_log: list[tuple] = []
        self._build_expected_cycle()

    def _build_expected_cycle(self) -> None:
        cycle = []
        if self.model is not None:
            cycle.append("rollout")
        cycle += ["critic", "actor"]
        if self.barrier is not None:
            cycle.append("barrier")
        if self.cfg.algo == "gtr2l":
            cycle.append("dual")
        cycle.append("polyak")
        self._cycle = tuple(cycle)

    # -- policies -----------------------------------------------------------------

    def _train_action(self, s_scaled, obs_raw, episode: int):
        if self.cfg.algo == "idm":
            return idm_policy_action(obs_raw, self.env.cfg), None
        if episode < self.cfg.hp.warmup_episodes:
            mode = self.cfg.hp.warmup_policy
            env_a = None
            if mode == "idm" or (mode == "mixed" and episode % 2 == 0):
                env_a = idm_policy_action(obs_raw, self.env.cfg)
            if env_a is not None:
                # scripted seeding: realistic approach speeds put early
                # collision/clear contrast where the learned policy will live
                lo, hi = self.space.acc_lo, self.space.acc_hi
                acc = float(np.clip(2.0 * (env_a[0] - lo) / (hi - lo) - 1.0, -1.0, 1.0))
                lane = 1 if self.space.lane else None  # keep-lane index
            else:
                acc = float(self.rng.uniform(-1.0, 1.0))
                lane = int(self.rng.integers(3)) if self.space.lane else None
            enc = self.space.encode([acc], [lane] if lane is not None else None)[0]
            return self.space.env_action(acc, lane), enc
        return self.actor.act(s_scaled, rng=self.rng)

    def _eval_action(self, s_scaled, obs_raw):
        if self.cfg.algo == "idm":
            return idm_policy_action(obs_raw, self.env.cfg), None, False
        if self.model is not None:
            env_a, enc, shielded = safety_shield(
                self.actor, lambda ss, ee: self.model.risk(ss, ee), s_scaled,
                f0=self.cfg.hp.f0, k_retry=self.cfg.hp.k_retry, rng=self.rng)
            return env_a, enc, shielded
        env_a, enc = self.actor.act(s_scaled, deterministic=True)
        return env_a, enc, False

    # -- episode loop --------------------------------------------------------------------

    def run_episode(self, episode: int, train_mode: bool = True) -> EpisodeRecord:
        env = self.env
        obs_raw = env.reset(int(self.rng.integers(1 << 31)))
        s = self.codec.encode(obs_raw)
        speeds, accs = [], []
        violated = False
        out = None
        hold = max(1, int(self.cfg.hp.action_repeat))
        while True:
            if train_mode:
                env_a, enc = self._train_action(s, obs_raw, episode)
            else:
                env_a, enc, _ = self._eval_action(s, obs_raw)
            # one decision held for `hold` simulator steps; reward/cost accumulate
            r_sum, c_sum = 0.0, 0
            for _ in range(hold):
                out = env.step(env_a)
                r_sum += out.reward
                c_sum += out.cost
                speeds.append(out.speed)
                accs.append(abs(float(env_a[0])))
                violated = violated or out.violation
                if out.done:
                    break
            s2 = self.codec.encode(out.obs)
            if train_mode and self.learnable:
                self.buf_real.add(s, enc, r_sum, c_sum, s2, out.goal)
            if out.done:
                break
            s = s2
            obs_raw = out.obs
        return EpisodeRecord(
            success=out.goal, collision=out.collision, violation=violated,
            steps=env.t_step, mean_speed=float(np.mean(speeds)),
            mean_abs_acc=float(np.mean(accs)))

    # -- update phases -----------------------------------------------------------------------

    def _guard(self, phase: str, value, batch=None) -> None:
        arr = np.asarray(value, dtype=np.float64)
        if np.all(np.isfinite(arr)):
            return
        os.makedirs(self.cfg.out_dir, exist_ok=True)
        dump_path = os.path.join(self.cfg.out_dir, "diagnostics.json")
        payload = {"phase": phase, "value": np.ravel(arr).tolist()}
        if batch is not None:
            payload["batch"] = {k: np.asarray(v, dtype=np.float64).tolist()
                                for k, v in batch.items()}
        with open(dump_path, "w") as fh:
            json.dump(payload, fh, indent=1)
        raise RuntimeError(f"non-finite {phase} loss; diagnostics at {dump_path}")

    def _policy_batch(self, s_batch):
        return self.actor.act_batch(s_batch, self.rng)

    def update_after_episode(self, episode: int) -> None:
        hp = self.cfg.hp
        if not self.learnable:
            return
        if episode < hp.warmup_episodes:
            return
        if len(self.buf_real) < max(hp.wm_batch, hp.rl_batch):
            return

        wm_marks = 0
        if self.model is not None:
            for _ in range(hp.wm_steps):
                batches = []
                for _ in range(self.model.n):
                    s, a, r, c, s2, goal = self.buf_real.sample_mixed(
                        hp.wm_batch, hp.unsafe_frac_wm)
                    batches.append((s, a, s2, c))
                losses = self.model.train_members(batches)
                self.trace.mark("world_model")
                wm_marks += 1
                self._guard("world_model", losses,
                            {"s": batches[0][0][:4], "a": batches[0][1][:4]})
            self.buf_virtual.clear()

        for _ in range(hp.agent_steps):
            lam = self.dual.lam if self.dual is not None else 0.0
            lam_model = lam if self.model is not None else 0.0

            if self.model is not None:
                self.trace.mark("rollout")
                s0 = self.buf_real.sample(hp.rollout_starts)[0]
                est = self.model.uncertainty(s0, self._policy_batch(s0),
                                             update_normalizer=True)
                sigma_bar = float(np.mean(est.sigma_hat))
                self._guard("rollout", sigma_bar, {"s0": s0[:4]})
                if "ah" in self.cfg.ablate:
                    m_star = int(hp.m_base)
                else:
                    m_star = self.horizon_policy.horizon(sigma_bar)
                self.horizon_log.append((episode, sigma_bar, m_star))
                transitions, _ = self.model.rollout(
                    s0, self._policy_batch, self.barrier, m_star, self.rng)
                for (vs, va, vc, vs2) in transitions:
                    self.buf_virtual.add_batch(vs, va, np.zeros(len(vs)), vc, vs2,
                                               np.zeros(len(vs), dtype=bool))

            self.trace.mark("critic")
            frac_rl = hp.unsafe_frac_rl
            if hp.unsafe_anneal_ep > 0:
                frac_rl *= max(0.0, 1.0 - episode / hp.unsafe_anneal_ep)
            s, a, r, c, s2, goal = self.buf_real.sample_mixed(
                hp.rl_batch, frac_rl)
            self.penalty.lam = lam
            c_star = self.penalty.c_star()
            risk_fn = ((lambda ss, ee: self.model.risk(ss, ee))
                       if self.model is not None else (lambda ss, ee: np.zeros(len(ee))))
            y = critic_target(r, c, s2, goal, self.actor, self.critics, risk_fn,
                              lam_model, hp.gamma, c_star, self.rng)
            loss_c = update_critics(self.critics, s, a, y)
            self._guard("critic", loss_c, {"s": s[:4], "a": a[:4], "y": y[:8]})

            self.trace.mark("actor")
            half = hp.rl_batch // 2
            if len(getattr(self, "buf_virtual", ())) >= half and self.model is not None:
                s_act = np.concatenate([self.buf_real.sample(hp.rl_batch - half)[0],
                                        self.buf_virtual.sample(half)[0]])
            else:
                s_act = s
            alpha = hp.entropy_alpha if self.cfg.algo in ("sac", "sac_lag") else 0.0
            risk_grads = ((lambda ss, ee: self.model.risk_input_grads(ss, ee)[0:3:2])
                          if self.model is not None else None)
            j = update_actor(self.actor, self.critics, s_act, lam_model,
                             risk_grad_fn=risk_grads, entropy_alpha=alpha, rng=self.rng)
            self._guard("actor", j, {"s": s_act[:4]})

            if self.barrier is not None:
                self.trace.mark("barrier")
                if len(self.buf_virtual):
                    s_pred = self.buf_virtual.sample(min(hp.rl_batch, len(self.buf_virtual)))[4]
                    est_b = self.model.uncertainty(s_pred, self._policy_batch(s_pred))
                    loss_b = self.barrier.train_step(
                        s_pred, est_b.sigma_hat, self._policy_batch, self.model, self.rng)
                    self._guard("barrier", loss_b, {"s_pred": s_pred[:4]})

            if self.cfg.algo == "gtr2l":
                self.trace.mark("dual")
                # constraint is measured over the union of real and virtual data
                s_dual = s
                if len(self.buf_virtual):
                    k = min(hp.rl_batch, len(self.buf_virtual))
                    s_dual = np.concatenate([s, self.buf_virtual.sample(k)[0]])
                f_now = self.model.risk(s_dual, self._policy_batch(s_dual))
                self._guard("dual", f_now)
                self.dual.update(f_now)

            self.trace.mark("polyak")
            self.critics.polyak(hp.tau)

        self.trace.verify(wm_marks, self._cycle, hp.agent_steps)

    def after_episode_dual(self, rec: EpisodeRecord, ep_cost: float) -> None:
        """sac_lag: dual ascent on realized episode cost versus the threshold."""
        if self.cfg.algo == "sac_lag":
            self.dual.update([float(ep_cost)])

    # -- persistence --------------------------------------------------------------------------------

    def networks(self) -> dict:
        nets = {}
        if self.actor is not None:
            nets.update(self.actor.to_networks())
            nets.update(self.critics.to_networks())
        if self.model is not None:
            nets.update(self.model.to_networks())
        if self.barrier is not None:
            nets.update(self.barrier.to_networks())
        return nets

    def load_networks(self, nets: dict) -> None:
        if self.actor is not None:
            self.actor.load_networks(nets)
            self.critics.load_networks(nets)
        if self.model is not None:
            self.model.load_networks(nets)
        if self.barrier is not None:
            self.barrier.load_networks(nets)

    def checkpoint_doc(self) -> dict:
        cfg = self.cfg
        scalars = {
            "dual/lambda": self.dual.lam if self.dual is not None else 0.0,
            "penalty/r_hi": self.penalty.r_hi,
            "penalty/r_lo": self.penalty.r_lo,
        }
        if self.model is not None:
            scalars["normalizer/value"] = self.model.normalizer.value
        conf = asdict(cfg)
        conf["ablate"] = list(cfg.ablate)
        conf["hp"] = {k: (list(v) if isinstance(v, tuple) else v)
                      for k, v in asdict(cfg.hp).items()}
        return checkpoint_document(self.networks(), scalars, extra={"config": conf},
                                   rng_seed=cfg.seed,
                                   created=time.strftime("%Y-%m-%dT%H:%M:%S"))


# -- train / evaluate entry points ------------------------------------------------------------------


def train(cfg: RunConfig, env: TrafficEnv | None = None) -> dict:
    """Full training run; writes metrics.csv, horizon_log.csv, summary.json,
    checkpoint.json into cfg.out_dir and returns paths plus the checkpoint hash."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    trainer = Trainer(cfg, env=env)
    total_cost_log = []
    for ep in range(cfg.episodes):
        rec = trainer.run_episode(ep, train_mode=True)
        trainer.metrics.add(rec)
        ep_cost = float(rec.collision) + float(rec.violation)
        trainer.update_after_episode(ep)
        trainer.after_episode_dual(rec, ep_cost)
        total_cost_log.append(ep_cost)

    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
    export_metrics(trainer.metrics, metrics_path, trainer.env.cfg.v_max)

    horizon_path = os.path.join(cfg.out_dir, "horizon_log.csv")
    with open(horizon_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("episode", "sigma_hat", "m_star"))
        for ep_i, sig, m in trainer.horizon_log:
            writer.writerow((ep_i, repr(float(sig)), m))

    doc = trainer.checkpoint_doc()
    ckpt_path = os.path.join(cfg.out_dir, "checkpoint.json")
    save_checkpoint(ckpt_path, doc)

    summary = _summarize(trainer, kind="train")
    summary_path = os.path.join(cfg.out_dir, "summary.json")
    with open(summary_path, "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)

    return {"metrics": metrics_path, "checkpoint": ckpt_path, "summary": summary_path,
            "horizon_log": horizon_path, "hash": checkpoint_hash(doc),
            "trainer": trainer}


def _summarize(trainer: Trainer, kind: str) -> dict:
    acc = trainer.metrics
    overall = acc.overall()
    if len(acc):
        last = list(acc.rows(trainer.env.cfg.v_max))[-1]
        ds = last[6]
        final50 = acc.tail_stats(min(50, len(acc)))
    else:
        ds = None
        final50 = acc.tail_stats(0)
    return {
        "kind": kind,
        "algo": trainer.cfg.algo,
        "scenario": trainer.cfg.scenario,
        "flow": trainer.cfg.flow,
        "seed": trainer.cfg.seed,
        "episodes": len(acc),
        "ablate": list(trainer.cfg.ablate),
        "v_max": trainer.env.cfg.v_max,
        "ds": ds,
        "final_window": final50,
        "lambda": trainer.dual.lam if trainer.dual is not None else 0.0,
        **overall,
    }


def evaluate(checkpoint_path: str, episodes: int, out_dir: str,
             env: TrafficEnv | None = None) -> dict:
    """Deterministic rollouts from a checkpoint (shielded for the full
    algorithm); writes metrics.csv + summary.json under out_dir."""
    doc = load_checkpoint(checkpoint_path)
    conf = doc["extra"]["config"]
    hp_kwargs = {k: (tuple(v) if isinstance(v, list) else v)
                 for k, v in conf["hp"].items()}
    cfg = RunConfig(scenario=conf["scenario"], flow=conf["flow"], algo=conf["algo"],
                    seed=conf["seed"], episodes=episodes,
                    ablate=tuple(conf.get("ablate", ())), out_dir=out_dir,
                    hp=Hyperparams(**hp_kwargs))
    trainer = Trainer(cfg, env=env)

    nets = networks_from_document(doc)
    if trainer.actor is not None:
        got = nets["actor/theta"].layer_dims[0]
        if got != trainer.env.obs_dim:
            raise ValueError(
                f"checkpoint expects {got}-dim observations, scenario provides "
                f"{trainer.env.obs_dim}")
        trainer.load_networks(nets)
    scalars = scalars_from_document(doc)
    if trainer.dual is not None:
        trainer.dual.lam = scalars.get("dual/lambda", 0.0)
    if trainer.model is not None:
        trainer.model.normalizer.value = scalars.get("normalizer/value",
                                                     trainer.model.normalizer.value)

    trainer.rng = np.random.Generator(np.random.PCG64(cfg.seed + 100_003))
    os.makedirs(out_dir, exist_ok=True)
    for ep in range(episodes):
        rec = trainer.run_episode(ep, train_mode=False)
        trainer.metrics.add(rec)

    metrics_path = os.path.join(out_dir, "metrics.csv")
    export_metrics(trainer.metrics, metrics_path, trainer.env.cfg.v_max)
    summary = _summarize(trainer, kind="eval")
    summary_path = os.path.join(out_dir, "summary.json")
    with open(summary_path, "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    return {"metrics": metrics_path, "summary": summary_path, **summary}


# -- config file plumbing -----------------------------------------------------------------------------


_RUN_KEYS = ("scenario", "flow", "algo", "seed", "episodes", "out", "ablate")


def build_run_config(file_values: dict | None = None, **cli_values) -> RunConfig:
    """Merge config-file values with CLI overrides (CLI wins)."""
    file_values = dict(file_values or {})
    merged = {}
    for key in _RUN_KEYS:
        if key in file_values:
            merged[key] = file_values.pop(key)
        if cli_values.get(key) is not None:
            merged[key] = cli_values[key]
    hp_fields = {f: None for f in Hyperparams.__dataclass_fields__}
    hp_kwargs = {}
    for key, value in file_values.items():
        if key not in hp_fields:
            raise ValueError(f"unknown config key {key!r}")
        if key.startswith("hidden_"):
            value = tuple(value) if isinstance(value, (list, tuple)) else (value,)
            value = tuple(int(v) for v in value)
        hp_kwargs[key] = value
    ablate = merged.get("ablate", ())
    if isinstance(ablate, str):
        ablate = tuple(p.strip() for p in ablate.split(",") if p.strip())
    elif isinstance(ablate, (list, tuple)):
        ablate = tuple(str(p) for p in ablate)
    scenario = int(merged.get("scenario", 1))
    episodes = merged.get("episodes")
    if episodes is None:
        episodes = DEFAULT_EPISODES[scenario] if scenario in DEFAULT_EPISODES else 300
    return RunConfig(
        scenario=scenario,
        flow=int(merged.get("flow", 1)),
        algo=str(merged.get("algo", "gtr2l")),
        seed=int(merged.get("seed", 0)),
        episodes=int(episodes),
        ablate=ablate,
        out_dir=str(merged.get("out", "runs/out")),
        hp=Hyperparams(**hp_kwargs),
    )


def load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    return load_kv_config(path)


# -- selftest ----------------------------------------------------------------------------------------


def _selftest_checks():
    rng = np.random.default_rng(0)

    def penalty_ok():
        for _ in range(1000):
            r_hi = rng.uniform(0.5, 3)
            r_lo = r_hi - rng.uniform(0.5, 4)
            gamma = rng.uniform(0.9, 0.999)
            h = int(rng.integers(1, 10))
            lam = rng.uniform(0, 5)
            spec = PenaltySpec(r_hi, r_lo, gamma, h, lam)
            want = (r_hi - r_lo) / (gamma ** h * (1 - gamma)) + lam / gamma ** h \
                - r_hi / (1 - gamma)
            if abs(spec.c_star() - want) > 1e-9:
                return False
        return True

    def ds_ok():
        for _ in range(1000):
            sr = rng.uniform(0, 1)
            v = rng.uniform(0, 15)
            vm = rng.uniform(5, 20)
            want = 0.8 * sr + 0.2 * min(v / vm, 1.0)
            if abs(driving_score(sr, v, vm) - want) > 1e-9:
                return False
        return True

    def dual_ok():
        for _ in range(1000):
            lam = rng.uniform(0, 2)
            f = rng.uniform(0, 1, size=8)
            dual = DualVariable(lam, 1e-3, 0.5)
            want = max(0.0, lam - 1e-3 * float(np.mean(0.5 - f)))
            if abs(dual.update(f) - want) > 1e-12:
                return False
        return True

    def determinism_ok():
        import tempfile
        with tempfile.TemporaryDirectory() as tmp:
            hp = Hyperparams(warmup_episodes=1, wm_steps=2, agent_steps=2,
                             n_members=2, k_levels=1, hidden_wm=(16,),
                             hidden_actor=(16,), hidden_critic=(16,),
                             hidden_barrier=(8,), wm_batch=32, rl_batch=16)
            out = []
            for _ in range(2):
                cfg = RunConfig(scenario=1, flow=1, algo="gtr2l", seed=7, episodes=3,
                                out_dir=os.path.join(tmp, "run"), hp=hp)
                res = train(cfg)
                with open(res["metrics"], "rb") as fh:
                    out.append((fh.read(), res["hash"]))
            return out[0] == out[1]

    return (("penalty_coefficient oracle", penalty_ok),
            ("driving_score oracle", ds_ok),
            ("dual step oracle", dual_ok),
            ("determinism micro-run", determinism_ok))


def selftest() -> int:
    failures = 0
    for name, check in _selftest_checks():
        try:
            ok = check()
        except Exception as exc:  # pragma: no cover - defensive
            ok = False
            print(f"FAIL {name}: {exc}")
            failures += 1
            continue
        print(("ok   " if ok else "FAIL ") + name)
        failures += 0 if ok else 1
    return 1 if failures else 0
