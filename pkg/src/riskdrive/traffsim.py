"""Deterministic 2D kinematic traffic simulator.

Desk-scale driving scenarios on polyline road networks: an ego vehicle
controlled externally (longitudinal acceleration, optionally a discrete
lane change) plus IDM-controlled background traffic, traffic lights,
conflict-zone yielding, rectangle collision detection, and a fixed
observation/reward/cost construction.

Scenarios
---------
1  unprotected left turn across oncoming traffic (acc only)
2  unprotected straight crossing with oncoming left-turners (acc only)
3  two-lane road through two signalized intersections (acc + lane)
4  composite route: crossing, roundabout, crossing, signalized right
   turn, on-ramp, highway cruise (acc + lane)
6  three-lane highway with a per-episode emergency event: either the
   lead vehicle slams to a stop or a neighbor cuts in (acc + lane)

All randomness flows from the seed given to ``reset``; identical
(config, seed, action sequence) produces bit-identical trajectories.
Distances are meters, speeds m/s, headings radians.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SENSE_RADIUS = 200.0
HALF_LANE = 1.75  # lateral threshold separating same-corridor from side sectors


# -- intelligent driver model -------------------------------------------------


@dataclass
class IDMParams:
    v0: float = 15.0
    T: float = 1.5
    s0: float = 2.0
    a_max: float = 1.5
    b_comf: float = 2.0
    delta: float = 4.0
    b_max: float = 6.0


def idm_accel(v: float, gap: float | None, v_lead: float | None, p: IDMParams) -> float:
    """IDM acceleration for a follower at speed v.

    gap is the bumper-to-bumper distance to the leader (None = free road);
    a non-positive gap returns full emergency braking.
    """
    free = p.a_max * (1.0 - (v / p.v0) ** p.delta)
    if gap is None or v_lead is None:
        return free
    if gap <= 0.0:
        return -p.b_max
    dv = v - v_lead
    s_star = p.s0 + v * p.T + v * dv / (2.0 * math.sqrt(p.a_max * p.b_comf))
    return p.a_max * (1.0 - (v / p.v0) ** p.delta - (s_star / gap) ** 2)


# -- rectangle collision (separating axis) ------------------------------------


def rect_corners(cx: float, cy: float, heading: float, length: float, width: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    hl, hw = 0.5 * length, 0.5 * width
    local = np.array([[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def rects_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """Overlap test for two convex quads given as (4,2) corner arrays."""
    for quad in (a, b):
        for i in range(4):
            edge = quad[(i + 1) % 4] - quad[i]
            axis = np.array([-edge[1], edge[0]])
            pa = a @ axis
            pb = b @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


# -- road geometry -------------------------------------------------------------


def arc_points(cx: float, cy: float, r: float, a0: float, a1: float, n: int = 14) -> list:
    return [(cx + r * math.cos(a), cy + r * math.sin(a)) for a in np.linspace(a0, a1, n)]


class Route:
    """Polyline centerline with arc-length lookup and parallel lanes.

    Lane 0 rides the polyline; lane i is offset i*lane_width to the left
    of the direction of travel.
    """

    def __init__(self, pts, n_lanes: int = 1, priority: int = 0, spawn_prob: float = 0.0,
                 bg_v0: float = 10.0, lane_width: float = 3.5, spawn_lanes=None,
                 light_group: str | None = None, spawn_s: float = 0.0):
        pts = np.asarray(pts, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 2:
            raise ValueError("route needs at least two points")
        seg = np.diff(pts, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        keep = seg_len > 1e-9
        self.pts = np.vstack([pts[0], pts[1:][keep]])
        seg = np.diff(self.pts, axis=0)
        self.seg = seg
        self.seg_len = np.hypot(seg[:, 0], seg[:, 1])
        self.cum = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.length = float(self.cum[-1])
        self.n_lanes = n_lanes
        self.priority = priority
        self.spawn_prob = spawn_prob
        self.bg_v0 = bg_v0
        self.lane_width = lane_width
        self.spawn_lanes = list(spawn_lanes) if spawn_lanes is not None else list(range(n_lanes))
        self.light_group = light_group
        self.spawn_s = spawn_s

    def pose(self, s: float, lane: int = 0):
        s = min(max(s, 0.0), self.length)
        i = int(np.searchsorted(self.cum[1:], s, side="left"))
        i = min(i, len(self.seg) - 1)
        t = (s - self.cum[i]) / self.seg_len[i]
        d = self.seg[i] / self.seg_len[i]
        x, y = self.pts[i] + t * self.seg[i]
        off = lane * self.lane_width
        return x - off * d[1], y + off * d[0], math.atan2(d[1], d[0])


@dataclass
class ConflictZone:
    xmin: float
    xmax: float
    ymin: float
    ymax: float

    def contains(self, x: float, y: float) -> bool:
        return self.xmin <= x <= self.xmax and self.ymin <= y <= self.ymax


def zone_interval(route: Route, lane: int, zone: ConflictZone):
    """Arc-length span [s_in, s_out] where the lane passes through the zone."""
    n = max(int(route.length * 4), 8)
    s_in = s_out = None
    for s in np.linspace(0.0, route.length, n):
        x, y, _ = route.pose(s, lane)
        if zone.contains(x, y):
            if s_in is None:
                s_in = s
            s_out = s
    if s_in is None:
        return None
    return (float(s_in), float(s_out))


@dataclass
class Light:
    """Two-group signal: group 'a' (ego direction) alternates with group 'b'."""

    s_line_ego: float              # stop line arc length on the ego route
    offset: float = 0.0
    green_a: float = 20.0
    yellow_a: float = 3.0
    green_b: float = 15.0
    yellow_b: float = 3.0

    @property
    def period(self) -> float:
        return self.green_a + self.yellow_a + self.green_b + self.yellow_b

    def phase(self, t: float, group: str) -> int:
        """0 = green, 1 = yellow, 2 = red for the given group at time t."""
        p = (t + self.offset) % self.period
        if group == "a":
            if p < self.green_a:
                return 0
            if p < self.green_a + self.yellow_a:
                return 1
            return 2
        base = self.green_a + self.yellow_a
        if p < base:
            return 2
        if p < base + self.green_b:
            return 0
        return 1


# -- scenario configuration ----------------------------------------------------


@dataclass
class ScenarioConfig:
    scenario: int
    flow: int
    routes: list
    zones: list = field(default_factory=list)
    lights: list = field(default_factory=list)
    # cross-route stop lines: (route_idx, s_line, light_idx)
    cross_lines: list = field(default_factory=list)
    dt: float = 0.1
    v_max: float = 12.0
    omega1: float = 10.0
    has_goal_term: bool = False
    lane_action: bool = False
    step_limit: int = 300
    acc_range: tuple = (-6.0, 3.0)
    ego_start_s: float = 0.0
    ego_start_v: float = 6.0
    ego_start_lane: int = 0
    goal_s: float | None = None
    event_prob: float = 0.0
    max_vehicles: int = 16
    vehicle_length: float = 4.5
    vehicle_width: float = 2.0
    ego_priority: int = 1
    seed_initial_traffic: bool = True
    spawning: bool = True

    @property
    def obs_dim(self) -> int:
        return 26 + (1 if self.has_goal_term else 0) + (2 if self.lights else 0)

    @property
    def action_dim(self) -> int:
        return 2 if self.lane_action else 1


def _intersection_routes(flow_prob: float):
    """Shared four-way geometry for scenarios 1 and 2 (roads on x=+-1.75, y=+-1.75)."""
    oncoming = Route([(-1.75, 60.0), (-1.75, -60.0)], priority=2, spawn_prob=flow_prob, bg_v0=10.0)
    return oncoming


def make_scenario(scenario: int, flow: int = 1) -> ScenarioConfig:
    """Build the ScenarioConfig for one of the supported scenario ids."""
    if flow not in (1, 2):
        raise ValueError("flow must be 1 or 2")
    prob = 0.5 if flow == 1 else 0.8
    if scenario == 1:
        # unprotected left turn: approach north on x=1.75, exit west on y=1.75
        ego_pts = [(1.75, -60.0), (1.75, -10.0)]
        ego_pts += arc_points(-10.0, -10.0, 11.75, 0.0, math.pi / 2)
        ego_pts += [(-10.0, 1.75), (-60.0, 1.75)]
        ego = Route(ego_pts, priority=1)
        oncoming = _intersection_routes(prob)
        lateral = Route([(-60.0, -1.75), (60.0, -1.75)], priority=0, spawn_prob=prob, bg_v0=9.0)
        zone = ConflictZone(-9.0, 9.0, -9.0, 9.0)
        return ScenarioConfig(1, flow, routes=[ego, oncoming, lateral], zones=[zone],
                              v_max=12.0, omega1=10.0, step_limit=300, ego_start_v=6.0,
                              ego_priority=1)
    if scenario == 2:
        # straight crossing: oncoming traffic turns left across the ego path
        ego = Route([(1.75, -60.0), (1.75, 60.0)], priority=2)
        turn_pts = [(-1.75, 60.0), (-1.75, 10.0)]
        turn_pts += arc_points(10.0, 10.0, 11.75, math.pi, 1.5 * math.pi)
        turn_pts += [(10.0, -1.75), (60.0, -1.75)]
        turner = Route(turn_pts, priority=1, spawn_prob=prob, bg_v0=9.0)
        lateral = Route([(60.0, 1.75), (-60.0, 1.75)], priority=0, spawn_prob=prob, bg_v0=9.0)
        zone = ConflictZone(-9.0, 9.0, -9.0, 9.0)
        return ScenarioConfig(2, flow, routes=[ego, turner, lateral], zones=[zone],
                              v_max=12.0, omega1=10.0, step_limit=300, ego_start_v=6.0,
                              ego_priority=2)
    if scenario == 3:
        # two-lane arterial with two signalized intersections and cross flows
        ego = Route([(0.0, 0.0), (260.0, 0.0)], n_lanes=2, priority=2,
                    spawn_prob=prob * 0.5, bg_v0=10.0)
        cross1 = Route([(105.0, -45.0), (105.0, 45.0)], priority=1, spawn_prob=prob,
                       bg_v0=8.0, light_group="b")
        cross2 = Route([(225.0, 45.0), (225.0, -45.0)], priority=1, spawn_prob=prob,
                       bg_v0=8.0, light_group="b")
        lights = [Light(s_line_ego=100.0, offset=0.0), Light(s_line_ego=220.0, offset=12.0)]
        zones = [ConflictZone(100.0, 111.0, -7.0, 9.0), ConflictZone(220.0, 231.0, -7.0, 9.0)]
        cross_lines = [(1, 36.0, 0), (2, 34.0, 1)]
        return ScenarioConfig(3, flow, routes=[ego, cross1, cross2], zones=zones,
                              lights=lights, cross_lines=cross_lines, v_max=14.0, omega1=5.0,
                              has_goal_term=True, lane_action=True, step_limit=600,
                              ego_start_v=8.0, ego_priority=2)
    if scenario == 4:
        # composite: crossing, roundabout, crossing, signalized right turn,
        # ramp, two-lane highway cruise
        ego_pts = [(0.0, 0.0), (131.0, 0.0)]
        ego_pts += arc_points(150.0, 0.0, 12.0, math.pi, 2.0 * math.pi)
        ego_pts += [(168.0, 0.0), (276.0, 0.0)]
        ego_pts += arc_points(280.0, -8.0, 8.0, 0.5 * math.pi, 0.0)
        ego_pts += [(288.0, -18.0)]
        ego_pts += arc_points(300.0, -20.0, 12.0, math.pi, 1.5 * math.pi)
        ego_pts += [(320.0, -32.0), (520.0, -32.0)]
        ego = Route(ego_pts, n_lanes=2, priority=1)
        crossA = Route([(75.0, -40.0), (75.0, 40.0)], priority=2, spawn_prob=prob, bg_v0=9.0)
        ring_pts = arc_points(150.0, 0.0, 12.0, 0.5 * math.pi, 0.5 * math.pi + 2.5 * math.pi, n=40)
        ring = Route(ring_pts, priority=3, spawn_prob=0.5 if flow == 1 else 0.8, bg_v0=7.0)
        crossB = Route([(235.0, 40.0), (235.0, -40.0)], priority=0, spawn_prob=0.8 if flow == 1 else 0.5, bg_v0=9.0)
        crossC = Route([(285.0, 40.0), (285.0, -40.0)], priority=2, spawn_prob=prob,
                       bg_v0=9.0, light_group="b")
        # highway traffic shares the tail of the ego route
        highway = ego
        lights = [Light(s_line_ego=272.0, offset=0.0)]
        zones = [ConflictZone(70.0, 80.0, -8.0, 8.0),
                 ConflictZone(230.0, 240.0, -8.0, 8.0),
                 ConflictZone(276.0, 294.0, -12.0, 10.0)]
        cross_lines = [(4, 28.0, 0)]
        cfg = ScenarioConfig(4, flow, routes=[ego, crossA, ring, crossB, crossC],
                             zones=zones, lights=lights, cross_lines=cross_lines,
                             v_max=15.0, omega1=5.0, has_goal_term=True, lane_action=True,
                             step_limit=1500, ego_start_v=8.0, ego_priority=1,
                             max_vehicles=20)
        # background cruisers spawn directly on the highway tail of route 0
        highway.spawn_prob = prob * 0.6
        highway.bg_v0 = 12.0
        highway.spawn_s = float(ego.cum[-1] - 200.0)
        highway.spawn_lanes = [0, 1]
        return cfg
    if scenario == 6:
        # three-lane highway, one emergency event per episode
        ego = Route([(0.0, 0.0), (400.0, 0.0)], n_lanes=3, priority=1,
                    spawn_prob=prob, bg_v0=13.0, spawn_lanes=[0, 1, 2])
        return ScenarioConfig(6, flow, routes=[ego], v_max=16.0, omega1=5.0,
                              has_goal_term=True, lane_action=True, step_limit=500,
                              ego_start_s=30.0, ego_start_v=12.0, event_prob=1.0,
                              max_vehicles=14, ego_priority=1)
    raise ValueError(f"unknown scenario {scenario}")


# -- vehicles -------------------------------------------------------------------


class Vehicle:
    __slots__ = ("vid", "route", "s", "lane", "v", "length", "width", "idm",
                 "x", "y", "heading", "forced_brake", "gap_t", "is_ego")

    def __init__(self, vid, route, s, lane, v, length, width, idm, is_ego=False, gap_t=3.0):
        self.vid = vid
        self.route = route
        self.s = s
        self.lane = lane
        self.v = v
        self.length = length
        self.width = width
        self.idm = idm
        self.forced_brake = False
        self.gap_t = gap_t
        self.is_ego = is_ego
        self.x = self.y = self.heading = 0.0


@dataclass
class StepOutcome:
    obs: np.ndarray
    reward: float
    cost: int
    collision: bool
    violation: bool
    goal: bool
    timeout: bool
    speed: float

    @property
    def done(self) -> bool:
        return self.collision or self.goal or self.timeout


def compute_reward(v_ego: float, omega1: float, cost: int, has_goal_term: bool,
                   goal_reached: bool, d_goal: float = 0.0, d_max: float = 1.0) -> float:
    """Speed reward plus optional navigation term, minus the step cost."""
    r = v_ego / omega1
    if has_goal_term:
        r += 100.0 if goal_reached else -math.log(1.0 + d_goal / d_max)
    return r - cost


# -- neighbor observation --------------------------------------------------------

_SECTORS = ("front", "rear", "front_left", "rear_left", "front_right", "rear_right")


def _wrap(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def neighbor_slots(ego_xy, ego_heading: float, ego_v: float, others) -> np.ndarray:
    """Six (d, phi, v, theta) slots: front, rear, front-left, rear-left,
    front-right, rear-right, nearest vehicle per sector within 200 m.

    others: iterable of (x, y, v, heading, vid). Empty slots carry the
    sentinel (200, 0, ego_v, 0). Ties break on distance then vid.
    """
    ex, ey = ego_xy
    ch, sh = math.cos(ego_heading), math.sin(ego_heading)
    best = {name: None for name in _SECTORS}
    for (x, y, v, heading, vid) in others:
        rx, ry = x - ex, y - ey
        lon = rx * ch + ry * sh
        lat = -rx * sh + ry * ch
        d = math.hypot(rx, ry)
        if d > SENSE_RADIUS:
            continue
        if abs(lat) <= HALF_LANE:
            name = "front" if lon >= 0.0 else "rear"
        elif lat > 0.0:
            name = "front_left" if lon >= 0.0 else "rear_left"
        else:
            name = "front_right" if lon >= 0.0 else "rear_right"
        key = (d, vid)
        if best[name] is None or key < best[name][0]:
            phi = math.atan2(lat, lon)
            best[name] = (key, (d, phi, v, _wrap(heading - ego_heading)))
    out = np.empty((6, 4))
    for i, name in enumerate(_SECTORS):
        if best[name] is None:
            out[i] = (SENSE_RADIUS, 0.0, ego_v, 0.0)
        else:
            out[i] = best[name][1]
    return out


# -- environment -------------------------------------------------------------------


class TrafficEnv:
    """Stepable environment over a ScenarioConfig. Call reset(seed) first."""

    def __init__(self, config: ScenarioConfig):
        self.cfg = config
        self.routes = config.routes
        self.goal_s = config.goal_s if config.goal_s is not None else self.routes[0].length - 0.5
        self._interval_cache = {}
        for zi, zone in enumerate(config.zones):
            for ri, route in enumerate(self.routes):
                for lane in range(route.n_lanes):
                    self._interval_cache[(zi, ri, lane)] = zone_interval(route, lane, zone)
        self.trace = None
        self.clamp_events = 0
        self.rng = None
        self.vehicles = []
        self.ego = None
        self.t_step = 0

    @property
    def obs_dim(self) -> int:
        return self.cfg.obs_dim

    @property
    def action_dim(self) -> int:
        return self.cfg.action_dim

    # -- lifecycle ------------------------------------------------------------

    def reset(self, seed: int) -> np.ndarray:
        cfg = self.cfg
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self.t_step = 0
        self._next_vid = 1
        self.clamp_events = 0
        self._violated_lines = set()
        self.vehicles = []
        ego_idm = IDMParams(v0=cfg.v_max)
        self.ego = Vehicle(0, 0, cfg.ego_start_s, cfg.ego_start_lane, cfg.ego_start_v,
                           cfg.vehicle_length, cfg.vehicle_width, ego_idm, is_ego=True)
        self.vehicles.append(self.ego)
        self._place(self.ego)
        self._event = None
        if cfg.event_prob > 0.0 and self.rng.random() < cfg.event_prob:
            kind = "stop" if self.rng.random() < 0.5 else "cutin"
            trigger = int(self.rng.integers(40, 160))
            self._event = {"kind": kind, "step": trigger, "done": False}
        if cfg.seed_initial_traffic:
            self._seed_traffic()
        if self.trace is not None:
            self.trace = []
        return self._observe()

    def enable_trace(self):
        self.trace = []

    # -- per-step dynamics ------------------------------------------------------

    def step(self, action) -> StepOutcome:
        cfg = self.cfg
        if self.rng is None:
            raise RuntimeError("call reset before step")
        action = np.atleast_1d(np.asarray(action, dtype=np.float64))
        acc = float(action[0])
        lo, hi = cfg.acc_range
        if acc < lo or acc > hi:
            acc = min(max(acc, lo), hi)
            self.clamp_events += 1
        lane_cmd = 0
        if cfg.lane_action and action.shape[0] > 1:
            lane_cmd = int(round(float(action[1])))
            lane_cmd = max(-1, min(1, lane_cmd))

        ego = self.ego
        ego_route = self.routes[ego.route]
        if lane_cmd != 0:
            target = ego.lane + lane_cmd
            if 0 <= target < ego_route.n_lanes:
                ego.lane = target
            else:
                self.clamp_events += 1

        t_now = self.t_step * cfg.dt
        accels = {}
        for veh in self.vehicles:
            if veh.is_ego:
                continue
            accels[veh.vid] = self._bg_accel(veh, t_now)

        s_prev_ego = ego.s
        for veh in self.vehicles:
            a = acc if veh.is_ego else accels[veh.vid]
            veh.v = min(max(veh.v + a * cfg.dt, 0.0), cfg.v_max * 1.1)
            veh.s += veh.v * cfg.dt
            self._place(veh)

        self.t_step += 1
        self._run_event()
        self._despawn()
        if cfg.spawning:
            self._spawn()

        collision = self._ego_collision()
        violation = self._red_light_violation(s_prev_ego, ego.s, t_now + cfg.dt)
        goal = (not collision) and ego.s >= self.goal_s
        timeout = (not collision) and (not goal) and self.t_step >= cfg.step_limit
        cost = int(collision) + int(violation)
        d_goal = max(self.goal_s - ego.s, 0.0)
        reward = compute_reward(ego.v, cfg.omega1, cost, cfg.has_goal_term, goal,
                                d_goal, self.goal_s)
        obs = self._observe()
        out = StepOutcome(obs, reward, cost, collision, violation, goal, timeout, ego.v)
        if self.trace is not None:
            flags = f"{int(collision)}{int(violation)}{int(goal)}{int(timeout)}"
            self.trace.append((self.t_step * cfg.dt, ego.x, ego.y, ego.v, ego.heading,
                               acc, reward, cost, flags))
        return out

    # -- background control -------------------------------------------------------

    def _leader(self, veh: Vehicle):
        best = None
        for other in self.vehicles:
            if other is veh or other.route != veh.route or other.lane != veh.lane:
                continue
            ds = other.s - veh.s
            if ds <= 0.0:
                continue
            if best is None or ds < best[0]:
                best = (ds, other)
        if best is None:
            return None, None
        ds, other = best
        gap = ds - 0.5 * (veh.length + other.length)
        return gap, other.v

    def _bg_accel(self, veh: Vehicle, t_now: float) -> float:
        if veh.forced_brake:
            return -6.0 if veh.v > 0.0 else 0.0
        gap, v_lead = self._leader(veh)
        a = idm_accel(veh.v, gap, v_lead, veh.idm)
        route = self.routes[veh.route]
        # stop for a red/yellow signal facing this route
        if route.light_group is not None:
            for ri, s_line, li in self.cfg.cross_lines:
                if ri != veh.route:
                    continue
                light = self.cfg.lights[li]
                if light.phase(t_now, route.light_group) != 0 and veh.s < s_line - 0.3:
                    a = min(a, self._stop_at(veh, s_line))
        if veh.route == 0 and self.cfg.lights:
            for light in self.cfg.lights:
                if light.phase(t_now, "a") != 0 and veh.s < light.s_line_ego - 0.3:
                    if light.s_line_ego - veh.s < 60.0:
                        a = min(a, self._stop_at(veh, light.s_line_ego))
        a = min(a, self._yield_accel(veh))
        return min(max(a, -veh.idm.b_max), veh.idm.a_max)

    def _stop_at(self, veh: Vehicle, s_stop: float) -> float:
        gap = s_stop - veh.s - 0.5 * veh.length
        return idm_accel(veh.v, gap, 0.0, veh.idm)

    def _yield_accel(self, veh: Vehicle) -> float:
        """Brake before an occupied or contested conflict zone."""
        a = math.inf
        my_prio = self.routes[veh.route].priority
        for zi in range(len(self.cfg.zones)):
            iv = self._interval_cache.get((zi, veh.route, veh.lane))
            if iv is None:
                continue
            s_in, _ = iv
            dist = s_in - veh.s
            if dist < 0.5 or dist > 30.0:
                continue
            if self._zone_contested(zi, veh, my_prio):
                a = min(a, self._stop_at(veh, s_in - 1.0))
        return a

    def _zone_contested(self, zi: int, veh: Vehicle, my_prio: int) -> bool:
        for other in self.vehicles:
            if other is veh:
                continue
            iv = self._interval_cache.get((zi, other.route, other.lane))
            if iv is None:
                continue
            o_in, o_out = iv
            if o_in - 1.0 <= other.s <= o_out + other.length:
                return True  # zone occupied
            o_prio = self.cfg.ego_priority if other.is_ego else self.routes[other.route].priority
            if o_prio > my_prio:
                dist = o_in - other.s
                if 0.0 < dist < 40.0 and dist / max(other.v, 0.5) < veh.gap_t:
                    return True
        return False

    # -- events (scenario 6) ---------------------------------------------------------

    def _run_event(self):
        ev = self._event
        if ev is None or ev["done"] or self.t_step < ev["step"]:
            return
        ego = self.ego
        if ev["kind"] == "stop":
            best = None
            for veh in self.vehicles:
                if veh.is_ego or veh.route != ego.route:
                    continue
                ds = veh.s - ego.s
                if 0.0 < ds < 60.0 and veh.lane == ego.lane:
                    if best is None or ds < best[0]:
                        best = (ds, veh)
            if best is not None:
                best[1].forced_brake = True
                ev["done"] = True
        else:  # cut-in
            best = None
            for veh in self.vehicles:
                if veh.is_ego or veh.route != ego.route or abs(veh.lane - ego.lane) != 1:
                    continue
                gap = veh.s - ego.s - 0.5 * (veh.length + ego.length)
                if 1.0 < gap < 15.0:
                    if best is None or gap < best[0]:
                        best = (gap, veh)
            if best is not None:
                best[1].lane = ego.lane
                self._place(best[1])
                ev["done"] = True

    # -- spawning / despawning ---------------------------------------------------------

    def _despawn(self):
        keep = []
        for veh in self.vehicles:
            if veh.is_ego or veh.s < self.routes[veh.route].length - 0.05:
                keep.append(veh)
        self.vehicles = keep

    def _jittered_idm(self, v0: float) -> IDMParams:
        j = lambda: 1.0 + 0.2 * (2.0 * self.rng.random() - 1.0)
        return IDMParams(v0=max(v0 * j(), 1.0), T=1.5 * j())

    def _spawn_one(self, ri: int, s: float, lane: int, v: float) -> Vehicle | None:
        cfg = self.cfg
        for other in self.vehicles:
            if other.route == ri and other.lane == lane and abs(other.s - s) < 14.0:
                return None
        x, y, _ = self.routes[ri].pose(s, lane)
        if math.hypot(x - self.ego.x, y - self.ego.y) < 20.0:
            return None
        idm = self._jittered_idm(self.routes[ri].bg_v0)
        veh = Vehicle(self._next_vid, ri, s, lane, v, cfg.vehicle_length,
                      cfg.vehicle_width, idm, gap_t=3.0 * (0.8 + 0.4 * self.rng.random()))
        self._next_vid += 1
        self.vehicles.append(veh)
        self._place(veh)
        return veh

    def _spawn(self):
        cfg = self.cfg
        for ri, route in enumerate(self.routes):
            if route.spawn_prob <= 0.0:
                continue
            draw = self.rng.random()
            if len(self.vehicles) - 1 >= cfg.max_vehicles:
                continue
            if draw < route.spawn_prob * cfg.dt:
                lane = int(self.rng.choice(route.spawn_lanes))
                v = route.bg_v0 * (0.6 + 0.4 * self.rng.random())
                self._spawn_one(ri, route.spawn_s, lane, v)

    def _seed_traffic(self):
        cfg = self.cfg
        for ri, route in enumerate(self.routes):
            if route.spawn_prob <= 0.0:
                continue
            headway = max(route.bg_v0, 4.0) / max(route.spawn_prob, 0.1)
            s = route.spawn_s + headway * self.rng.random()
            end = route.length - 10.0
            while s < end and len(self.vehicles) - 1 < cfg.max_vehicles:
                if self.rng.random() < 0.7:
                    lane = int(self.rng.choice(route.spawn_lanes))
                    v = route.bg_v0 * (0.7 + 0.3 * self.rng.random())
                    self._spawn_one(ri, s, lane, v)
                s += headway * (0.7 + 0.6 * self.rng.random())

    # -- outcome checks ------------------------------------------------------------------

    def _place(self, veh: Vehicle):
        veh.x, veh.y, veh.heading = self.routes[veh.route].pose(veh.s, veh.lane)

    def _ego_collision(self) -> bool:
        ego = self.ego
        ec = None
        for veh in self.vehicles:
            if veh.is_ego:
                continue
            if math.hypot(veh.x - ego.x, veh.y - ego.y) > 8.0:
                continue
            if ec is None:
                ec = rect_corners(ego.x, ego.y, ego.heading, ego.length, ego.width)
            vc = rect_corners(veh.x, veh.y, veh.heading, veh.length, veh.width)
            if rects_overlap(ec, vc):
                return True
        return False

    def _red_light_violation(self, s_prev: float, s_now: float, t_now: float) -> bool:
        if not self.cfg.lights or self.ego.route != 0:
            return False
        for li, light in enumerate(self.cfg.lights):
            if li in self._violated_lines:
                continue
            if s_prev < light.s_line_ego <= s_now and light.phase(t_now, "a") == 2:
                self._violated_lines.add(li)
                return True
        return False

    # -- observation -----------------------------------------------------------------------

    def _observe(self) -> np.ndarray:
        cfg = self.cfg
        ego = self.ego
        others = [(v.x, v.y, v.v, v.heading, v.vid) for v in self.vehicles if not v.is_ego]
        slots = neighbor_slots((ego.x, ego.y), ego.heading, ego.v, others)
        parts = [slots.ravel(), np.array([ego.v, _wrap(ego.heading)])]
        if cfg.has_goal_term:
            parts.append(np.array([max(self.goal_s - ego.s, 0.0)]))
        if cfg.lights:
            t_now = self.t_step * cfg.dt
            d_tl, z_tl = SENSE_RADIUS, 0.0
            for light in cfg.lights:
                d = light.s_line_ego - ego.s
                if 0.0 <= d < d_tl:
                    d_tl = d
                    z_tl = float(light.phase(t_now, "a"))
            parts.append(np.array([d_tl, z_tl]))
        return np.concatenate(parts)

    def write_trace_csv(self, path):
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "ego_x", "ego_y", "v", "theta", "action", "r", "c", "flags"])
            for row in self.trace or []:
                w.writerow(row)
