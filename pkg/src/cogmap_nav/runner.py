"""Episode loop, metrics, state-occupancy analysis and batch evaluation."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

from .backends import CooccurrenceTable, DecisionBackend, HeuristicBackend, HeuristicPolicy
from .cogmap import CognitiveMap
from .errors import ConfigurationError, PlannerError
from .fsm import (ALL_STATES, Decision, FsmConfig, FsmContext, step as fsm_step, target_reached,
                  update_anchors)
from .fsm_states import CognitiveState
from .landmarks import LandmarkGraph, refresh
from .occupancy import (OccupancyGrid, Pose, cluster_frontiers, frontier_mask, integrate_observation,
                        mark_obstacle, new_grid, paint_instances)
from .planner import (Action, ActionParams, DistanceField, ReplanRequest, fmm_distance_field,
                      nearest_passable, next_action, planning_mask, reached)
from .prompts import PromptConfig
from .rays import segment_cells
from .scene_graph import SceneGraph
from .world import DEFAULT_NOISE, NoiseModel, Perception, World, generate_world, geodesic_to_goal

log = logging.getLogger(__name__)

LANDMARK_ARRIVAL = 0.5  # metres; non-TC goals count as reached inside this radius
CSV_COLUMNS = ("episode_id", "seed", "goal", "success", "steps", "path_m", "optimal_m", "spl", "dtg_m")


@dataclass(frozen=True)
class EpisodeConfig:
    max_steps: int = 500
    success_radius: float = 1.0
    decision_cadence: int = 10
    prompt: PromptConfig = PromptConfig()
    noise: tuple[float, float, float] = DEFAULT_NOISE
    enabled_states: frozenset = ALL_STATES
    backend: str = "heuristic"
    correction_reliability: float = 1.0
    inflation: int = 2
    policy: HeuristicPolicy = HeuristicPolicy()
    record_frames: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "enabled_states", frozenset(self.enabled_states))
        if self.max_steps < 1:
            raise ConfigurationError("max_steps must be >= 1")
        if not self.success_radius > 0:
            raise ConfigurationError("success_radius must be positive")
        if self.decision_cadence < 1:
            raise ConfigurationError("decision_cadence must be >= 1")
        if CognitiveState.BS not in self.enabled_states:
            raise ConfigurationError("Broad Search cannot be disabled")
        if len(self.noise) != 3 or not all(0.0 <= v <= 1.0 for v in self.noise):
            raise ConfigurationError("noise must be three rates in [0, 1]")
        if not 0.0 <= self.correction_reliability <= 1.0:
            raise ConfigurationError("correction_reliability must lie in [0, 1]")
        if self.backend not in ("heuristic", "replay", "llm"):
            raise ConfigurationError(f"unknown backend {self.backend!r}")

    def fsm_config(self) -> FsmConfig:
        return FsmConfig(self.enabled_states, self.decision_cadence, self.success_radius,
                         self.prompt, self.policy)


@dataclass(frozen=True)
class Frame:
    """Map state captured at one decision, used by the renderer."""

    step: int
    state: CognitiveState
    grid: OccupancyGrid       # private copy
    frontier: np.ndarray
    landmarks: tuple          # (cell, frontier flag, explored flag), by landmark id
    edges: tuple              # (id, id) pairs
    candidates: tuple         # landmark ids offered at this decision
    path: tuple               # agent cells so far
    agent: tuple[int, int]
    goal_cell: Optional[tuple[int, int]]


DecisionObserver = Callable[[int, CognitiveMap, FsmContext, Pose, Decision], None]


@dataclass
class EpisodeResult:
    success: bool
    steps_used: int
    path_length: float
    optimal_length: float
    final_dtg: float
    state_trace: list
    stop_pose: Pose
    seed: int = 0
    goal: str = ""
    episode_id: int = 0
    stopped: bool = False
    dtg_unreachable: bool = False
    fallbacks: int = 0
    frames: list = field(default_factory=list, repr=False)

    @property
    def spl(self) -> float:
        return spl_term(self.success, self.optimal_length, self.path_length)


def spl_term(success: bool, optimal: float, path: float) -> float:
    """S * l / max(p, l); a start already inside the goal radius (l = p = 0) scores S."""
    if not success:
        return 0.0
    denom = max(path, optimal)
    return 1.0 if denom <= 0 else optimal / denom


# -- episode -----------------------------------------------------------------------

class _Episode:
    def __init__(self, world: World, cfg: EpisodeConfig, backend: DecisionBackend,
                 knowledge: Optional[CooccurrenceTable]) -> None:
        self.world = world
        self.cfg = cfg
        self.fsm_cfg = cfg.fsm_config()
        self.backend = backend
        self.knowledge = knowledge
        self.perception = Perception(world, NoiseModel(*cfg.noise, seed=world.seed))
        grid = new_grid(world.grid_config)
        self.cogmap = CognitiveMap(grid, SceneGraph(world.grid_config), LandmarkGraph())
        self.ctx = FsmContext(world.goal, cfg.enabled_states)
        self.pose = world.start
        self.changed: set[int] = set()
        self.field: Optional[DistanceField] = None
        self.goal_point: Optional[tuple[float, float]] = None
        self.goal_cell = None
        self.path: list = [world.world_to_cell(world.start.x, world.start.y)]
        self.frames: list[Frame] = []
        self.params = ActionParams()

    # perception and mapping
    def sense(self, step: int) -> None:
        obs = self.perception.observe(self.pose, step)
        grid = self.cogmap.grid
        integrate_observation(grid, self.pose, obs.depth_scan)
        cell = grid.world_to_cell(self.pose.x, self.pose.y)
        grid.agent_trace[cell[1], cell[0]] = True
        for det in obs.detections:
            self.changed.add(self.cogmap.scene.fuse_detection(det))
        self.cogmap.note_room(cell, obs.room_hint)

    def refresh_map(self) -> None:
        cm = self.cogmap
        scene = cm.scene
        scene.apply_corrections(self.perception.correction_oracle(scene, self.cfg.correction_reliability))
        scene.infer_spatial_relations({i for i in self.changed if i in scene.nodes})
        self.changed.clear()
        paint_instances(cm.grid, {nid: n.footprint for nid, n in scene.nodes.items()})
        cm.frontiers = cluster_frontiers(cm.grid)
        cm.landmarks = refresh(cm.landmarks, cm.grid, scene, cm.frontiers, self.pose, cm.room_hints)
        update_anchors(self.ctx, scene, self.knowledge, cm.observed_rooms)

    # planning
    def _approach_cell(self, mask: np.ndarray):
        node = self.cogmap.scene.nodes[self.ctx.target]
        ys, xs = np.nonzero(mask)
        if len(xs) == 0:
            return None
        tree = cKDTree(np.asarray(sorted(node.footprint), dtype=float))
        d, _ = tree.query(np.column_stack([xs, ys]).astype(float))
        j = int(np.argmin(d))  # row-major order breaks ties
        return int(xs[j]), int(ys[j])

    def plan(self, landmark: Optional[int]) -> bool:
        """Distance field towards the current goal; False when it cannot be reached."""
        grid = self.cogmap.grid
        agent = grid.world_to_cell(self.pose.x, self.pose.y)
        mask = planning_mask(grid, self.cfg.inflation, keep=agent)
        goals = []
        if self.ctx.state is CognitiveState.TC and self.ctx.target in self.cogmap.scene.nodes:
            goals.append(self._approach_cell(mask))
        if landmark is not None:
            goals.append(nearest_passable(mask, self.cogmap.landmarks.landmarks[landmark].cell))
        for g in goals:
            if g is None:
                continue
            try:
                fld = fmm_distance_field(grid, g, self.cfg.inflation, agent=agent)
            except PlannerError:
                continue
            if math.isfinite(fld.at(agent)):
                self.field = fld
                self.goal_cell = g
                if landmark is not None and g == goals[-1] and self.ctx.state is not CognitiveState.TC:
                    self.goal_point = self.cogmap.landmarks.landmarks[landmark].world_pos
                else:
                    self.goal_point = grid.cell_to_world(g)
                return True
        self.field = None
        self.goal_cell = None
        self.goal_point = None
        return False

    def arrived(self) -> bool:
        if self.ctx.state is CognitiveState.TC:
            return target_reached(self.ctx, self.cogmap.scene, self.pose, self.fsm_cfg.arrival_radius)
        if self.goal_point is None:
            return True
        return reached(self.pose, self.goal_point, LANDMARK_ARRIVAL)

    def facing_turn(self) -> Optional[Action]:
        """Turn towards the potential target if it lies outside the alignment band.

        Used on reaching an observe/verify landmark: the sensor is a 90 degree
        cone, so a visit only yields a new viewpoint if the agent looks.
        """
        node = self.cogmap.scene.nodes.get(self.ctx.target) if self.ctx.target is not None else None
        if node is None:
            return None
        bearing = math.degrees(math.atan2(node.centroid[1] - self.pose.y, node.centroid[0] - self.pose.x))
        err = (bearing - self.pose.theta + 180.0) % 360.0 - 180.0
        if abs(err) <= self.params.align_tolerance:
            return None
        return Action.TURN_LEFT if err > 0 else Action.TURN_RIGHT

    # motion
    def execute(self, action: Action) -> float:
        p = self.pose
        if action is Action.TURN_LEFT:
            self.pose = Pose(p.x, p.y, (p.theta + self.params.turn_angle) % 360.0)
        elif action is Action.TURN_RIGHT:
            self.pose = Pose(p.x, p.y, (p.theta - self.params.turn_angle) % 360.0)
        elif action is Action.MOVE_FORWARD:
            a = math.radians(p.theta)
            nx = p.x + self.params.forward_step * math.cos(a)
            ny = p.y + self.params.forward_step * math.sin(a)
            r = self.world.resolution
            for cx, cy in segment_cells(p.x / r, p.y / r, nx / r, ny / r):
                c = (int(cx), int(cy))
                if not self.world.is_free(c):
                    mark_obstacle(self.cogmap.grid, c)
                    self.field = None  # the map changed under the plan
                    return 0.0
            self.pose = Pose(nx, ny, p.theta)
            cell = self.world.world_to_cell(nx, ny)
            if cell != self.path[-1]:
                self.path.append(cell)
            return math.hypot(nx - p.x, ny - p.y)
        return 0.0

    def snapshot(self, step: int, candidates: tuple) -> None:
        if not self.cfg.record_frames:
            return
        g = self.cogmap.grid
        lg = self.cogmap.landmarks
        lms = tuple((lm.cell, lm.frontier, lm.explored) for _, lm in sorted(lg.landmarks.items()))
        edges = tuple((a, b) for a, b, _ in lg.edge_list())
        self.frames.append(Frame(step, self.ctx.state, g.copy(), frontier_mask(g), lms, edges,
                                 tuple(candidates), tuple(self.path),
                                 g.world_to_cell(self.pose.x, self.pose.y), self.goal_cell))


def run_episode(world: World, cfg: EpisodeConfig = EpisodeConfig(),
                backend: Optional[DecisionBackend] = None,
                knowledge: Optional[CooccurrenceTable] = None, episode_id: int = 0,
                observer: Optional[DecisionObserver] = None) -> EpisodeResult:
    """Observe, map, decide on cadence and follow the distance field until stop or budget.

    ``observer`` is called after every decision with the live map and context;
    it must not mutate them.
    """
    if backend is None:
        backend = HeuristicBackend(cfg.policy)
    if knowledge is None:
        knowledge = cfg.policy.cooccurrence or CooccurrenceTable.load()
    ep = _Episode(world, cfg, backend, knowledge)
    start_cell = world.world_to_cell(world.start.x, world.start.y)
    optimal = geodesic_to_goal(world, start_cell, world.goal)
    steps = 0
    path_len = 0.0
    stopped = False
    since = cfg.decision_cadence  # forces a decision before the first action
    want_decision = True
    sensed = -1
    idle = False  # parked on the chosen goal: look around until the next cadence decision
    while steps < cfg.max_steps:
        if sensed != steps:
            ep.sense(steps)
            sensed = steps
        decided = False
        if want_decision or since >= cfg.decision_cadence:
            ep.refresh_map()
            _, decision = fsm_step(ep.ctx, ep.cogmap, backend, ep.fsm_cfg, ep.pose, steps)
            if observer is not None:
                observer(steps, ep.cogmap, ep.ctx, ep.pose, decision)
            decided = True
            idle = False
            since = 0
            want_decision = False
            if decision.stop:
                ep.snapshot(steps, decision.candidates)
                stopped = True
                steps += 1
                break
            planned = ep.plan(decision.landmark)
            ep.snapshot(steps, decision.candidates)
            if not planned and decision.landmark is not None:
                # unreachable goal: retire it and ask again next step
                ep.cogmap.landmarks.mark_explored(decision.landmark)
                want_decision = True
        elif ep.field is None:
            ep.plan(ep.ctx.goal_landmark)

        action: Union[Action, ReplanRequest]
        if idle:
            action = Action.TURN_LEFT
        elif ep.field is None:
            action = ReplanRequest("no plan")
        elif ep.arrived():
            turn = ep.facing_turn() if ep.ctx.state in (CognitiveState.OT, CognitiveState.CV) else None
            action = turn if turn is not None else ReplanRequest("arrived")
        else:
            action = next_action(ep.field, ep.pose, ep.params)
        if isinstance(action, ReplanRequest):
            if ep.ctx.goal_landmark is not None and ep.ctx.state is not CognitiveState.TC:
                ep.cogmap.landmarks.mark_explored(ep.ctx.goal_landmark)
            if not decided:
                want_decision = True
                continue  # decide now, without spending a step
            # a fresh decision already failed to move us: rotate to see more
            if ep.field is not None:
                idle = True
            else:
                want_decision = True
            action = Action.TURN_LEFT
        path_len += ep.execute(action)
        steps += 1
        since += 1
    final_cell = world.world_to_cell(ep.pose.x, ep.pose.y)
    success_mask = world.success_mask(world.goal, cfg.success_radius)
    success = stopped and bool(success_mask[final_cell[1], final_cell[0]])
    dtg = geodesic_to_goal(world, final_cell, world.goal)
    unreachable = not math.isfinite(dtg)
    if unreachable:
        dtg = straight_line_to_goal(world, ep.pose)
    return EpisodeResult(success, steps, path_len, optimal, dtg, list(ep.ctx.history), ep.pose,
                         seed=world.seed, goal=world.goal, episode_id=episode_id, stopped=stopped,
                         dtg_unreachable=unreachable, fallbacks=ep.ctx.fallbacks, frames=ep.frames)


def straight_line_to_goal(world: World, pose: Pose) -> float:
    """Euclidean metres from ``pose`` to the nearest goal-category cell, minus the success radius."""
    pts = np.concatenate([np.asarray(i.cells, dtype=float).reshape(-1, 2) for i in world.instances_of(world.goal)])
    pts = (pts + 0.5) * world.resolution
    d = float(np.min(np.hypot(pts[:, 0] - pose.x, pts[:, 1] - pose.y)))
    return max(0.0, d - 1.0)


# -- metrics -------------------------------------------------------------------------

@dataclass(frozen=True)
class CategoryMetrics:
    episodes: int
    sr: float
    spl: float


@dataclass(frozen=True)
class MetricsSummary:
    sr: float
    spl: float
    dtg: float
    episodes: int
    per_category: dict
    unreachable_dtg: int = 0

    def table(self) -> str:
        lines = [f"episodes {self.episodes}  SR {self.sr:.1f}%  SPL {self.spl:.1f}%  DTG {self.dtg:.3f} m"]
        if self.unreachable_dtg:
            lines.append(f"  ({self.unreachable_dtg} final positions had no path; straight-line DTG used)")
        lines.append(f"{'category':<12} {'n':>4} {'SR%':>7} {'SPL%':>7}")
        for cat in sorted(self.per_category):
            m = self.per_category[cat]
            lines.append(f"{cat:<12} {m.episodes:>4} {m.sr:>7.1f} {m.spl:>7.1f}")
        return "\n".join(lines)


def _rates(results: Sequence[EpisodeResult]) -> tuple[float, float]:
    n = len(results)
    sr = 100.0 * sum(1 for r in results if r.success) / n
    spl = 100.0 * sum(r.spl for r in results) / n
    return sr, spl


def compute_metrics(results: Sequence[EpisodeResult]) -> MetricsSummary:
    if not results:
        raise ValueError("cannot summarise an empty result list")
    sr, spl = _rates(results)
    dtg = sum(r.final_dtg for r in results) / len(results)
    cats = {}
    for cat in sorted({r.goal for r in results}):
        sub = [r for r in results if r.goal == cat]
        csr, cspl = _rates(sub)
        cats[cat] = CategoryMetrics(len(sub), csr, cspl)
    return MetricsSummary(sr, spl, dtg, len(results), cats, sum(1 for r in results if r.dtg_unreachable))


@dataclass(frozen=True)
class StateBin:
    index: int
    ratios: dict
    entropy: float


def _occupancy(trace: Sequence, steps: int) -> list[CognitiveState]:
    """State held at each step 0..steps-1 (before the first decision: the first state)."""
    if not trace or steps <= 0:
        return []
    out = []
    k = 0
    for t in range(steps):
        while k + 1 < len(trace) and trace[k + 1][0] <= t:
            k += 1
        out.append(trace[k][1])
    return out


def state_analysis(results: Iterable, bins: int) -> list[StateBin]:
    """Per-bin state ratios and entropy over normalised episode time.

    Step t of an episode with T steps falls in bin floor((t + 0.5) / T * bins).
    Accepts EpisodeResults or (trace, steps) pairs.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    counts = np.zeros((bins, len(CognitiveState)), dtype=np.int64)
    order = list(CognitiveState)
    for r in results:
        trace, steps = (r.state_trace, r.steps_used) if isinstance(r, EpisodeResult) else r
        occ = _occupancy(trace, steps)
        for t, s in enumerate(occ):
            b = min(bins - 1, int((t + 0.5) / steps * bins))
            counts[b, order.index(s)] += 1
    out = []
    for b in range(bins):
        total = counts[b].sum()
        ratios = {s: (counts[b, i] / total if total else 0.0) for i, s in enumerate(order)}
        ent = -sum(r * math.log2(r) for r in ratios.values() if r > 0)
        out.append(StateBin(b, ratios, float(ent) + 0.0))
    return out


# -- batches -----------------------------------------------------------------------------

BackendFactory = Callable[[], DecisionBackend]


def _run_seed(args) -> EpisodeResult:
    seed, cfg, factory, episode_id = args
    world = generate_world(seed)
    backend = factory() if factory is not None else None
    return run_episode(world, cfg, backend, episode_id=episode_id)


def run_batch(seeds: Sequence[int], cfg: EpisodeConfig = EpisodeConfig(),
              backend_factory: Optional[BackendFactory] = None, workers: int = 1) -> list[EpisodeResult]:
    """Run one episode per seed; results come back in seed order whatever the worker count."""
    jobs = [(int(s), cfg, backend_factory, i) for i, s in enumerate(seeds)]
    if workers <= 1:
        return [_run_seed(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_seed, jobs))


def results_csv(results: Sequence[EpisodeResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in results:
        w.writerow([r.episode_id, r.seed, r.goal, int(r.success), r.steps_used,
                    f"{r.path_length:.3f}", f"{r.optimal_length:.3f}", f"{r.spl:.3f}", f"{r.final_dtg:.3f}"])
    return buf.getvalue()
