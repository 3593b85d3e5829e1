"""Cognitive-state machine: candidate landmark sets, anchors and the decision step."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .backends import (CooccurrenceTable, DecisionBackend, DecisionSummary, HeuristicBackend,
                       HeuristicPolicy, LandmarkQuery, StateQuery)
from .cogmap import CognitiveMap
from .errors import BackendError, ConfigurationError
from .fsm_states import DEGRADATION, CognitiveState
from .landmarks import LandmarkGraph
from .occupancy import Pose
from .prompts import PromptConfig, build_landmark_selection_prompt, build_state_prompt
from .scene_graph import SceneGraph

log = logging.getLogger(__name__)

ALL_STATES = frozenset(CognitiveState)
BS, CS, OT, CV, TC = (CognitiveState.BS, CognitiveState.CS, CognitiveState.OT,
                      CognitiveState.CV, CognitiveState.TC)


@dataclass(frozen=True)
class FsmConfig:
    enabled_states: frozenset = ALL_STATES
    decision_cadence: int = 10
    arrival_radius: float = 1.0
    prompt: PromptConfig = PromptConfig()
    policy: HeuristicPolicy = HeuristicPolicy()

    def __post_init__(self) -> None:
        object.__setattr__(self, "enabled_states", frozenset(self.enabled_states))
        if BS not in self.enabled_states:
            raise ConfigurationError("Broad Search cannot be disabled")
        if self.decision_cadence < 1:
            raise ConfigurationError("decision_cadence must be >= 1")
        if not self.arrival_radius > 0:
            raise ConfigurationError("arrival_radius must be positive")


@dataclass
class FsmContext:
    goal: str
    enabled: frozenset = ALL_STATES
    state: CognitiveState = BS
    target: Optional[int] = None            # potential target instance
    anchor_instance: Optional[int] = None   # co-occurring object
    anchor_room: Optional[str] = None       # co-occurring room label
    target_new: bool = False
    history: list = field(default_factory=list)  # (step, state)
    goal_landmark: Optional[int] = None
    fallbacks: int = 0

    def __post_init__(self) -> None:
        self.enabled = frozenset(self.enabled)
        if not self.goal:
            raise ConfigurationError("goal category must be non-empty")
        if BS not in self.enabled:
            raise ConfigurationError("Broad Search cannot be disabled")
        if self.state not in self.enabled:
            raise ConfigurationError(f"state {self.state.name} is not enabled")


@dataclass(frozen=True)
class Decision:
    state: CognitiveState
    landmark: Optional[int]
    stop: bool = False
    used_fallback: bool = False
    candidates: tuple[int, ...] = ()


# -- candidate sets ---------------------------------------------------------------

def _cell_centres(cells, config) -> np.ndarray:
    arr = np.asarray(sorted(cells), dtype=float).reshape(-1, 2)
    return (arr + 0.5) * config.resolution + np.asarray(config.origin, dtype=float)


def ground_distance(point: tuple[float, float], node, config) -> float:
    """Planar metres from ``point`` to the nearest footprint cell centre of ``node``."""
    pts = _cell_centres(node.footprint, config)
    return float(np.min(np.hypot(pts[:, 0] - point[0], pts[:, 1] - point[1])))


def target_landmarks(goal: str, graph: LandmarkGraph, scene: SceneGraph) -> set[int]:
    out = set()
    for lid, lm in graph.landmarks.items():
        m = lm.mapping
        if m.kind == "instance" and m.ref in scene.nodes and scene.nodes[m.ref].category == goal:
            out.add(lid)
    return out


def candidate_landmarks(ctx: FsmContext, graph: LandmarkGraph, scene: SceneGraph,
                        state: Optional[CognitiveState] = None) -> set[int]:
    """Landmarks eligible as goals in ``state`` (default: the context's state).

    An empty set marks the state as infeasible.
    """
    state = ctx.state if state is None else state
    lms = graph.landmarks
    if state is BS:
        return {i for i, lm in lms.items() if lm.frontier}
    if state is CS:
        out = set()
        for i, lm in lms.items():
            m = lm.mapping
            if ctx.anchor_instance is not None and m.kind == "instance" and m.ref == ctx.anchor_instance:
                out.add(i)
            elif ctx.anchor_room is not None and lm.room == ctx.anchor_room:
                out.add(i)
        return out
    if ctx.target is None or ctx.target not in scene.nodes:
        return set()
    ot = target_landmarks(ctx.goal, graph, scene)
    if state is OT:
        return ot
    if state is CV:
        return {i for i in ot if not lms[i].explored}
    if not ot:
        return set()
    node = scene.nodes[ctx.target]
    best = min(ot, key=lambda i: (ground_distance(lms[i].world_pos, node, scene.config), i))
    return {best}


def clamp_state(proposed: CognitiveState, ctx: FsmContext, graph: LandmarkGraph,
                scene: SceneGraph) -> tuple[CognitiveState, set[int]]:
    """Walk the degradation chain from ``proposed`` to the first enabled, feasible state."""
    for s in DEGRADATION[DEGRADATION.index(proposed):]:
        if s not in ctx.enabled:
            continue
        cands = candidate_landmarks(ctx, graph, scene, s)
        if cands:
            return s, cands
    # nothing feasible, not even a frontier: keep searching over unexplored landmarks
    lms = graph.landmarks
    rest = {i for i, lm in lms.items() if not lm.explored} or set(lms)
    return BS, rest


# -- anchors ----------------------------------------------------------------------

def update_anchors(ctx: FsmContext, scene: SceneGraph, knowledge: Optional[CooccurrenceTable],
                   observed_rooms=()) -> FsmContext:
    rooms = knowledge.related_rooms(ctx.goal) if knowledge else ()
    objects = knowledge.related_objects(ctx.goal) if knowledge else ()
    ctx.anchor_room = next((r for r in observed_rooms if r in rooms), None)
    ctx.anchor_instance = next((n.id for _, n in sorted(scene.nodes.items()) if n.category in objects), None)
    found = scene.by_category(ctx.goal)
    old = ctx.target
    if found:
        ctx.target = min(found, key=lambda n: (-n.confidence, n.id)).id
    else:
        ctx.target = None
    ctx.target_new = ctx.target is not None and ctx.target != old
    return ctx


def target_reached(ctx: FsmContext, scene: SceneGraph, agent: Pose, radius: float) -> bool:
    """Agent cell centre within ``radius`` of the potential target's mapped footprint."""
    if ctx.target is None or ctx.target not in scene.nodes:
        return False
    cfg = scene.config
    r = cfg.resolution
    cx = (math.floor((agent.x - cfg.origin[0]) / r) + 0.5) * r + cfg.origin[0]
    cy = (math.floor((agent.y - cfg.origin[1]) / r) + 0.5) * r + cfg.origin[1]
    return ground_distance((cx, cy), scene.nodes[ctx.target], cfg) <= radius + 1e-9


# -- decision step ------------------------------------------------------------------

def decision_summary(ctx: FsmContext, cogmap: CognitiveMap, agent: Pose,
                     prompt_cfg: PromptConfig) -> DecisionSummary:
    """Structured view of what the prompt shows, with the same ablation masks."""
    graph, scene = cogmap.landmarks, cogmap.scene
    node = scene.nodes.get(ctx.target) if ctx.target is not None else None
    ot = target_landmarks(ctx.goal, graph, scene) if node is not None else set()
    cs = candidate_landmarks(ctx, graph, scene, CS)
    if prompt_cfg.include_history:
        verify = any(not graph.landmarks[i].explored for i in ot)
        context = any(not graph.landmarks[i].explored for i in cs)
        explored = {i: lm.explored for i, lm in graph.landmarks.items()}
    else:
        verify = bool(ot)
        context = bool(cs)
        explored = {i: None for i in graph.landmarks}
    if prompt_cfg.include_spatial and graph.landmarks:
        here = graph.nearest((agent.x, agent.y))
        sp = graph.single_source(here)
        distances = {i: sp[i][0] if i in sp else math.inf for i in graph.landmarks}
    else:
        distances = {i: None for i in graph.landmarks}
    return DecisionSummary(
        target_id=ctx.target if node is not None else None,
        target_confidence=node.confidence if node is not None else 0.0,
        target_viewpoints=node.viewpoint_count if node is not None else 0,
        target_new=ctx.target_new,
        verify_remaining=verify,
        anchor_known=ctx.anchor_instance is not None or ctx.anchor_room is not None,
        context_remaining=context,
        distances=distances,
        explored=explored,
    )


def _decide(backend: DecisionBackend, ctx: FsmContext, cogmap: CognitiveMap, agent: Pose,
            cfg: FsmConfig, summary: DecisionSummary, with_prompts: bool) -> Decision:
    graph, scene = cogmap.landmarks, cogmap.scene
    prompt = build_state_prompt(cogmap, agent, ctx.goal, ctx.history, cfg.prompt, ctx.state) if with_prompts else ""
    proposed = backend.next_state(StateQuery(prompt, ctx.state, ctx.enabled, summary))
    state, cands = clamp_state(proposed, ctx, graph, scene)
    ordered = tuple(sorted(cands))
    if state is TC and target_reached(ctx, scene, agent, cfg.arrival_radius):
        return Decision(state, ordered[0], stop=True, candidates=ordered)
    if not ordered:
        return Decision(state, None, candidates=ordered)
    sel = (build_landmark_selection_prompt(cogmap, state, ordered, ctx.goal, cfg.prompt, agent)
           if with_prompts else "")
    lid = backend.select_landmark(LandmarkQuery(sel, state, ordered, summary))
    if lid not in cands:
        raise BackendError(f"landmark {lid} is not a candidate")
    return Decision(state, lid, candidates=ordered)


def step(ctx: FsmContext, cogmap: CognitiveMap, backend: DecisionBackend, cfg: FsmConfig,
         agent: Pose, step_index: int) -> tuple[FsmContext, Decision]:
    """One decision: next state, then a goal landmark or the stop signal."""
    summary = decision_summary(ctx, cogmap, agent, cfg.prompt)
    # the heuristic reads only the summary, so it skips prompt rendering
    needs_text = not isinstance(backend, HeuristicBackend)
    try:
        decision = _decide(backend, ctx, cogmap, agent, cfg, summary, needs_text)
    except BackendError as exc:
        log.warning("backend %s failed at step %d (%s); using heuristic", backend.name, step_index, exc)
        ctx.fallbacks += 1
        decision = _decide(HeuristicBackend(cfg.policy), ctx, cogmap, agent, cfg, summary, False)
        decision = Decision(decision.state, decision.landmark, decision.stop, True, decision.candidates)
    ctx.state = decision.state
    ctx.goal_landmark = decision.landmark
    ctx.history.append((step_index, decision.state))
    return ctx, decision
