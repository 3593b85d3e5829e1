"""Landmark-centred text prompts. The template text here is a frozen contract."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .cogmap import CognitiveMap
from .errors import ContractError
from .fsm_states import STATE_DEFINITIONS, STATE_NAMES, CognitiveState
from .landmarks import Landmark
from .occupancy import Pose

ARROW = "→"
HISTORY_LENGTH = 5

HEADER = (
    "You direct a robot that searches an indoor scene for one object category.",
    "It moves between numbered landmarks on a map of the explored space.",
    "Cognitive states:",
)
STATE_QUESTION = "Reply with the name of the next cognitive state."
SELECT_QUESTION = "Pick exactly one landmark id from the candidates. Reply with the id only."


@dataclass(frozen=True)
class PromptConfig:
    include_edges: bool = True
    include_room_type: bool = True
    include_spatial: bool = True
    include_history: bool = True
    neighbor_radius: float = 1.5

    def __post_init__(self) -> None:
        if not self.neighbor_radius > 0:
            raise ValueError("neighbor_radius must be positive")


@dataclass(frozen=True)
class PromptBundle:
    state_prompt: str
    landmark_selection_prompt: str
    per_landmark_blocks: tuple[tuple[int, str], ...]

    def render(self) -> str:
        parts = ["=== state prompt ===", self.state_prompt, "=== landmark selection prompt ===",
                 self.landmark_selection_prompt]
        return "\n".join(parts) + "\n"


def direction_label(dx: float, dy: float) -> str:
    """Four map-frame sectors centred on the axes; a +45 degree edge goes clockwise."""
    if dx == 0 and dy == 0:
        return "Right"
    b = math.degrees(math.atan2(dy, dx))
    if b <= -45.0:
        b += 360.0
    # b now in (-45, 315]
    if b <= 45.0:
        return "Right"
    if b <= 135.0:
        return "Up"
    if b <= 225.0:
        return "Left"
    return "Down"


def _yes(flag: bool) -> str:
    return "yes" if flag else "no"


def map_to_landmark(cogmap: CognitiveMap, landmark: Landmark, cfg: PromptConfig) -> list[str]:
    """Scene lines for one landmark: objects, relations, room and frontier flag."""
    nodes = cogmap.scene.neighbors_within(landmark.world_pos, cfg.neighbor_radius)
    lines = []
    if nodes:
        lines.append("Objects: " + ", ".join(n.category for n in nodes))
    else:
        lines.append("Objects: none")
    if cfg.include_edges and nodes:
        clauses = []
        for n in nodes:
            for e in cogmap.scene.edges_of(n.id):
                clauses.append(f"{n.category} {e.relation} {cogmap.scene.nodes[e.dst].category}")
        if clauses:
            lines.append("Relations: " + "; ".join(clauses))
    if cfg.include_room_type and landmark.room:
        lines.append(f"Room: {landmark.room}")
    lines.append(f"Frontier: {_yes(landmark.frontier)}")
    return lines


def agent_to_landmark(cogmap: CognitiveMap, landmark: Landmark, agent: Pose,
                      cfg: PromptConfig) -> list[str]:
    """Location line (direction, landmark path, distance) and the explored flag."""
    lines = []
    if cfg.include_spatial:
        graph = cogmap.landmarks
        d = direction_label(landmark.world_pos[0] - agent.x, landmark.world_pos[1] - agent.y)
        here = graph.nearest((agent.x, agent.y))
        path, dist = graph.shortest_path(here, landmark.id) if here is not None else ([], math.inf)
        if not path:
            lines.append(f"Location: {{Direction: {d}, Path: unreachable}}")
        else:
            p = ARROW.join(str(i) for i in path)
            lines.append(f"Location: {{Direction: {d}, Path: {p}, Distance: {dist:.1f}m}}")
    if cfg.include_history:
        lines.append(f"Explored: {_yes(landmark.explored)}")
    return lines


def landmark_block(cogmap: CognitiveMap, landmark: Landmark, agent: Pose, cfg: PromptConfig) -> str:
    body = map_to_landmark(cogmap, landmark, cfg) + agent_to_landmark(cogmap, landmark, agent, cfg)
    return "\n".join([f"Landmark {landmark.id}:"] + ["  " + ln for ln in body])


def _target_lines(cogmap: CognitiveMap, goal_category: str) -> list[str]:
    found = cogmap.scene.by_category(goal_category)
    if not found:
        return ["Target sightings: none"]
    out = ["Target sightings:"]
    for n in found:
        out.append(f"  {n.category} {n.id}: confidence {n.confidence:.2f}, "
                   f"viewpoints {n.viewpoint_count}")
    return out


def _history_line(history: Sequence) -> Optional[str]:
    if not history:
        return None
    recent = list(history)[-HISTORY_LENGTH:]
    return "Recent states: " + ", ".join(f"{s.name}@{step}" for step, s in recent)


def build_state_prompt(cogmap: CognitiveMap, agent: Pose, goal_category: str,
                       fsm_history: Sequence, cfg: PromptConfig,
                       current: Optional[CognitiveState] = None) -> str:
    if not goal_category:
        raise ContractError("goal category must be non-empty")
    lines = list(HEADER)
    for s in CognitiveState:
        lines.append(f"- {STATE_NAMES[s]} ({s.name}): {STATE_DEFINITIONS[s]}")
    lines.append(f"Goal: {goal_category}")
    if current is not None:
        lines.append(f"Current state: {current.name}")
    lines.extend(_target_lines(cogmap, goal_category))
    if cfg.include_history:
        h = _history_line(fsm_history)
        if h:
            lines.append(h)
    lines.append("Landmarks:")
    for lid in cogmap.landmarks.ids():
        lines.append(landmark_block(cogmap, cogmap.landmarks.landmarks[lid], agent, cfg))
    lines.append(STATE_QUESTION)
    return "\n".join(lines) + "\n"


def build_landmark_selection_prompt(cogmap: CognitiveMap, state: CognitiveState,
                                    candidates: Iterable[int], goal_category: str,
                                    cfg: PromptConfig, agent: Optional[Pose] = None) -> str:
    cands = sorted(set(candidates))
    if not cands:
        raise ContractError("landmark selection needs at least one candidate")
    if agent is None:
        agent = Pose(*cogmap.landmarks.landmarks[cands[0]].world_pos, 0.0)
    lines = [f"Goal: {goal_category}",
             f"Current state: {STATE_NAMES[state]} ({state.name})",
             SELECT_QUESTION,
             "Candidates: " + ", ".join(str(c) for c in cands)]
    for lid in cands:
        lines.append(landmark_block(cogmap, cogmap.landmarks.landmarks[lid], agent, cfg))
    return "\n".join(lines) + "\n"


def build_bundle(cogmap: CognitiveMap, agent: Pose, goal_category: str, history: Sequence,
                 state: CognitiveState, candidates: Iterable[int], cfg: PromptConfig) -> PromptBundle:
    cands = sorted(set(candidates))
    blocks = tuple((lid, landmark_block(cogmap, cogmap.landmarks.landmarks[lid], agent, cfg))
                   for lid in cogmap.landmarks.ids())
    sel = build_landmark_selection_prompt(cogmap, state, cands, goal_category, cfg, agent) if cands else ""
    return PromptBundle(build_state_prompt(cogmap, agent, goal_category, history, cfg, state), sel, blocks)
