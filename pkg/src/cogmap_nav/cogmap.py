"""The cognitive map bundle passed between the mapper, prompts and FSM."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .landmarks import LandmarkGraph
from .occupancy import Cell, FrontierCluster, OccupancyGrid
from .scene_graph import SceneGraph


@dataclass
class CognitiveMap:
    grid: OccupancyGrid
    scene: SceneGraph
    landmarks: LandmarkGraph
    frontiers: list[FrontierCluster] = field(default_factory=list)
    room_hints: dict[Cell, str] = field(default_factory=dict)
    observed_rooms: list[str] = field(default_factory=list)  # first-seen order

    def note_room(self, cell: Cell, label: Optional[str]) -> None:
        if not label:
            return
        self.room_hints[cell] = label
        if label not in self.observed_rooms:
            self.observed_rooms.append(label)
