"""The five cognitive states."""

from __future__ import annotations

from enum import Enum


class CognitiveState(Enum):
    BS = "BS"
    CS = "CS"
    OT = "OT"
    CV = "CV"
    TC = "TC"


STATE_NAMES = {
    CognitiveState.BS: "Broad Search",
    CognitiveState.CS: "Contextual Search",
    CognitiveState.OT: "Observe Target",
    CognitiveState.CV: "Candidate Verification",
    CognitiveState.TC: "Target Confirmation",
}

STATE_DEFINITIONS = {
    CognitiveState.BS: "nothing useful is known yet; head for unexplored frontier landmarks.",
    CognitiveState.CS: "search near rooms or objects that usually appear with the goal.",
    CognitiveState.OT: "a possible goal object has been seen; move towards it.",
    CognitiveState.CV: "look at the possible goal from other landmarks to check it is real.",
    CognitiveState.TC: "the goal is confirmed; go next to it and stop.",
}

# degradation order when a proposed state has no candidate landmarks
DEGRADATION = (CognitiveState.TC, CognitiveState.CV, CognitiveState.OT,
               CognitiveState.CS, CognitiveState.BS)


def parse_state_name(text: str) -> CognitiveState:
    """Accept an abbreviation or a full name (case-insensitive)."""
    t = text.strip().upper()
    for s in CognitiveState:
        if t == s.name or t == STATE_NAMES[s].upper():
            return s
    raise ValueError(f"unknown cognitive state {text!r}")
