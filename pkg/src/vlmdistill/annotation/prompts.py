"""Prompt families sent to the teacher and the structured action vocabulary."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

CONTROL_ACTIONS = ("go straight", "move slowly", "stop", "reverse")
TURN_ACTIONS = ("turn left", "turn right", "turn around", "none")
LANE_ACTIONS = (
    "change lane to the left",
    "change lane to the right",
    "merge into the left lane",
    "merge into the right lane",
    "none",
)

ACTION_FAMILIES = ("control", "turn", "lane")

SYNONYMS = {
    "turn slightly left": "turn left",
    "turn slightly right": "turn right",
    "shift slightly to the left": "change lane to the left",
    "shift slightly to the right": "change lane to the right",
}

_TRAJECTORY_NOTE = (
    "This is the front-view image of the ego vehicle. The red line indicates the "
    "future trajectory, no line suggests stopping or slowing down."
)

FREEFORM_CONTEXT = (
    _TRAJECTORY_NOTE
    + " When explaining the reasoning, please focus on the camera image and the "
    "surrounding context rather than referencing the plotted trajectory."
)
FREEFORM_QUESTIONS = (
    "Please describe the ego vehicle's current actions.",
    "Please predict the ego vehicle's future actions.",
    "Please explain the reasoning of current and future action.",
)

ACTION_CONTEXT = _TRAJECTORY_NOTE


def _list_question(kind: str, labels: tuple[str, ...]) -> str:
    return (
        f"Please describe the ego vehicle's action from the {kind} action list: "
        "{" + ", ".join(labels) + "}."
    )


ACTION_QUESTIONS = (
    _list_question("control", CONTROL_ACTIONS),
    _list_question("turn", TURN_ACTIONS),
    _list_question("lane", LANE_ACTIONS),
)


class PromptFamily(str, Enum):
    FREEFORM = "P1"
    ACTIONS = "P2"


@dataclass(frozen=True)
class PromptTemplate:
    family: PromptFamily
    context: str
    questions: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.context or len(self.questions) != 3:
            raise ValueError("a prompt needs a context and exactly three questions")

    def render(self) -> str:
        """Context followed by the numbered questions, one per line."""
        lines = [self.context] + [f"{i}. {q}" for i, q in enumerate(self.questions, 1)]
        return "\n".join(lines)


def build_prompt(family: PromptFamily | str) -> PromptTemplate:
    family = PromptFamily(family)
    if family is PromptFamily.FREEFORM:
        return PromptTemplate(family, FREEFORM_CONTEXT, FREEFORM_QUESTIONS)
    return PromptTemplate(family, ACTION_CONTEXT, ACTION_QUESTIONS)


@dataclass(frozen=True)
class ActionVocabulary:
    control: tuple[str, ...] = CONTROL_ACTIONS
    turn: tuple[str, ...] = TURN_ACTIONS
    lane: tuple[str, ...] = LANE_ACTIONS
    synonym_map: dict[str, str] = field(default_factory=lambda: dict(SYNONYMS))
    # accept answers that mention exactly one label ("The car will turn left.")
    loose_matching: bool = False

    def __post_init__(self) -> None:
        if (len(self.control), len(self.turn), len(self.lane)) != (4, 4, 5):
            raise ValueError("vocabulary sizes must be 4/4/5")
        known = set(self.control) | set(self.turn) | set(self.lane)
        stray = [v for v in self.synonym_map.values() if v not in known]
        if stray:
            raise ValueError(f"synonyms map onto unknown labels: {stray}")

    def labels(self, family: str) -> tuple[str, ...]:
        if family not in ACTION_FAMILIES:
            raise KeyError(family)
        return getattr(self, family)

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.control), len(self.turn), len(self.lane)

    def synonyms_for(self, family: str) -> dict[str, str]:
        labels = set(self.labels(family))
        return {k: v for k, v in self.synonym_map.items() if v in labels}


DEFAULT_VOCABULARY = ActionVocabulary()
