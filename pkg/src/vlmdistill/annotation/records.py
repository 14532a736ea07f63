from __future__ import annotations

from dataclasses import dataclass

from .prompts import DEFAULT_VOCABULARY, ActionVocabulary

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class FreeformAnnotation:
    current_action: str
    future_action: str
    reasoning: str

    def __post_init__(self) -> None:
        for name in ("current_action", "future_action", "reasoning"):
            if not getattr(self, name).strip():
                raise ValueError(f"{name} must be non-empty")

    def fields(self) -> dict[str, str]:
        return {
            "current": self.current_action,
            "future": self.future_action,
            "reasoning": self.reasoning,
        }


@dataclass(frozen=True)
class StructuredActionAnnotation:
    control_action: str
    turn_action: str
    lane_action: str

    def validate(self, vocab: ActionVocabulary = DEFAULT_VOCABULARY) -> None:
        for family, label in zip(("control", "turn", "lane"), self.as_tuple()):
            if label not in vocab.labels(family):
                raise ValueError(f"{label!r} is not a {family} label")

    def as_tuple(self) -> tuple[str, str, str]:
        return self.control_action, self.turn_action, self.lane_action


@dataclass(frozen=True)
class AnnotationRecord:
    sample_id: str
    freeform: FreeformAnnotation
    actions: StructuredActionAnnotation
    teacher_id: str
    raw_p1: str
    raw_p2: str
    created_at: str
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "sample_id": self.sample_id,
            "teacher_id": self.teacher_id,
            "freeform": self.freeform.fields(),
            "actions": {
                "control": self.actions.control_action,
                "turn": self.actions.turn_action,
                "lane": self.actions.lane_action,
            },
            "raw": {"p1": self.raw_p1, "p2": self.raw_p2},
            "created_at": self.created_at,
        }

    @classmethod
    def from_dict(cls, data: dict) -> AnnotationRecord:
        ff, act, raw = data["freeform"], data["actions"], data["raw"]
        return cls(
            sample_id=data["sample_id"],
            freeform=FreeformAnnotation(ff["current"], ff["future"], ff["reasoning"]),
            actions=StructuredActionAnnotation(act["control"], act["turn"], act["lane"]),
            teacher_id=data["teacher_id"],
            raw_p1=raw["p1"],
            raw_p2=raw["p2"],
            created_at=data["created_at"],
            schema_version=data["schema_version"],
        )

    def without_timestamp(self) -> dict:
        d = self.to_dict()
        d.pop("created_at")
        return d
