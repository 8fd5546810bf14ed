from __future__ import annotations

from enum import Enum


class Action(str, Enum):
    LEFT = "Left"
    STRAIGHT = "Straight"
    RIGHT = "Right"

    def __str__(self):
        return self.value

    @property
    def index(self) -> int:
        return CLASSES.index(self)

    @property
    def turning(self) -> bool:
        return self is not Action.STRAIGHT

    def mirrored(self) -> "Action":
        return {Action.LEFT: Action.RIGHT, Action.RIGHT: Action.LEFT}.get(self, self)


# Order of every per-class vector in the package. Left and Right sit at the
# two ends so a horizontal mirror is a reversal.
CLASSES: tuple[Action, ...] = (Action.LEFT, Action.STRAIGHT, Action.RIGHT)
K = len(CLASSES)


def parse_action(text: str) -> Action:
    t = text.strip().lower()
    for a in CLASSES:
        if a.value.lower() == t or a.value[0].lower() == t:
            return a
    raise ValueError(f"unknown action {text!r}")
