from __future__ import annotations

from enum import IntEnum


class StageLabel(IntEnum):
    WAKE = 0
    S1 = 1
    S2 = 2
    SWS = 3
    REM = 4

    @property
    def short(self) -> str:
        return _SHORT[self]

    @classmethod
    def parse(cls, text: str) -> "StageLabel":
        """Accept an enum name (``WAKE``), short name (``Wake``) or integer code."""
        t = str(text).strip()
        for s in cls:
            if t.upper() == s.name or t == s.short or t == str(int(s)):
                return s
        raise ValueError(f"unknown stage {text!r}")


_SHORT = {StageLabel.WAKE: "Wake", StageLabel.S1: "S1", StageLabel.S2: "S2",
          StageLabel.SWS: "SWS", StageLabel.REM: "REM"}

STAGES = tuple(StageLabel)
N_STAGES = len(STAGES)
