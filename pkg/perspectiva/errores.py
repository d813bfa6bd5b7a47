# perspectiva/errores.py
"""Errores del laboratorio. Igual que HTTPException: un código y un detalle."""

from __future__ import annotations


class LabError(Exception):
    status: int = 2

    def __init__(self, detail: str, status: int | None = None):
        super().__init__(detail)
        self.detail = detail
        if status is not None:
            self.status = status

    def as_dict(self) -> dict:
        return {"error": type(self).__name__, "status": self.status, "detail": self.detail}


class ConfigError(LabError):
    status = 3


class ShapeMismatchError(LabError):
    status = 4


class ModeMismatchError(LabError):
    status = 5


class TerminalStepError(LabError):
    status = 6


class FoodEatenError(LabError):
    status = 7


class TrajectoryError(LabError):
    status = 8


class EmptyBufferError(LabError):
    status = 9


class CheckpointError(LabError):
    status = 10


class DegenerateSplitError(LabError):
    status = 11


class MalformedTraceError(LabError):
    status = 12


class IncompleteRunError(LabError):
    status = 13
