from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str
    subject: str | None = None

    def __str__(self) -> str:
        return self.message


class ModelError(ValueError):
    """Raised when a document does not describe a valid model."""

    def __init__(self, diagnostics: list[Diagnostic]):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(d.message for d in self.diagnostics))
