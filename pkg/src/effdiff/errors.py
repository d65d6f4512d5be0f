from __future__ import annotations


class EffdiffError(Exception):
    """Base class for errors raised by this package."""


class CatalogError(EffdiffError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class DomainError(EffdiffError, ValueError):
    pass


class ConfigError(EffdiffError, ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


class IntegrationError(EffdiffError, RuntimeError):
    def __init__(self, message: str, particle: int | None = None, step: int | None = None):
        self.particle = particle
        self.step = step
        super().__init__(message)
