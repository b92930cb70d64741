"""Error type shared by every layer.

Each failure carries a stable upper-case ``code`` so callers (and the CLI)
can branch on it without parsing messages.
"""

from __future__ import annotations


class AxmlError(Exception):
    """An engine or store failure identified by a stable code."""

    def __init__(self, code: str, message: str = "", **details):
        self.code = code
        self.message = message
        self.details = details
        super().__init__(f"{code}: {message}" if message else code)


class MalformedXml(AxmlError):
    def __init__(self, line: int, col: int, reason: str):
        super().__init__("MALFORMED", f"line {line}, col {col}: {reason}",
                         line=line, col=col, reason=reason)
        self.line = line
        self.col = col
        self.reason = reason


class SchemaError(AxmlError):
    """A parsed tree does not follow the expected file schema."""

    def __init__(self, path: str, reason: str, violations=()):
        super().__init__("SCHEMA", f"{path}: {reason}", path=path, reason=reason)
        self.path = path
        self.reason = reason
        self.violations = list(violations)


class PathSyntaxError(AxmlError):
    def __init__(self, position: int, reason: str, text: str = ""):
        super().__init__("PATH_SYNTAX", f"at {position}: {reason} in {text!r}",
                         position=position, reason=reason)
        self.position = position
        self.reason = reason


# Codes that mean the store itself is damaged; the CLI exits with 2 on these.
CORRUPTION_CODES = frozenset({"STORE_CORRUPT"})
