"""Exception hierarchy.

Every error carries the structured fields named in its constructor so that
callers (and the CLI exit-code mapping) can inspect them without parsing
messages.
"""

from __future__ import annotations


class FicalError(Exception):
    """Base class for all package errors."""


class ConfigError(FicalError):
    pass


class DomainError(FicalError):
    """Protocol or content failure (exit code 2 at the CLI)."""


class TransportError(FicalError):
    """Network or backend failure (exit code 3 at the CLI)."""


# -- dataset ingestion -------------------------------------------------------


class MalformedRecord(DomainError):
    def __init__(self, line: int, reason: str = "") -> None:
        self.line = line
        self.reason = reason
        super().__init__(f"malformed record at line {line}: {reason}".rstrip(": "))


class InvalidManifest(DomainError):
    pass


class UnknownTool(DomainError):
    def __init__(self, tool_name: str) -> None:
        self.tool_name = tool_name
        super().__init__(f"unknown tool {tool_name!r}")


class SchemaViolation(DomainError):
    def __init__(self, instance_id: str, parameter: str, detail: str = "") -> None:
        self.instance_id = instance_id
        self.parameter = parameter
        super().__init__(
            f"instance {instance_id!r}: parameter {parameter!r} {detail}".rstrip()
        )


# -- llm gateway ---------------------------------------------------------------


class EmptyText(FicalError, ValueError):
    pass


class BackendUnreachable(TransportError):
    pass


class BackendRejected(TransportError):
    def __init__(self, status: int, message: str) -> None:
        self.status = status
        self.message = message
        super().__init__(f"backend rejected request ({status}): {message}")


class Timeout(TransportError):
    def __init__(self, elapsed: float) -> None:
        self.elapsed = elapsed
        super().__init__(f"backend timed out after {elapsed:.2f}s")


# -- knowledge compendium generation ------------------------------------------


class EmptyDataset(DomainError):
    pass


class GenerationFailed(DomainError):
    def __init__(self, attempts: int, last_error: Exception | None = None) -> None:
        self.attempts = attempts
        self.last_error = last_error
        super().__init__(f"compendium generation failed after {attempts} attempts: {last_error}")


class LeakageDetected(DomainError):
    def __init__(self, tool_name: str, span: str) -> None:
        self.tool_name = tool_name
        self.span = span
        super().__init__(f"compendium entry {tool_name!r} leaks private text: {span!r}")


class CompendiumParseError(DomainError):
    pass


class MissingTool(CompendiumParseError):
    def __init__(self, tool_name: str) -> None:
        self.tool_name = tool_name
        super().__init__(f"compendium has no block for tool {tool_name!r}")


class MissingSection(CompendiumParseError):
    def __init__(self, tool_name: str, section: str) -> None:
        self.tool_name = tool_name
        self.section = section
        super().__init__(f"tool {tool_name!r} is missing section {section!r}")


# -- federation ------------------------------------------------------------------


class DuplicateClient(DomainError):
    def __init__(self, client_id: str) -> None:
        self.client_id = client_id
        super().__init__(f"duplicate compendium from client {client_id!r}")


class EmptyAggregation(DomainError):
    pass


class NotAggregated(DomainError):
    """The global compendium was requested while the server is still collecting."""


class UploadRejected(TransportError):
    def __init__(self, client_id: str, reason: str) -> None:
        self.client_id = client_id
        self.reason = reason
        super().__init__(f"upload from {client_id!r} rejected: {reason}")


class ClientTimeout(TransportError):
    def __init__(self, client_id: str) -> None:
        self.client_id = client_id
        super().__init__(f"client {client_id!r} did not complete before the deadline")


# -- tool learning and utilizing ---------------------------------------------------


class EmbeddingFailed(DomainError):
    def __init__(self, chunk_id: str, cause: Exception | None = None) -> None:
        self.chunk_id = chunk_id
        super().__init__(f"embedding failed for chunk {chunk_id!r}: {cause}")


class EmptyIndex(DomainError):
    pass


class DimMismatch(DomainError):
    pass


class FingerprintMismatch(DomainError):
    def __init__(self, store: str, embedder: str) -> None:
        self.store = store
        self.embedder = embedder
        super().__init__(f"store built with {store!r}, queried with {embedder!r}")


class BudgetTooSmall(DomainError):
    pass


class ContextOverflow(DomainError):
    def __init__(self, required: int, budget: int) -> None:
        self.required = required
        self.budget = budget
        super().__init__(f"prompt needs {required} tokens, budget is {budget}")


class UnparseableAgentOutput(DomainError):
    def __init__(self, attempts: int, raw: str) -> None:
        self.attempts = attempts
        self.raw = raw
        super().__init__(f"no parseable tool call after {attempts} attempts")


class UnparseableJudgeOutput(DomainError):
    def __init__(self, attempts: int, raw: str) -> None:
        self.attempts = attempts
        self.raw = raw
        super().__init__(f"judge gave no yes/no verdict after {attempts} attempts")
