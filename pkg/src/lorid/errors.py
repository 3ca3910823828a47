"""Exception types shared across the package."""

from __future__ import annotations


class LoridError(Exception):
    """Base class for every error this package raises on purpose."""


class EmptyCorpus(LoridError):
    """Raised when an operation that needs problems receives none."""


class InvalidCorpus(LoridError):
    """Raised when corpus validation rejects the input (duplicate ids, dangling origins)."""

    def __init__(self, report):
        self.report = report
        super().__init__(
            "corpus rejected: %d duplicate id(s), %d dangling origin(s)"
            % (len(report.duplicate_ids), len(report.dangling_origins))
        )


class MalformedRecord(LoridError):
    """A corpus file record that cannot be parsed; carries the 1-based line number."""

    def __init__(self, path, line_number: int, reason: str):
        self.path = str(path)
        self.line_number = line_number
        self.reason = reason
        super().__init__(f"{path}:{line_number}: {reason}")


class NoAnswerFound(LoridError):
    """No extraction strategy produced a candidate answer from a completion."""


class ScriptMiss(LoridError):
    """A scripted backend was asked for a (role, problem, iteration) it does not script."""


class TransportFailure(LoridError):
    """The HTTP backend could not reach the server at all."""


class ProtocolFailure(LoridError):
    """The server answered, but not in the shape the wire contract promises."""


class RetriesExhausted(LoridError):
    """A generation request kept failing after the whole retry budget was spent."""


class BackendUnavailable(LoridError):
    """A run was asked to start against a backend whose probe did not come back ready."""


class MissingGold(LoridError):
    """One or more problems lack the gold reasoning/answer an operation requires."""

    def __init__(self, problem_ids):
        self.problem_ids = tuple(problem_ids)
        shown = ", ".join(self.problem_ids[:5])
        extra = "" if len(self.problem_ids) <= 5 else f" (+{len(self.problem_ids) - 5} more)"
        super().__init__(f"missing gold reasoning/answer for: {shown}{extra}")


class MissingKnowledge(LoridError):
    """A problem's origin has no knowledge entry to share."""

    def __init__(self, origin_id: str):
        self.origin_id = origin_id
        super().__init__(f"no knowledge recorded for origin {origin_id!r}")


class IdMismatch(LoridError):
    """Transcripts and problems do not cover the same id set."""

    def __init__(self, unmatched_transcripts, unmatched_problems):
        self.unmatched_transcripts = tuple(unmatched_transcripts)
        self.unmatched_problems = tuple(unmatched_problems)
        super().__init__(
            "id mismatch between transcripts and problems: "
            f"transcripts without problems {list(self.unmatched_transcripts)[:5]}, "
            f"problems without transcripts {list(self.unmatched_problems)[:5]}"
        )


class RunAborted(LoridError):
    """A batch run crossed its failure-abort threshold and was stopped early."""
