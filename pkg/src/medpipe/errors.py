"""Exception hierarchy shared by every layer.

Each error carries a stable ``code`` used by the gateway error bodies and
the CLI exit-code table.
"""

from __future__ import annotations


class MedpipeError(Exception):
    code = "ERROR"

    def __init__(self, message: str = "", detail: object = None) -> None:
        super().__init__(message or self.code)
        self.message = message or self.code
        self.detail = detail


# pipeline documents
class PipelineSyntaxError(MedpipeError, ValueError):
    code = "SYNTAX_ERROR"


class UnknownTaskRef(MedpipeError):
    code = "UNKNOWN_TASK_REF"


class UnknownActorRef(MedpipeError):
    code = "UNKNOWN_ACTOR_REF"


class UnknownPortRef(MedpipeError):
    code = "UNKNOWN_PORT_REF"


class InvalidPipeline(MedpipeError):
    code = "INVALID_PIPELINE"


class UnknownPipeline(MedpipeError):
    code = "UNKNOWN_PIPELINE"


# catalog / study sets
class PredicateSyntaxError(MedpipeError, ValueError):
    code = "PREDICATE_SYNTAX_ERROR"


class UnknownTag(MedpipeError):
    code = "UNKNOWN_TAG"


class UnknownMember(MedpipeError):
    code = "UNKNOWN_MEMBER"


class UnknownStudySet(MedpipeError):
    code = "UNKNOWN_STUDY_SET"


class DuplicateImage(MedpipeError, ValueError):
    code = "DUPLICATE_IMAGE"


class InvalidPolicy(MedpipeError, ValueError):
    code = "INVALID_POLICY"


# planning
class NoEligibleSite(MedpipeError):
    code = "NO_ELIGIBLE_SITE"

    def __init__(self, task_id: str) -> None:
        super().__init__(f"no site has the actor of task {task_id!r} installed", {"task_id": task_id})
        self.task_id = task_id


class EmptyStudySet(MedpipeError, ValueError):
    code = "EMPTY_STUDY_SET"


class UnknownPlan(MedpipeError):
    code = "UNKNOWN_PLAN"


# glueing
class DuplicateBackend(MedpipeError, ValueError):
    code = "DUPLICATE_BACKEND"


class UnknownBackend(MedpipeError):
    code = "UNKNOWN_BACKEND"


class InvalidJobDescription(MedpipeError, ValueError):
    code = "INVALID_JOB_DESCRIPTION"


class UnknownHandle(MedpipeError):
    code = "UNKNOWN_HANDLE"


class SourceMissing(MedpipeError, FileNotFoundError):
    code = "SOURCE_MISSING"


class IllegalTransition(MedpipeError, ValueError):
    code = "ILLEGAL_TRANSITION"


# enactment
class EnactmentFailed(MedpipeError):
    code = "ENACTMENT_FAILED"

    def __init__(self, task_id: str, diagnostics: str, result: object = None) -> None:
        super().__init__(f"task {task_id!r} exhausted its retries: {diagnostics}", {"task_id": task_id})
        self.task_id = task_id
        self.diagnostics = diagnostics
        self.result = result


class Canceled(MedpipeError):
    code = "CANCELED"

    def __init__(self, execution_id: str, result: object = None) -> None:
        super().__init__(f"execution {execution_id} was canceled", {"execution_id": execution_id})
        self.execution_id = execution_id
        self.result = result


class UnknownExecution(MedpipeError):
    code = "UNKNOWN_EXECUTION"


class UnknownPort(MedpipeError):
    code = "UNKNOWN_PORT"


# provenance
class StorageError(MedpipeError, OSError):
    code = "STORAGE_ERROR"


class UnknownArtifact(MedpipeError):
    code = "UNKNOWN_ARTIFACT"
