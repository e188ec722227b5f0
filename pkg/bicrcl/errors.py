"""
Error types for the Bi-CRCL engine

Every failure the engine reports is a CRCLError subclass. Errors carry an
optional context (session index, operation name) that the experiment runner
fills in while the error propagates, so the CLI can print one structured
record naming where the run stopped.
"""

from typing import Dict, List, Optional, Sequence


class CRCLError(Exception):
    """Base class for all engine errors"""

    code = "crcl_error"

    def __init__(self, message: str, **context):
        super().__init__(message)
        self.message = message
        self.context = dict(context)

    def with_context(self, **context) -> "CRCLError":
        """Attach context keys that are not already set, return self"""
        for key, value in context.items():
            self.context.setdefault(key, value)
        return self

    def to_record(self) -> Dict:
        """
        Structured form of the error

        Returns:
            Dictionary with error code, message and context
        """
        record = {'error': self.code, 'message': self.message}
        record.update(self.context)
        return record


class InvalidInputError(CRCLError):
    code = "invalid_input"


class InvalidParameterError(CRCLError):
    code = "invalid_parameter"


class SingularityError(CRCLError):
    code = "singular_matrix"

    def __init__(self, message: str, pivot: Optional[int] = None, **context):
        super().__init__(message, pivot=pivot, **context)
        self.pivot = pivot


class ShapeError(CRCLError):
    code = "shape_mismatch"


class TraceError(CRCLError):
    code = "stale_trace"


class LabelError(CRCLError):
    code = "label_out_of_range"


class MissingPrototypeError(CRCLError):
    code = "missing_prototype"

    def __init__(self, message: str, class_id: Optional[int] = None, **context):
        super().__init__(message, class_id=class_id, **context)
        self.class_id = class_id


class EmptyTaskError(CRCLError):
    code = "empty_task"


class StateError(CRCLError):
    code = "invalid_state"


class InvalidExpansionError(CRCLError):
    code = "invalid_expansion"


class EmptyBatchError(CRCLError):
    code = "empty_batch"


class ParseError(CRCLError):
    code = "parse_error"

    def __init__(self, message: str, path: str = "", line: Optional[int] = None,
                 offset: Optional[int] = None, **context):
        super().__init__(message, path=path, line=line, offset=offset, **context)
        self.path = path
        self.line = line
        self.offset = offset


class LabelGapError(CRCLError):
    code = "label_gap"

    def __init__(self, message: str, missing: Sequence[int] = (), **context):
        super().__init__(message, missing=list(missing), **context)
        self.missing = list(missing)


class InvalidSplitError(CRCLError):
    code = "invalid_split"


class EmptyEvalError(CRCLError):
    code = "empty_eval"


class CheckpointError(CRCLError):
    code = "checkpoint_error"


class ConfigError(CRCLError):
    """Aggregated configuration violations"""

    code = "invalid_config"

    def __init__(self, errors: List[str], **context):
        message = f"{len(errors)} configuration error(s):\n" + "\n".join(
            f"  - {error}" for error in errors
        )
        super().__init__(message, errors=list(errors), **context)
        self.errors = list(errors)
