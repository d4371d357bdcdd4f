"""Exception types raised across the pipeline."""

from __future__ import annotations

from collections.abc import Iterable


class CapfuseError(Exception):
    """Base class for all pipeline errors."""


# dataset

class MalformedRow(CapfuseError, ValueError):
    def __init__(self, line: int, reason: str = "") -> None:
        self.line = line
        msg = f"malformed manifest row at line {line}"
        super().__init__(f"{msg}: {reason}" if reason else msg)


class UnknownClassName(CapfuseError, ValueError):
    def __init__(self, name: str, line: int | None = None) -> None:
        self.name = name
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"unknown class name {name!r}{where}")


class DuplicateSampleId(CapfuseError, ValueError):
    def __init__(self, sample_id: str) -> None:
        self.sample_id = sample_id
        super().__init__(f"duplicate sample_id {sample_id!r}")


class MixedTasks(CapfuseError, ValueError):
    def __init__(self, task_ids: Iterable[str]) -> None:
        self.task_ids = sorted(set(task_ids))
        super().__init__(f"manifests belong to different tasks: {self.task_ids}")


# captioning

class BackendFailure(CapfuseError, RuntimeError):
    def __init__(self, backend_id: str, cause: BaseException | str) -> None:
        self.backend_id = backend_id
        self.cause = cause
        super().__init__(f"backend {backend_id!r} failed: {cause}")


class UnreadableImage(CapfuseError, OSError):
    def __init__(self, path: object) -> None:
        self.path = path
        super().__init__(f"cannot read image {path}")


class EmptyPhraseBank(CapfuseError, ValueError):
    def __init__(self) -> None:
        super().__init__("phrase bank is empty")


class CacheCorrupt(CapfuseError, ValueError):
    def __init__(self, line: int, path: object = None, reason: str = "") -> None:
        self.line = line
        self.path = path
        msg = f"corrupt cache line {line}"
        if path is not None:
            msg += f" in {path}"
        super().__init__(f"{msg}: {reason}" if reason else msg)


# classification

class MissingClassInTrain(CapfuseError, ValueError):
    def __init__(self, class_name: str) -> None:
        self.class_name = class_name
        super().__init__(f"no training samples for class {class_name!r}")


class ModalityMismatch(CapfuseError, TypeError):
    def __init__(self, expected: str, got: str) -> None:
        self.expected = expected
        self.got = got
        super().__init__(f"model expects {expected} input, got {got}")


class NotTrained(CapfuseError, RuntimeError):
    pass


class MissingCaption(CapfuseError, KeyError):
    def __init__(self, sample_ids: Iterable[str]) -> None:
        self.sample_ids = list(sample_ids)
        super().__init__(f"no caption for {len(self.sample_ids)} sample(s): {self.sample_ids}")

    def __str__(self) -> str:
        return str(self.args[0])


# fusion / evaluation

class LengthMismatch(CapfuseError, ValueError):
    pass


class WeightOutOfRange(CapfuseError, ValueError):
    def __init__(self, w: float) -> None:
        self.w = w
        super().__init__(f"fusion weight must lie in [0, 1], got {w}")


class SampleSetMismatch(CapfuseError, ValueError):
    def __init__(self, only_left: Iterable[str], only_right: Iterable[str]) -> None:
        self.only_left = sorted(only_left)
        self.only_right = sorted(only_right)
        super().__init__(
            f"sample sets differ: only in image matrix {self.only_left}, "
            f"only in text matrix {self.only_right}"
        )


class GridMismatch(CapfuseError, ValueError):
    pass


class EmptyInput(CapfuseError, ValueError):
    pass


class IndexOutOfRange(CapfuseError, IndexError):
    pass
