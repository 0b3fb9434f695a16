"""
异常定义

每个异常都带有 return code, 命令行层据此生成 JSON 响应:
1 = 领域错误, 2 = 用法错误, 3 = I/O 错误
"""
from typing import Any


class CKError(Exception):
    """所有领域错误的基类"""
    code: int = 1

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_envelope(self) -> dict[str, Any]:
        envelope: dict[str, Any] = {"return": self.code, "error": self.message}
        if self.details:
            envelope["details"] = self.details
        return envelope


class UsageError(CKError):
    code = 2


class IoFailure(CKError):
    code = 3


class LockTimeout(IoFailure):
    pass


# ============ registry ============

class DuplicateAlias(CKError):
    pass


class InvalidAlias(CKError):
    pass


class UnknownKind(CKError):
    pass


class NotFound(CKError):
    pass


class AmbiguousKey(CKError):
    pass


# ============ envdetect ============

class PluginInvalid(CKError):
    pass


class UnsupportedDialect(CKError):
    pass


# ============ metapkg ============

class UnresolvedDependency(CKError):
    def __init__(self, dep_name: str):
        super().__init__(f"无法解析依赖: {dep_name}", dependency=dep_name)
        self.dep_name = dep_name


class DependencyCycle(CKError):
    def __init__(self, path: list[str]):
        super().__init__(f"检测到依赖环: {' -> '.join(path)}", cycle=path)
        self.path = path


class ChecksumMismatch(CKError):
    def __init__(self, url: str, expected: str, actual: str):
        super().__init__(
            f"校验和不匹配: {url} (期望 {expected}, 实际 {actual})",
            url=url, expected=expected, actual=actual,
        )
        self.expected = expected
        self.actual = actual


class StepFailed(CKError):
    def __init__(self, step_index: int, exit_code: int | None, message: str = ""):
        super().__init__(
            f"安装步骤 {step_index} 失败, 退出码 {exit_code}{': ' + message if message else ''}",
            step_index=step_index, exit_code=exit_code,
        )
        self.step_index = step_index
        self.exit_code = exit_code


class AlreadyInstalled(CKError):
    pass


# ============ pipeline ============

class UnboundDependency(CKError):
    pass


class UnknownParameter(CKError):
    pass


class ValueOutOfDomain(CKError):
    pass


class BuildFailed(CKError):
    def __init__(self, exit_code: int | None, log_path: str):
        super().__init__(f"构建失败, 退出码 {exit_code}, 日志: {log_path}",
                         exit_code=exit_code, log_path=log_path)
        self.exit_code = exit_code
        self.log_path = log_path


class MissingResultFile(CKError):
    pass


class InvalidResultFile(CKError):
    pass


class PatternNotMatched(CKError):
    def __init__(self, characteristic: str):
        super().__init__(f"输出中未匹配到特征: {characteristic}", characteristic=characteristic)
        self.characteristic = characteristic


class NonFiniteValue(CKError):
    pass


class EmptySamples(CKError):
    pass


class InconsistentKeys(CKError):
    pass


# ============ autotune ============

class SpaceTooLarge(CKError):
    def __init__(self, cardinality: int, cap: int):
        super().__init__(f"设计空间过大: {cardinality} > {cap}", cardinality=cardinality, cap=cap)
        self.cardinality = cardinality
        self.cap = cap


class MissingObjectiveKey(CKError):
    pass


# ============ solution ============

class TaskFailed(CKError):
    def __init__(self, task_index: int, message: str, log_path: str | None = None):
        super().__init__(f"任务 {task_index} 失败: {message}",
                         task_index=task_index, log_path=log_path)
        self.task_index = task_index
        self.log_path = log_path


class TargetOsMismatch(CKError):
    pass


class SchemaViolation(CKError):
    pass


class InitIncomplete(CKError):
    pass


class FormatVersionMismatch(CKError):
    pass
