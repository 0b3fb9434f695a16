"""
数据模型定义
"""
import json
import re
from enum import Enum
from datetime import datetime
from pathlib import Path
from typing import Annotated, Any, Literal, Optional, Union

from pydantic import AfterValidator, BaseModel, Field, field_validator, model_validator
from pydantic_core import core_schema

from utils import canonical_dumps, sha256_text, utc_now, utc_now_iso

ALIAS_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.-]*$")
HEX16_RE = re.compile(r"^[0-9a-f]{16}$")
ENV_NAME_RE = re.compile(r"^[A-Z][A-Z0-9_]*$")
CHARACTERISTIC_RE = re.compile(r"^[a-z][a-z0-9_]*$")
PLACEHOLDER_RE = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")

BUNDLE_FORMAT_VERSION = 1
MANIFEST_FORMAT_VERSION = 1


class ComponentKind(str, Enum):
    """组件类型"""
    SOFT = "soft"
    PACKAGE = "package"
    PROGRAM = "program"
    ENV = "env"
    EXPERIMENT = "experiment"
    SOLUTION = "solution"
    DATASET_STUB = "dataset-stub"


KINDS = tuple(k.value for k in ComponentKind)


def _normalize_tags(tags: list[str]) -> list[str]:
    normalized = set()
    for tag in tags:
        if not isinstance(tag, str) or not tag or any(c.isspace() for c in tag):
            raise ValueError(f"非法标签: {tag!r}")
        normalized.add(tag.lower())
    return sorted(normalized)


# 标签以排序后的列表保存, 保证序列化确定
Tags = Annotated[list[str], AfterValidator(_normalize_tags)]


# ============ 版本 ============

_VERSION_SPLIT_RE = re.compile(r"[._-]")
_DIGITS_RE = re.compile(r"^[0-9]+$")


def _compare_component(x: int | str, y: int | str) -> int:
    if isinstance(x, int) and isinstance(y, int):
        return (x > y) - (x < y)
    if isinstance(x, str) and isinstance(y, str):
        bx, by = x.encode("utf-8"), y.encode("utf-8")
        return (bx > by) - (bx < by)
    # 数字段总是小于文本段
    return -1 if isinstance(x, int) else 1


class Version:
    """
    软件版本

    raw 按 '.', '-', '_' 切分, 全数字的段按整数比较, 其余按字节序比较,
    缺失的尾部段视为数字 0
    """
    __slots__ = ("raw", "components")

    def __init__(self, raw: str):
        if not isinstance(raw, str) or not raw:
            raise ValueError(f"非法版本号: {raw!r}")
        self.raw = raw
        self.components: tuple[int | str, ...] = tuple(
            int(tok) if _DIGITS_RE.match(tok) else tok
            for tok in _VERSION_SPLIT_RE.split(raw)
        )

    @classmethod
    def parse(cls, value: "str | Version") -> "Version":
        if isinstance(value, Version):
            return value
        return cls(value)

    def compare(self, other: "Version") -> int:
        a, b = self.components, other.components
        for i in range(max(len(a), len(b))):
            c = _compare_component(a[i] if i < len(a) else 0, b[i] if i < len(b) else 0)
            if c:
                return c
        return 0

    def _normalized(self) -> tuple[int | str, ...]:
        comps = list(self.components)
        while comps and comps[-1] == 0 and isinstance(comps[-1], int):
            comps.pop()
        return tuple(comps)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Version):
            return NotImplemented
        return self.compare(other) == 0

    def __lt__(self, other: "Version") -> bool:
        return self.compare(other) < 0

    def __le__(self, other: "Version") -> bool:
        return self.compare(other) <= 0

    def __gt__(self, other: "Version") -> bool:
        return self.compare(other) > 0

    def __ge__(self, other: "Version") -> bool:
        return self.compare(other) >= 0

    def __hash__(self) -> int:
        return hash(self._normalized())

    def __str__(self) -> str:
        return self.raw

    def __repr__(self) -> str:
        return f"Version({self.raw!r})"

    @classmethod
    def __get_pydantic_core_schema__(cls, source_type: Any, handler: Any) -> core_schema.CoreSchema:
        return core_schema.no_info_plain_validator_function(
            cls.parse,
            serialization=core_schema.plain_serializer_function_ser_schema(str),
        )


# ============ registry ============

class ComponentId(BaseModel):
    """仓库组件的全局地址"""
    repo_alias: str
    kind: str
    uid: str
    alias: Optional[str] = None

    @field_validator("kind")
    @classmethod
    def _check_kind(cls, v: str) -> str:
        if v not in KINDS:
            raise ValueError(f"未知组件类型: {v}")
        return v

    @field_validator("uid")
    @classmethod
    def _check_uid(cls, v: str) -> str:
        if not HEX16_RE.match(v):
            raise ValueError(f"非法UID: {v}")
        return v

    @field_validator("alias")
    @classmethod
    def _check_alias(cls, v: Optional[str]) -> Optional[str]:
        if v is not None and not ALIAS_RE.match(v):
            raise ValueError(f"非法别名: {v}")
        return v

    @property
    def key(self) -> str:
        return self.alias or self.uid

    def __str__(self) -> str:
        return f"{self.kind}:{self.key}"

    class Config:
        frozen = True


class EntryMeta(BaseModel):
    """组件元信息"""
    tags: Tags = Field(default_factory=list)
    meta: dict[str, Any] = Field(default_factory=dict)
    created_at: str = Field(default_factory=utc_now_iso)
    schema_version: int = Field(default=1, ge=1)

    @field_validator("meta")
    @classmethod
    def _check_meta(cls, v: dict[str, Any]) -> dict[str, Any]:
        if "tags" in v:
            raise ValueError("meta 中的 'tags' 键为保留字段")
        return v


class RepoDescriptor(BaseModel):
    """仓库描述"""
    root_path: Path
    alias: str
    uid: str


# ============ envdetect ============

class PlatformInfo(BaseModel):
    """平台指纹"""
    os_name: str = "unknown"
    os_version: str = "unknown"
    cpu_model: str = "unknown"
    cpu_count: int = Field(default=1, ge=1)
    memory_mb: int = Field(default=0, ge=0)
    hostname_hash: str = Field(default="0" * 16, pattern=r"^[0-9a-f]{16}$")


class ProbeSpec(BaseModel):
    """探测规则"""
    binary_names: list[str] = Field(..., min_length=1)
    search_roots: list[str] = Field(default_factory=list)
    version_args: list[str] = Field(default_factory=lambda: ["--version"])
    version_regex: str
    run_timeout_s: float = Field(default=10.0, gt=0)

    @field_validator("version_regex")
    @classmethod
    def _check_regex(cls, v: str) -> str:
        try:
            groups = re.compile(v).groups
        except re.error as e:
            raise ValueError(f"非法正则: {e}")
        if groups != 1:
            raise ValueError(f"version_regex 必须恰好包含一个捕获组, 实际 {groups}")
        return v


ENV_TEMPLATE_PLACEHOLDERS = {"path", "dir", "version"}


class SoftPlugin(BaseModel):
    """软件探测插件"""
    soft_name: str
    tags: Tags = Field(default_factory=list)
    probe: ProbeSpec
    env_template: dict[str, str] = Field(default_factory=dict)

    @field_validator("env_template")
    @classmethod
    def _check_env(cls, v: dict[str, str]) -> dict[str, str]:
        for name, template in v.items():
            if not ENV_NAME_RE.match(name):
                raise ValueError(f"非法环境变量名: {name}")
            unknown = set(PLACEHOLDER_RE.findall(template)) - ENV_TEMPLATE_PLACEHOLDERS
            if unknown:
                raise ValueError(f"模板 {name} 含未知占位符: {sorted(unknown)}")
        return v


class EnvEntry(BaseModel):
    """已探测或已安装的软件环境"""
    uid: Optional[str] = None
    soft_name: str
    soft_uid: Optional[ComponentId] = None
    tags: Tags = Field(default_factory=list)
    version: Version
    tool_path: str
    install_dir: Optional[str] = None
    env_vars: dict[str, str] = Field(default_factory=dict)
    platform: PlatformInfo = Field(default_factory=PlatformInfo)
    detected_at: datetime = Field(default_factory=utc_now)

    def summary(self) -> dict[str, Any]:
        """流水线状态中记录的依赖摘要"""
        return {
            "uid": self.uid,
            "soft_name": self.soft_name,
            "version": str(self.version),
            "tool_path": self.tool_path,
            "tags": self.tags,
        }


# ============ metapkg ============

class DependencySpec(BaseModel):
    """依赖声明"""
    name: str
    tags: Tags
    version_min: Optional[Version] = None
    version_max: Optional[Version] = None
    optional: bool = False
    allow_install: bool = True

    @field_validator("tags")
    @classmethod
    def _non_empty(cls, v: list[str]) -> list[str]:
        if not v:
            raise ValueError("依赖的 tags 不能为空")
        return v

    @model_validator(mode="after")
    def _check_bounds(self) -> "DependencySpec":
        if self.version_min is not None and self.version_max is not None:
            if self.version_min > self.version_max:
                raise ValueError(f"version_min {self.version_min} > version_max {self.version_max}")
        return self

    def accepts(self, tags: list[str], version: Version) -> bool:
        """标签超集且版本位于区间内"""
        if not set(self.tags) <= set(tags):
            return False
        if self.version_min is not None and version < self.version_min:
            return False
        if self.version_max is not None and version > self.version_max:
            return False
        return True


class DownloadStep(BaseModel):
    kind: Literal["download"] = "download"
    url: str
    sha256: str = Field(..., pattern=r"^[0-9a-f]{64}$")
    filename: Optional[str] = None

    @property
    def target_name(self) -> str:
        return self.filename or self.url.rstrip("/").rsplit("/", 1)[-1]


class ExtractStep(BaseModel):
    kind: Literal["extract"] = "extract"
    archive: str
    archive_format: Literal["tar-gz", "zip"]
    dest: str = "."


class ScriptStep(BaseModel):
    kind: Literal["script"] = "script"
    command: list[str] = Field(..., min_length=1)
    workdir: str = "."


InstallStep = Annotated[Union[DownloadStep, ExtractStep, ScriptStep], Field(discriminator="kind")]


class PackageSpec(BaseModel):
    """元包: 描述如何获取并安装缺失的依赖"""
    package_name: str
    tags: Tags
    version: Version
    deps: list[DependencySpec] = Field(default_factory=list)
    install_steps: list[InstallStep] = Field(..., min_length=1)
    provides_env: dict[str, str] = Field(default_factory=dict)

    @field_validator("provides_env")
    @classmethod
    def _check_env(cls, v: dict[str, str]) -> dict[str, str]:
        for name in v:
            if not ENV_NAME_RE.match(name):
                raise ValueError(f"非法环境变量名: {name}")
        return v

    @property
    def key(self) -> str:
        return f"{self.package_name}-{self.version}"


class PlanActionKind(str, Enum):
    USE_ENV = "use-env"
    INSTALL = "install"


class PlanAction(BaseModel):
    action: PlanActionKind
    dep_names: list[str]
    env: Optional[EnvEntry] = None
    package: Optional[PackageSpec] = None

    class Config:
        use_enum_values = True


class ResolutionPlan(BaseModel):
    """依赖解析计划, 按拓扑序排列"""
    actions: list[PlanAction] = Field(default_factory=list)
    binding: dict[str, EnvEntry] = Field(default_factory=dict)
    skipped: list[str] = Field(default_factory=list)
    conflicts: list[str] = Field(default_factory=list)

    def installs(self) -> list[PlanAction]:
        return [a for a in self.actions if a.action == PlanActionKind.INSTALL]


# ============ autotune: 参数与设计空间 ============

def _json_key(value: Any) -> str:
    return json.dumps(value, sort_keys=True)


class CategoricalDomain(BaseModel):
    type: Literal["categorical"] = "categorical"
    values: list[Any] = Field(..., min_length=1)

    @field_validator("values")
    @classmethod
    def _distinct(cls, v: list[Any]) -> list[Any]:
        if len({_json_key(x) for x in v}) != len(v):
            raise ValueError("categorical 取值必须互不相同")
        return v

    def size(self) -> int:
        return len(self.values)

    def value_at(self, index: int) -> Any:
        return self.values[index]

    def contains(self, value: Any) -> bool:
        key = _json_key(value)
        return any(_json_key(x) == key for x in self.values)


class IntRangeDomain(BaseModel):
    type: Literal["int-range"] = "int-range"
    lo: int
    hi: int
    step: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _check_range(self) -> "IntRangeDomain":
        if self.lo > self.hi:
            raise ValueError(f"lo {self.lo} > hi {self.hi}")
        return self

    def size(self) -> int:
        return (self.hi - self.lo) // self.step + 1

    def value_at(self, index: int) -> int:
        return self.lo + index * self.step

    def contains(self, value: Any) -> bool:
        if not isinstance(value, int) or isinstance(value, bool):
            return False
        return self.lo <= value <= self.hi and (value - self.lo) % self.step == 0


class BooleanDomain(BaseModel):
    type: Literal["boolean"] = "boolean"

    def size(self) -> int:
        return 2

    def value_at(self, index: int) -> bool:
        return (False, True)[index]

    def contains(self, value: Any) -> bool:
        return isinstance(value, bool)


ParameterDomain = Annotated[
    Union[CategoricalDomain, IntRangeDomain, BooleanDomain], Field(discriminator="type")
]


class ParameterDecl(BaseModel):
    """可调参数声明, pointer 为指向流水线状态的 JSON Pointer"""
    pointer: str = Field(..., pattern=r"^/")
    domain: ParameterDomain
    default: Any = None

    @model_validator(mode="after")
    def _check_default(self) -> "ParameterDecl":
        if self.default is None:
            self.default = self.domain.value_at(0)
        elif not self.domain.contains(self.default):
            raise ValueError(f"默认值 {self.default!r} 不在 {self.pointer} 的取值域内")
        return self

    def values(self) -> list[Any]:
        return [self.domain.value_at(i) for i in range(self.domain.size())]


class DesignSpace(BaseModel):
    """设计空间: 有序的参数声明列表"""
    params: list[ParameterDecl] = Field(default_factory=list)

    @field_validator("params")
    @classmethod
    def _distinct_pointers(cls, v: list[ParameterDecl]) -> list[ParameterDecl]:
        pointers = [p.pointer for p in v]
        if len(set(pointers)) != len(pointers):
            raise ValueError("设计空间中的 pointer 必须互不相同")
        return v

    @property
    def cardinality(self) -> int:
        total = 1
        for p in self.params:
            total *= p.domain.size()
        return total


# ============ pipeline ============

class ExtractorMode(str, Enum):
    RESULT_FILE = "result-file"
    STDOUT_REGEX = "stdout-regex"


class ExtractorSpec(BaseModel):
    """特征提取规则"""
    mode: ExtractorMode = ExtractorMode.RESULT_FILE
    result_file: str = "ck-result.json"
    patterns: dict[str, str] = Field(default_factory=dict)

    @field_validator("patterns")
    @classmethod
    def _check_patterns(cls, v: dict[str, str]) -> dict[str, str]:
        for name, pattern in v.items():
            if not CHARACTERISTIC_RE.match(name):
                raise ValueError(f"非法特征名: {name}")
            try:
                groups = re.compile(pattern).groups
            except re.error as e:
                raise ValueError(f"特征 {name} 的正则非法: {e}")
            if groups != 1:
                raise ValueError(f"特征 {name} 的正则必须恰好包含一个捕获组")
        return v

    @model_validator(mode="after")
    def _check_mode(self) -> "ExtractorSpec":
        if self.mode == ExtractorMode.STDOUT_REGEX and not self.patterns:
            raise ValueError("stdout-regex 模式需要至少一个 pattern")
        return self

    class Config:
        use_enum_values = True


class BuildSpec(BaseModel):
    argv: list[str] = Field(..., min_length=1)
    workdir: str = "."
    env_keys: list[str] = Field(default_factory=list)
    params: dict[str, Any] = Field(default_factory=dict)
    timeout_s: Optional[float] = Field(default=None, gt=0)


class RunSpec(BaseModel):
    argv: list[str] = Field(..., min_length=1)
    workdir: str = "."
    repeat_default: int = Field(default=1, ge=1)
    timeout_s: Optional[float] = Field(default=None, gt=0)
    params: dict[str, Any] = Field(default_factory=dict)


BUILTIN_PLACEHOLDERS = {"src_dir", "run_dir", "workdir", "rep"}
EXPOSED_PREFIXES = ("/build/params/", "/run/params/", "/env/")


class ProgramSpec(BaseModel):
    """程序元信息"""
    program_name: str
    deps: list[DependencySpec] = Field(default_factory=list)
    build: Optional[BuildSpec] = None
    run: RunSpec
    extractor: ExtractorSpec = Field(default_factory=ExtractorSpec)
    exposed: dict[str, ParameterDecl] = Field(default_factory=dict)
    units: dict[str, str] = Field(default_factory=dict)

    @model_validator(mode="before")
    @classmethod
    def _fill_pointers(cls, data: Any) -> Any:
        # exposed 的键即 pointer, 声明里可省略
        if isinstance(data, dict) and isinstance(data.get("exposed"), dict):
            exposed = {}
            for pointer, decl in data["exposed"].items():
                if isinstance(decl, dict) and "pointer" not in decl:
                    decl = {**decl, "pointer": pointer}
                exposed[pointer] = decl
            data = {**data, "exposed": exposed}
        return data

    @model_validator(mode="after")
    def _check_program(self) -> "ProgramSpec":
        for pointer, decl in self.exposed.items():
            if decl.pointer != pointer:
                raise ValueError(f"exposed 键 {pointer} 与声明 pointer {decl.pointer} 不一致")
            depth = 2 if pointer.startswith("/env/") else 3
            if not pointer.startswith(EXPOSED_PREFIXES) or pointer.count("/") != depth:
                raise ValueError(f"pointer 必须形如 /run/params/<name>, /build/params/<name> 或 /env/<NAME>: {pointer}")
        stages = [("run", self.run.argv)]
        if self.build is not None:
            stages.append(("build", self.build.argv))
        for stage, argv in stages:
            allowed = self.placeholders(stage)
            for arg in argv:
                unknown = set(PLACEHOLDER_RE.findall(arg)) - allowed
                if unknown:
                    raise ValueError(f"{stage} argv 引用了未声明的占位符: {sorted(unknown)}")
        return self

    def placeholders(self, stage: str) -> set[str]:
        """某阶段 argv 模板可用的占位符"""
        stage_spec = self.run if stage == "run" else self.build
        names = set(BUILTIN_PLACEHOLDERS)
        if stage_spec is not None:
            names |= set(stage_spec.params)
        prefix = f"/{stage}/params/"
        names |= {p[len(prefix):] for p in self.exposed if p.startswith(prefix)}
        return names


class PipelineState(BaseModel):
    """在各阶段之间流动的唯一状态文档"""
    deps: dict[str, Any] = Field(default_factory=dict)
    env: dict[str, str] = Field(default_factory=dict)
    build: dict[str, Any] = Field(default_factory=dict)
    run: dict[str, Any] = Field(default_factory=dict)
    meta: dict[str, Any] = Field(default_factory=dict)

    def document(self) -> dict[str, Any]:
        return self.model_dump(mode="json")

    def canonical(self) -> str:
        return canonical_dumps(self.document())


class RunStatus(str, Enum):
    OK = "ok"
    FAILED = "failed"
    TIMEOUT = "timeout"


class RunResult(BaseModel):
    """单次重复运行的结果"""
    repetition: int
    argv: list[str]
    run_dir: str
    stdout_path: str
    stderr_path: str
    # 子进程的工作目录, 结果文件相对它查找
    cwd: Optional[str] = None
    exit_code: Optional[int] = None
    status: RunStatus = RunStatus.OK
    wall_time_s: float = 0.0

    class Config:
        use_enum_values = True


# 特征: 名称 -> 有限数值
Characteristics = dict[str, float]


class CharacteristicStats(BaseModel):
    min: float
    max: float
    mean: float
    stddev: Optional[float] = None
    n: int = Field(..., ge=1)


AggregatedStats = dict[str, CharacteristicStats]


# ============ autotune: 实验记录与目标 ============

class RecordStatus(str, Enum):
    OK = "ok"
    FAILED = "failed"


class ExperimentRecord(BaseModel):
    """一个设计点的实验记录"""
    experiment_uid: str = Field(..., pattern=r"^[0-9a-f]{16}$")
    program: ComponentId
    point: dict[str, Any] = Field(default_factory=dict)
    repetitions: list[dict[str, float]] = Field(default_factory=list)
    aggregated: dict[str, CharacteristicStats] = Field(default_factory=dict)
    platform: PlatformInfo = Field(default_factory=PlatformInfo)
    env_fingerprint: str = ""
    timestamp: datetime = Field(default_factory=utc_now)
    status: RecordStatus = RecordStatus.OK
    errors: list[str] = Field(default_factory=list)
    source: Optional[str] = None
    workdir: Optional[str] = None

    class Config:
        use_enum_values = True

    @property
    def ok(self) -> bool:
        return self.status == RecordStatus.OK


class ObjectiveDirection(str, Enum):
    MINIMIZE = "minimize"
    MAXIMIZE = "maximize"


class AggregateField(str, Enum):
    MIN = "min"
    MEAN = "mean"


_TIME_SUFFIXES = ("_s", "_ms", "_us", "_ns")
_DIRECTION_ALIASES = {
    "min": ObjectiveDirection.MINIMIZE,
    "minimize": ObjectiveDirection.MINIMIZE,
    "max": ObjectiveDirection.MAXIMIZE,
    "maximize": ObjectiveDirection.MAXIMIZE,
}


def is_time_like(key: str) -> bool:
    return "time" in key or "latency" in key or key.endswith(_TIME_SUFFIXES)


class ObjectiveSpec(BaseModel):
    """优化目标"""
    key: str = Field(..., min_length=1)
    direction: ObjectiveDirection = ObjectiveDirection.MINIMIZE
    aggregate_field: Optional[AggregateField] = None

    @model_validator(mode="after")
    def _default_field(self) -> "ObjectiveSpec":
        # 时间类特征默认取 min (噪声最小), 其他取 mean
        if self.aggregate_field is None:
            self.aggregate_field = (AggregateField.MIN if is_time_like(self.key) else AggregateField.MEAN).value
        return self

    @classmethod
    def parse(cls, text: str) -> "ObjectiveSpec":
        """解析 'key:dir[:field]'"""
        parts = text.strip().split(":")
        if len(parts) not in (2, 3) or parts[1] not in _DIRECTION_ALIASES:
            raise ValueError(f"非法目标描述: {text!r}, 应为 key:min|max[:min|mean]")
        field = AggregateField(parts[2]) if len(parts) == 3 else None
        return cls(key=parts[0], direction=_DIRECTION_ALIASES[parts[1]], aggregate_field=field)

    @classmethod
    def parse_list(cls, text: str) -> list["ObjectiveSpec"]:
        return [cls.parse(part) for part in text.split(",") if part.strip()]

    class Config:
        use_enum_values = True


# ============ solution ============

class TaskAction(str, Enum):
    CREATE_ISOLATED_ENV = "create-isolated-env"
    INSTALL_PACKAGE = "install-package"
    DETECT_SOFTWARE = "detect-software"
    COMPILE_PROGRAM = "compile-program"
    CUSTOM_SCRIPT = "custom-script"


class TaskSpec(BaseModel):
    """解决方案中的一个准备任务"""
    action: TaskAction
    target: Optional[Union[str, list[str]]] = None
    params: dict[str, Any] = Field(default_factory=dict)
    skippable: bool = False

    @model_validator(mode="after")
    def _check_target(self) -> "TaskSpec":
        if self.action == TaskAction.CUSTOM_SCRIPT:
            if not isinstance(self.target, list) or not self.target:
                raise ValueError("custom-script 的 target 必须是非空 argv 列表")
        elif self.action in (TaskAction.INSTALL_PACKAGE, TaskAction.DETECT_SOFTWARE,
                             TaskAction.COMPILE_PROGRAM):
            if not isinstance(self.target, str) or not self.target:
                raise ValueError(f"{self.action.value} 需要组件引用 target")
        return self

    def content_hash(self) -> str:
        return sha256_text(canonical_dumps(self.model_dump(mode="json")))


class BenchmarkSpec(BaseModel):
    program: str
    repetitions: int = Field(default=1, ge=1)
    objectives: list[ObjectiveSpec] = Field(default_factory=list)
    space: Optional[list[ParameterDecl]] = None
    strategy: Literal["grid", "random"] = "grid"
    seed: int = Field(default=0, ge=0, lt=2**64)
    iterations: int = Field(default=10, ge=1)
    expected_keys: list[str] = Field(default_factory=list)
    parallel: int = Field(default=1, ge=1)


class ReportSpec(BaseModel):
    title: str = ""
    reference_bundle: Optional[str] = None


class SolutionManifest(BaseModel):
    """可执行的解决方案清单 (solution.json)"""
    format_version: Literal[1] = MANIFEST_FORMAT_VERSION
    name: str = Field(..., pattern=ALIAS_RE.pattern)
    target_os: str = "any"
    tasks: list[TaskSpec] = Field(..., min_length=1)
    benchmark: BenchmarkSpec
    report: ReportSpec = Field(default_factory=ReportSpec)


class TaskOutcome(str, Enum):
    OK = "ok"
    SKIPPED = "skipped"
    FAILED = "failed"


class TaskJournalEntry(BaseModel):
    index: int
    action: str
    task_hash: str
    status: TaskOutcome
    message: str = ""
    log_path: Optional[str] = None
    finished_at: datetime = Field(default_factory=utc_now)

    class Config:
        use_enum_values = True


class SolutionState(BaseModel):
    """solution-state.json 任务日志"""
    solution: str
    status: Literal["pending", "ok", "failed"] = "pending"
    tasks: list[TaskJournalEntry] = Field(default_factory=list)
    updated_at: datetime = Field(default_factory=utc_now)


class ResultBundle(BaseModel):
    """可在机器间交换的结果包"""
    format_version: int = BUNDLE_FORMAT_VERSION
    bundle_uid: str = Field(..., pattern=r"^[0-9a-f]{16}$")
    solution_name: str
    records: list[ExperimentRecord] = Field(default_factory=list)
    platform: PlatformInfo = Field(default_factory=PlatformInfo)
    created_at: datetime = Field(default_factory=utc_now)


class ScoreboardRow(BaseModel):
    experiment_uid: str
    source: Optional[str] = None
    point: dict[str, Any] = Field(default_factory=dict)
    objectives: dict[str, float] = Field(default_factory=dict)
    delta: Optional[dict[str, float]] = None
    on_frontier: bool = False
