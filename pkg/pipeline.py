"""
程序流水线

assemble -> apply_point -> build -> run (重复) -> extract -> aggregate
各阶段只读写 PipelineState, 每个阶段完成后写入 workdir/state.<k>.json
"""
import json
import logging
import math
import os
import re
import shutil
import statistics
from pathlib import Path
from typing import Any, Optional

from pydantic import BaseModel, ValidationError

from config import Settings
from errors import (
    BuildFailed, EmptySamples, InconsistentKeys, InvalidResultFile, IoFailure, MissingResultFile,
    NonFiniteValue, PatternNotMatched, SchemaViolation, UnboundDependency, UnknownParameter,
    UsageError, ValueOutOfDomain,
)
from models import (
    CHARACTERISTIC_RE, PLACEHOLDER_RE, AggregatedStats, CharacteristicStats, Characteristics,
    ComponentId, ExtractorMode, ExtractorSpec, ParameterDecl, PipelineState, ProgramSpec,
    ResolutionPlan, RunResult, RunStatus,
)
from registry import META_DIR, Repository, find_in_repos
from runner import run_to_files
from utils import pointer_get, pointer_set, read_json, utc_now_iso, write_text_atomic

logger = logging.getLogger(__name__)

SNAPSHOT_RE = re.compile(r"^state\.(\d+)\.json$")
DEFAULT_RUN_TIMEOUT_S = 600.0
DEFAULT_BUILD_TIMEOUT_S = 3600.0

# 子进程从宿主继承的环境变量; 取值在组装时记入 meta.base_env
BASE_ENV_KEYS = (
    "PATH", "HOME", "USER", "LANG", "LC_ALL", "TMPDIR", "TEMP", "TMP",
    "SYSTEMROOT", "SYSTEMDRIVE", "COMSPEC", "PATHEXT", "USERPROFILE",
)


class ProgramEntry(BaseModel):
    """仓库中的程序组件"""
    cid: ComponentId
    spec: ProgramSpec
    path: Path


def load_program(repos: list[Repository], key: str) -> ProgramEntry:
    repo, cid, meta = find_in_repos(repos, "program", key)
    try:
        spec = ProgramSpec(**meta.meta)
    except (ValidationError, TypeError) as e:
        raise SchemaViolation(f"程序元信息无效: {cid}: {e}", program=str(cid))
    return ProgramEntry(cid=cid, spec=spec, path=repo.entry_path("program", cid.uid))


# ============ 状态快照 ============

def _workdir(state: PipelineState) -> Path:
    return Path(state.meta["workdir"])


def _snapshots(workdir: Path) -> list[tuple[int, Path]]:
    if not workdir.is_dir():
        return []
    found = []
    for path in workdir.iterdir():
        m = SNAPSHOT_RE.match(path.name)
        if m:
            found.append((int(m.group(1)), path))
    return sorted(found)


def write_snapshot(state: PipelineState) -> Path:
    """写入下一个阶段快照"""
    workdir = _workdir(state)
    existing = _snapshots(workdir)
    index = existing[-1][0] + 1 if existing else 0
    path = workdir / f"state.{index}.json"
    try:
        write_text_atomic(path, state.canonical())
    except OSError as e:
        raise IoFailure(f"写入状态快照失败: {path}: {e}", path=str(path))
    logger.debug(f"状态快照: {path}")
    return path


def _ensure_snapshot(state: PipelineState):
    """最新快照与当前状态不一致时补写一份 (例如 apply_point 之后)"""
    existing = _snapshots(_workdir(state))
    if existing and existing[-1][1].read_text(encoding="utf-8") == state.canonical():
        return
    write_snapshot(state)


def load_snapshot(path: str | Path) -> PipelineState:
    return PipelineState.model_validate(read_json(path))


def latest_snapshot(workdir: str | Path) -> Optional[Path]:
    existing = _snapshots(Path(workdir))
    return existing[-1][1] if existing else None


# ============ 组装 ============

def _env_value(value: Any) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    return str(value)


def _set_param(doc: dict[str, Any], pointer: str, value: Any) -> dict[str, Any]:
    if pointer.startswith("/env/"):
        value = _env_value(value)
    return pointer_set(doc, pointer, value)


def assemble_pipeline(program: ProgramEntry, plan: ResolutionPlan, workdir: str | Path,
                      settings: Optional[Settings] = None) -> PipelineState:
    """组装初始状态并写入 state.0.json; 程序未声明超时时使用配置中的默认值"""
    spec = program.spec
    workdir = Path(workdir).expanduser().resolve()

    deps: dict[str, Any] = {}
    env: dict[str, str] = {}
    env_owner: dict[str, str] = {}
    warnings: list[str] = []
    skipped: list[str] = []
    for dep in spec.deps:
        entry = plan.binding.get(dep.name)
        if entry is None:
            if dep.optional:
                skipped.append(dep.name)
                continue
            raise UnboundDependency(f"依赖未绑定: {dep.name}", dependency=dep.name)
        deps[dep.name] = entry.summary()
        for key, value in entry.env_vars.items():
            if key in env and env[key] != value:
                message = f"环境变量 {key}: {env_owner[key]} 的取值被 {dep.name} 覆盖"
                warnings.append(message)
                logger.warning(message)
            env[key] = value
            env_owner[key] = dep.name

    src_dir = workdir / "src"
    try:
        workdir.mkdir(parents=True, exist_ok=True)
        if src_dir.exists():
            shutil.rmtree(src_dir)
        shutil.copytree(program.path, src_dir, ignore=shutil.ignore_patterns(META_DIR))
        for _, old in _snapshots(workdir):
            old.unlink()
    except OSError as e:
        raise IoFailure(f"准备工作目录失败: {workdir}: {e}", workdir=str(workdir))

    run_default = settings.pipeline.default_timeout_s if settings else DEFAULT_RUN_TIMEOUT_S
    build_default = settings.pipeline.build_timeout_s if settings else DEFAULT_BUILD_TIMEOUT_S
    run_timeout = spec.run.timeout_s or run_default
    if spec.build is not None:
        build = {
            "argv": spec.build.argv,
            "workdir": spec.build.workdir,
            "env_keys": spec.build.env_keys,
            "params": dict(spec.build.params),
            "timeout_s": spec.build.timeout_s or build_default,
            "status": "pending",
        }
    else:
        build = {"status": "none"}

    doc = {
        "deps": deps,
        "env": env,
        "build": build,
        "run": {
            "argv": spec.run.argv,
            "workdir": spec.run.workdir,
            "params": dict(spec.run.params),
            "repeat_default": spec.run.repeat_default,
            "timeout_s": run_timeout,
            "executions": [],
        },
        "meta": {
            "program": program.cid.model_dump(mode="json"),
            "program_name": spec.program_name,
            "workdir": str(workdir),
            "src_dir": str(src_dir),
            "created_at": utc_now_iso(),
            "warnings": warnings,
            "skipped_deps": skipped,
            "extractor": spec.extractor.model_dump(mode="json"),
            "exposed": {p: d.model_dump(mode="json") for p, d in spec.exposed.items()},
            "units": spec.units,
            "base_env": {k: os.environ[k] for k in BASE_ENV_KEYS if k in os.environ},
        },
    }
    for pointer, decl in spec.exposed.items():
        doc = _set_param(doc, pointer, decl.default)

    state = PipelineState.model_validate(doc)
    write_snapshot(state)
    logger.info(f"流水线已组装: {spec.program_name} ({workdir})")
    return state


# ============ 参数点 ============

def exposed_params(state: PipelineState) -> dict[str, ParameterDecl]:
    return {p: ParameterDecl.model_validate(d) for p, d in state.meta.get("exposed", {}).items()}


def apply_point(state: PipelineState, point: dict[str, Any]) -> PipelineState:
    """代入参数点, 返回新状态; 原状态不变"""
    exposed = exposed_params(state)
    doc = state.document()
    rebuild = False
    for pointer, value in point.items():
        decl = exposed.get(pointer)
        if decl is None:
            raise UnknownParameter(f"未声明的参数: {pointer}", pointer=pointer)
        if not decl.domain.contains(value):
            raise ValueOutOfDomain(f"参数 {pointer} 的取值 {value!r} 超出取值域", pointer=pointer)
        if pointer.startswith("/build/params/"):
            try:
                current = pointer_get(doc, pointer)
            except (KeyError, IndexError):
                current = None
            if json.dumps(current) != json.dumps(value):
                rebuild = True
        doc = _set_param(doc, pointer, value)
    if rebuild and doc["build"].get("status") != "none":
        doc["build"]["status"] = "pending"
    return PipelineState.model_validate(doc)


def fork_state(state: PipelineState, workdir: str | Path) -> PipelineState:
    """
    把状态迁移到新的工作目录

    需要重新构建时复制源码到新目录, 否则共用原来的已构建源码
    """
    workdir = Path(workdir).expanduser().resolve()
    doc = state.document()
    doc["meta"]["workdir"] = str(workdir)
    doc["run"]["executions"] = []
    try:
        workdir.mkdir(parents=True, exist_ok=True)
        if doc["build"].get("status") == "pending":
            src_dir = workdir / "src"
            if src_dir.exists():
                shutil.rmtree(src_dir)
            shutil.copytree(state.meta["src_dir"], src_dir)
            doc["meta"]["src_dir"] = str(src_dir)
    except OSError as e:
        raise IoFailure(f"准备工作目录失败: {workdir}: {e}", workdir=str(workdir))
    return PipelineState.model_validate(doc)


# ============ 构建与运行 ============

def render_argv(template: list[str], values: dict[str, Any]) -> list[str]:
    def substitute(m: re.Match) -> str:
        value = values[m.group(1)]
        return value if isinstance(value, str) else json.dumps(value)
    return [PLACEHOLDER_RE.sub(substitute, arg) for arg in template]


def _stage_values(state: PipelineState, stage: str, run_dir: Path, rep: int) -> dict[str, Any]:
    values = dict(getattr(state, stage).get("params", {}))
    values.update({
        "src_dir": state.meta["src_dir"],
        "workdir": state.meta["workdir"],
        "run_dir": str(run_dir),
        "rep": rep,
    })
    return values


def render_run_argv(state: PipelineState, rep: int) -> list[str]:
    """第 rep 次重复实际执行的 argv, 完全由状态决定"""
    run_dir = _workdir(state) / f"rep.{rep}"
    return render_argv(state.run["argv"], _stage_values(state, "run", run_dir, rep))


def _process_env(state: PipelineState) -> dict[str, str]:
    """子进程环境完全由状态决定: meta.base_env 加上依赖导出的变量"""
    return {**state.meta.get("base_env", {}), **state.env}


def build_program(state: PipelineState) -> PipelineState:
    """执行构建阶段; 失败时写入快照后抛出 BuildFailed"""
    if state.build.get("status") in ("none", "ok"):
        return state
    _ensure_snapshot(state)

    missing = [k for k in state.build.get("env_keys", []) if k not in state.env]
    if missing:
        raise UnboundDependency(f"构建所需的环境变量未绑定: {missing}", env_keys=missing)

    workdir = _workdir(state)
    cwd = Path(state.meta["src_dir"]) / state.build.get("workdir", ".")
    argv = render_argv(state.build["argv"], _stage_values(state, "build", cwd, 0))
    stdout_log = workdir / "build.stdout.log"
    stderr_log = workdir / "build.stderr.log"

    doc = state.document()
    doc["build"]["rendered_argv"] = argv
    doc["build"]["log_path"] = str(stderr_log)
    logger.info(f"构建: {' '.join(argv)}")
    try:
        result = run_to_files(argv, state.build["timeout_s"], cwd, _process_env(state), stdout_log, stderr_log)
        exit_code = result.exit_code
    except OSError as e:
        stderr_log.write_text(f"{e}\n", encoding="utf-8")
        exit_code = None

    doc["build"]["exit_code"] = exit_code
    doc["build"]["status"] = "ok" if exit_code == 0 else "failed"
    built = PipelineState.model_validate(doc)
    write_snapshot(built)
    if exit_code != 0:
        logger.error(f"构建失败, 退出码 {exit_code}, 日志: {stderr_log}")
        raise BuildFailed(exit_code, str(stderr_log))
    return built


def run_pipeline(state: PipelineState, repetitions: Optional[int] = None) -> list[RunResult]:
    """
    顺序执行 repetitions 次运行, 每次在独立的 rep.<i>/ 目录中

    非零退出和超时都会被记录, 不会中断后续重复
    """
    if repetitions is None:
        repetitions = state.run.get("repeat_default", 1)
    if repetitions < 1:
        raise UsageError(f"repetitions 必须 >= 1: {repetitions}")

    if state.build.get("status") == "failed":
        raise BuildFailed(state.build.get("exit_code"), state.build.get("log_path", ""))
    state = build_program(state)
    _ensure_snapshot(state)

    workdir = _workdir(state)
    env = _process_env(state)
    timeout = state.run["timeout_s"]
    results = []
    executions = []
    for rep in range(repetitions):
        run_dir = workdir / f"rep.{rep}"
        try:
            if run_dir.exists():
                shutil.rmtree(run_dir)
            run_dir.mkdir(parents=True)
            cwd = run_dir / state.run.get("workdir", ".")
            cwd.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise IoFailure(f"创建运行目录失败: {run_dir}: {e}", run_dir=str(run_dir))

        argv = render_run_argv(state, rep)
        stdout_path = run_dir / "stdout.log"
        stderr_path = run_dir / "stderr.log"
        try:
            proc = run_to_files(argv, timeout, cwd, env, stdout_path, stderr_path)
            if proc.timed_out:
                status = RunStatus.TIMEOUT
            else:
                status = RunStatus.OK if proc.exit_code == 0 else RunStatus.FAILED
            exit_code, wall = proc.exit_code, proc.wall_time_s
        except OSError as e:
            stderr_path.write_text(f"{e}\n", encoding="utf-8")
            status, exit_code, wall = RunStatus.FAILED, None, 0.0

        result = RunResult(
            repetition=rep, argv=argv, run_dir=str(run_dir),
            stdout_path=str(stdout_path), stderr_path=str(stderr_path), cwd=str(cwd),
            exit_code=exit_code, status=status, wall_time_s=wall,
        )
        results.append(result)
        executions.append({"rep": rep, "argv": argv, "run_dir": str(run_dir),
                           "exit_code": exit_code, "status": result.status})
        if status == RunStatus.OK:
            logger.info(f"重复 {rep} 完成: {wall:.4f}s")
        else:
            logger.warning(f"重复 {rep} {result.status}, 退出码 {exit_code}")

    doc = state.document()
    doc["run"]["executions"] = executions
    write_snapshot(PipelineState.model_validate(doc))
    return results


# ============ 特征提取与聚合 ============

def _finite(name: str, value: Any) -> float:
    if isinstance(value, bool):
        raise InvalidResultFile(f"特征 {name} 不是数值: {value!r}", characteristic=name)
    if isinstance(value, (int, float)):
        try:
            number = float(value)
        except OverflowError:
            raise NonFiniteValue(f"特征 {name} 超出浮点范围", characteristic=name)
    elif isinstance(value, str):
        try:
            number = float(value)
        except ValueError:
            raise InvalidResultFile(f"特征 {name} 不是数值: {value!r}", characteristic=name)
        if math.isfinite(number):
            raise InvalidResultFile(f"特征 {name} 不是数值: {value!r}", characteristic=name)
    else:
        raise InvalidResultFile(f"特征 {name} 不是数值: {value!r}", characteristic=name)
    if not math.isfinite(number):
        raise NonFiniteValue(f"特征 {name} 不是有限数值: {value!r}", characteristic=name)
    return number


def _from_result_file(result: RunResult, spec: ExtractorSpec) -> Characteristics:
    path = Path(result.cwd or result.run_dir) / spec.result_file
    if not path.is_file():
        raise MissingResultFile(f"结果文件不存在: {path}", path=str(path))
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise InvalidResultFile(f"结果文件无法解析: {path}: {e}", path=str(path))
    if not isinstance(data, dict):
        raise InvalidResultFile(f"结果文件必须是扁平的 JSON 对象: {path}", path=str(path))
    values = {}
    for name, value in data.items():
        if not CHARACTERISTIC_RE.match(name):
            raise InvalidResultFile(f"非法特征名: {name}", path=str(path))
        values[name] = _finite(name, value)
    return values


def _from_stdout(result: RunResult, spec: ExtractorSpec) -> Characteristics:
    try:
        text = Path(result.stdout_path).read_text(encoding="utf-8", errors="replace")
    except OSError as e:
        raise IoFailure(f"读取输出失败: {result.stdout_path}: {e}")
    values = {}
    for name, pattern in spec.patterns.items():
        m = re.search(pattern, text)
        if not m:
            raise PatternNotMatched(name)
        try:
            number = float(m.group(1))
        except (TypeError, ValueError):
            raise PatternNotMatched(name)
        if not math.isfinite(number):
            raise NonFiniteValue(f"特征 {name} 不是有限数值: {m.group(1)}", characteristic=name)
        values[name] = number
    return values


def extract_characteristics(result: RunResult, spec: ExtractorSpec) -> Characteristics:
    """从成功的运行中提取特征, 总是注入 wall_time_s"""
    if result.status != RunStatus.OK or result.exit_code != 0:
        raise UsageError(f"只能从成功的运行中提取特征 (重复 {result.repetition})")
    if spec.mode == ExtractorMode.RESULT_FILE:
        values = _from_result_file(result, spec)
    else:
        values = _from_stdout(result, spec)
    values["wall_time_s"] = float(result.wall_time_s)
    return values


def aggregate_stats(samples: list[Characteristics]) -> AggregatedStats:
    """逐特征计算 min/max/mean 与样本标准差 (n-1), n=1 时 stddev 为 None"""
    if not samples:
        raise EmptySamples("没有可聚合的样本")
    keys = set(samples[0])
    for sample in samples[1:]:
        if set(sample) != keys:
            raise InconsistentKeys(
                f"样本特征集合不一致: {sorted(keys)} vs {sorted(sample)}",
                expected=sorted(keys), actual=sorted(sample),
            )

    stats = {}
    for key in sorted(keys):
        values = [s[key] for s in samples]
        lo, hi = min(values), max(values)
        try:
            # 浮点舍入可能让均值略微越界
            mean = min(max(statistics.fmean(values), lo), hi)
            stddev = statistics.stdev(values) if len(values) > 1 else None
        except OverflowError:
            raise NonFiniteValue(f"特征 {key} 的统计量溢出", characteristic=key)
        if not math.isfinite(mean) or (stddev is not None and not math.isfinite(stddev)):
            raise NonFiniteValue(f"特征 {key} 的统计量溢出", characteristic=key)
        stats[key] = CharacteristicStats(min=lo, max=hi, mean=mean, stddev=stddev, n=len(values))
    return stats
