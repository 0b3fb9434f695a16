"""
解决方案: 可执行的任务清单, 基准测试, 结果包合并与报告

solution.json 描述按顺序执行的准备任务和一次基准测试;
任务结果记录在 solution-state.json 中, 重新执行 init 时从上次中断处继续
"""
import json
import logging
import platform
import sys
import venv
from pathlib import Path
from typing import Any, Callable, Optional

from pydantic import ValidationError

from autotune import GridStrategy, explore, frontier_uids, make_strategy, objective_value
from config import Settings
from envdetect import collect_platform_info, detect_software, list_envs, load_plugin, register_env
from errors import (
    CKError, FormatVersionMismatch, InitIncomplete, IoFailure, NotFound, SchemaViolation,
    TargetOsMismatch, TaskFailed, UsageError,
)
from metapkg import Fetcher, build_resolution_plan, execute_plan, find_package, install_with_deps, list_packages
from models import (
    DesignSpace, EntryMeta, EnvEntry, ExperimentRecord, ObjectiveDirection, ObjectiveSpec,
    ResultBundle, ScoreboardRow, SolutionManifest, SolutionState, TaskAction, TaskJournalEntry,
    TaskOutcome, TaskSpec, Version,
)
from pipeline import assemble_pipeline, build_program, load_program
from registry import Repository, find_in_repos
from runner import run_to_files
from utils import FileLock, canonical_dumps, new_uid, read_json, utc_now, write_json_atomic, write_text_atomic

logger = logging.getLogger(__name__)

STATE_FILE = "solution-state.json"
BUNDLE_FILE = "results.bundle.json"
LOCK_FILE = ".solution.lock"

_OS_ALIASES = {"macos": "darwin", "osx": "darwin", "win": "windows", "win32": "windows"}


def host_os() -> str:
    return platform.system().lower() or "unknown"


def _normalize_os(name: str) -> str:
    name = name.lower()
    return _OS_ALIASES.get(name, name)


# ============ 清单 ============

def parse_manifest(data: Any) -> SolutionManifest:
    try:
        return SolutionManifest.model_validate(data)
    except ValidationError as e:
        raise SchemaViolation(f"解决方案清单无效: {e}")


def load_manifest(path: str | Path) -> SolutionManifest:
    return parse_manifest(read_json(path))


def check_target_os(manifest: SolutionManifest):
    if manifest.target_os == "any":
        return
    if _normalize_os(manifest.target_os) != host_os():
        raise TargetOsMismatch(
            f"解决方案面向 {manifest.target_os}, 当前主机为 {host_os()}",
            target_os=manifest.target_os, host_os=host_os(),
        )


def _manifest_meta(manifest: SolutionManifest) -> EntryMeta:
    return EntryMeta(tags=["solution"], meta=manifest.model_dump(mode="json"))


def _ensure_solution_entry(repo: Repository, manifest: SolutionManifest) -> Path:
    """同名解决方案已存在时更新清单, 保留任务日志"""
    try:
        cid, meta = repo.find_entry("solution", manifest.name)
    except NotFound:
        repo.add_entry("solution", manifest.name, _manifest_meta(manifest))
        return repo.entry_path("solution", manifest.name)
    if meta.meta != manifest.model_dump(mode="json"):
        repo.update_entry("solution", cid.uid, _manifest_meta(manifest))
    return repo.entry_path("solution", manifest.name)


def find_solution(repos: list[Repository], name: str) -> tuple[Repository, SolutionManifest, Path]:
    repo, cid, meta = find_in_repos(repos, "solution", name)
    return repo, parse_manifest(meta.meta), repo.entry_path("solution", cid.uid)


def load_state(path: Path, name: str) -> SolutionState:
    state_path = path / STATE_FILE
    if not state_path.is_file():
        return SolutionState(solution=name)
    try:
        return SolutionState.model_validate(read_json(state_path))
    except ValidationError as e:
        raise SchemaViolation(f"任务日志损坏: {state_path}: {e}")


def _save_state(path: Path, state: SolutionState):
    state.updated_at = utc_now()
    write_json_atomic(path / STATE_FILE, state.model_dump(mode="json"))


# ============ 任务执行 ============

class TaskRunner:
    """按 action 分发准备任务, 每个任务返回一句结果说明"""

    def __init__(self, repos: list[Repository], settings: Settings, solution_dir: Path,
                 fetcher: Optional[Fetcher] = None):
        self.repos = repos
        self.settings = settings
        self.solution_dir = solution_dir
        self.fetcher = fetcher
        self._handlers: dict[str, Callable[[TaskSpec, Path], str]] = {
            TaskAction.CREATE_ISOLATED_ENV.value: self._create_isolated_env,
            TaskAction.INSTALL_PACKAGE.value: self._install_package,
            TaskAction.DETECT_SOFTWARE.value: self._detect_software,
            TaskAction.COMPILE_PROGRAM.value: self._compile_program,
            TaskAction.CUSTOM_SCRIPT.value: self._custom_script,
        }

    def execute(self, task: TaskSpec, log_path: Path) -> str:
        supported = task.params.get("supported_os")
        if supported and host_os() not in {_normalize_os(s) for s in supported}:
            raise CKError(f"当前主机 {host_os()} 不在支持列表 {supported} 中")
        action = task.action.value if isinstance(task.action, TaskAction) else task.action
        return self._handlers[action](task, log_path)

    def _create_isolated_env(self, task: TaskSpec, log_path: Path) -> str:
        env_dir = Path(task.params.get("path") or self.solution_dir / "venv")
        if not env_dir.is_absolute():
            env_dir = self.solution_dir / env_dir
        builder = venv.EnvBuilder(with_pip=bool(task.params.get("with_pip", False)), clear=False)
        builder.create(str(env_dir))
        if sys.platform == "win32":
            python = env_dir / "Scripts" / "python.exe"
        else:
            python = env_dir / "bin" / "python"
        entry = EnvEntry(
            soft_name="python-venv",
            tags=["python", "venv", "installed"],
            version=Version(platform.python_version()),
            tool_path=str(python),
            install_dir=str(env_dir),
            env_vars={"VIRTUAL_ENV": str(env_dir), "CK_VENV_PYTHON": str(python)},
        )
        register_env(self.repos[0], entry)
        return f"虚拟环境: {env_dir}"

    def _install_package(self, task: TaskSpec, log_path: Path) -> str:
        version = task.params.get("version")
        pkg = find_package(self.repos, task.target, str(version) if version is not None else None)
        for env in list_envs(self.repos, ["installed"]):
            if env.soft_name == pkg.package_name and env.version == pkg.version:
                return f"已安装: {pkg.key} ({env.install_dir})"
        entry = install_with_deps(pkg, self.repos, self.settings, self.fetcher)
        return f"安装完成: {pkg.key} ({entry.install_dir})"

    def _detect_software(self, task: TaskSpec, log_path: Path) -> str:
        _, cid, meta = find_in_repos(self.repos, "soft", task.target)
        plugin = load_plugin(meta)
        roots = [str(r) for r in task.params.get("roots", [])]
        entries = detect_software(plugin, roots, timeout=self.settings.detect.run_timeout_s,
                                  output_limit=self.settings.detect.output_limit_bytes)
        if not entries:
            raise NotFound(f"未探测到软件: {plugin.soft_name}", soft=str(cid))
        for entry in entries:
            entry.soft_uid = cid
            register_env(self.repos[0], entry)
        return f"探测到 {len(entries)} 个 {plugin.soft_name}"

    def _compile_program(self, task: TaskSpec, log_path: Path) -> str:
        program = load_program(self.repos, task.target)
        if program.spec.build is None:
            return f"{program.cid} 无构建阶段"
        plan = build_resolution_plan(program.spec.deps, list_envs(self.repos), list_packages(self.repos))
        if plan.installs():
            plan = execute_plan(plan, self.repos[0], self.settings, self.fetcher)
        workdir = self.solution_dir / "build" / program.cid.key
        state = build_program(assemble_pipeline(program, plan, workdir, self.settings))
        return f"构建完成: {program.cid} ({state.build.get('log_path')})"

    def _custom_script(self, task: TaskSpec, log_path: Path) -> str:
        cwd = Path(task.params.get("cwd", "."))
        if not cwd.is_absolute():
            cwd = self.solution_dir / cwd
        cwd.mkdir(parents=True, exist_ok=True)
        timeout = float(task.params.get("timeout_s", self.settings.install.step_timeout_s))
        err_path = log_path.with_suffix(".err")
        result = run_to_files(list(task.target), timeout, cwd, None, log_path, err_path)
        if result.timed_out:
            raise CKError(f"脚本超时 ({timeout}s)")
        if result.exit_code != 0:
            raise CKError(f"脚本退出码 {result.exit_code}, 日志: {err_path}")
        return f"脚本完成: {task.target[0]}"


def init_solution(manifest: SolutionManifest, repos: list[Repository], settings: Settings,
                  fetcher: Optional[Fetcher] = None) -> SolutionState:
    """
    按顺序执行准备任务

    每个任务的结果写入任务日志; 已完成的任务按 (序号, 内容哈希) 跳过,
    修改过的任务会重新执行
    """
    check_target_os(manifest)
    repo = repos[0]
    path = _ensure_solution_entry(repo, manifest)
    runner = TaskRunner(repos, settings, path, fetcher)

    with FileLock(path / LOCK_FILE, timeout=settings.registry.lock_timeout_s):
        previous = load_state(path, manifest.name)
        completed = {(t.index, t.task_hash): t for t in previous.tasks if t.status != TaskOutcome.FAILED}
        state = SolutionState(solution=manifest.name)
        (path / "logs").mkdir(exist_ok=True)

        for index, task in enumerate(manifest.tasks):
            task_hash = task.content_hash()
            done = completed.get((index, task_hash))
            if done is not None:
                state.tasks.append(done)
                logger.debug(f"任务 {index} 已完成, 跳过")
                continue

            log_path = path / "logs" / f"task.{index}.log"
            action = task.action.value if isinstance(task.action, TaskAction) else task.action
            logger.info(f"任务 {index}: {action} {task.target or ''}")
            try:
                message = runner.execute(task, log_path)
                status = TaskOutcome.OK
            except (CKError, OSError) as e:
                message = e.message if isinstance(e, CKError) else str(e)
                status = TaskOutcome.SKIPPED if task.skippable else TaskOutcome.FAILED

            if not log_path.exists():
                write_text_atomic(log_path, message + "\n")
            state.tasks.append(TaskJournalEntry(
                index=index, action=action, task_hash=task_hash, status=status,
                message=message, log_path=str(log_path),
            ))

            if status == TaskOutcome.FAILED:
                state.status = "failed"
                _save_state(path, state)
                logger.error(f"任务 {index} 失败: {message}")
                raise TaskFailed(index, message, str(log_path))
            if status == TaskOutcome.SKIPPED:
                logger.warning(f"任务 {index} 已跳过: {message}")
            _save_state(path, state)

        state.status = "ok"
        _save_state(path, state)
    logger.info(f"解决方案初始化完成: {manifest.name}")
    return state


def _init_complete(manifest: SolutionManifest, state: SolutionState) -> bool:
    if state.status != "ok" or len(state.tasks) != len(manifest.tasks):
        return False
    return all(
        entry.index == i and entry.task_hash == task.content_hash() and entry.status != TaskOutcome.FAILED
        for i, (entry, task) in enumerate(zip(state.tasks, manifest.tasks))
    )


# ============ 基准测试 ============

def run_benchmark(name: str, repos: list[Repository], settings: Settings,
                  workdir: Optional[str | Path] = None) -> ResultBundle:
    """执行清单中的基准测试, 写入 results.bundle.json"""
    _, manifest, path = find_solution(repos, name)
    if not _init_complete(manifest, load_state(path, manifest.name)):
        raise InitIncomplete(f"解决方案尚未完成初始化: {name}", solution=name)

    bench = manifest.benchmark
    program = load_program(repos, bench.program)
    space = DesignSpace(params=bench.space or [])
    strategy = make_strategy(bench.strategy, bench.seed, bench.iterations) if bench.space else GridStrategy()
    workdir = Path(workdir) if workdir else path / "benchmark"

    records = explore(program, space, strategy, bench.repetitions, repos, settings, workdir,
                      parallel=bench.parallel, expected_keys=bench.expected_keys)
    bundle = ResultBundle(
        bundle_uid=new_uid(),
        solution_name=manifest.name,
        records=records,
        platform=collect_platform_info(),
    )
    save_bundle(bundle, path / BUNDLE_FILE)
    logger.info(f"基准测试完成: {name}, {len(records)} 条记录 -> {path / BUNDLE_FILE}")
    return bundle


def objective_summary(records: list[ExperimentRecord], objectives: list[ObjectiveSpec]) -> list[dict[str, Any]]:
    """每条成功记录的目标值, 用于命令行输出"""
    summary = []
    for record in records:
        if not record.ok:
            continue
        values = {o.key: objective_value(record, o) for o in objectives if o.key in record.aggregated}
        summary.append({"experiment_uid": record.experiment_uid, "point": record.point, "objectives": values})
    return summary


# ============ 结果包 ============

def save_bundle(bundle: ResultBundle, path: str | Path):
    write_json_atomic(path, bundle.model_dump(mode="json"))


def load_bundle(path: str | Path) -> ResultBundle:
    data = read_json(path)
    try:
        return ResultBundle.model_validate(data)
    except ValidationError as e:
        raise SchemaViolation(f"结果包无效: {path}: {e}", path=str(path))


def merge_bundles(bundles: list[ResultBundle]) -> list[ExperimentRecord]:
    """按 experiment_uid 去重合并 (先出现者优先), 每条记录附带来源结果包"""
    if not bundles:
        return []
    versions = {b.format_version for b in bundles}
    if len(versions) != 1:
        raise FormatVersionMismatch(f"结果包格式版本不一致: {sorted(versions)}", versions=sorted(versions))

    seen: set[str] = set()
    merged = []
    for bundle in bundles:
        for record in bundle.records:
            if record.experiment_uid in seen:
                continue
            seen.add(record.experiment_uid)
            merged.append(record.model_copy(update={"source": record.source or bundle.bundle_uid}))
    logger.debug(f"合并 {len(bundles)} 个结果包, 共 {len(merged)} 条记录")
    return merged


def merged_bundle(records: list[ExperimentRecord], solution_name: str = "merged") -> ResultBundle:
    return ResultBundle(bundle_uid=new_uid(), solution_name=solution_name, records=records,
                        platform=collect_platform_info())


# ============ 报告 ============

def _point_key(point: dict[str, Any]) -> str:
    return json.dumps(point, sort_keys=True, separators=(",", ":"))


def _best(values: list[float], objective: ObjectiveSpec) -> float:
    return max(values) if objective.direction == ObjectiveDirection.MAXIMIZE else min(values)


def _reference_deltas(record: ExperimentRecord, objectives: list[ObjectiveSpec],
                      reference: list[ExperimentRecord]) -> dict[str, float]:
    same_point = [r for r in reference if _point_key(r.point) == _point_key(record.point)]
    deltas = {}
    for obj in objectives:
        measured = objective_value(record, obj)
        candidates = same_point or reference
        values = [objective_value(r, obj) for r in candidates if obj.key in r.aggregated]
        if values:
            deltas[obj.key] = measured - _best(values, obj)
    return deltas


def scoreboard_rows(records: list[ExperimentRecord], objectives: list[ObjectiveSpec],
                    reference: Optional[list[ExperimentRecord]] = None) -> list[ScoreboardRow]:
    """按第一个目标排序 (最优在前), 标记 Pareto 前沿"""
    ok = [r for r in records if r.ok]
    if len(ok) != len(records):
        logger.warning(f"报告忽略 {len(records) - len(ok)} 条失败记录")
    frontier = frontier_uids(ok, objectives)
    ref = [r for r in reference or [] if r.ok]

    rows = []
    for record in ok:
        rows.append(ScoreboardRow(
            experiment_uid=record.experiment_uid,
            source=record.source,
            point=record.point,
            objectives={o.key: objective_value(record, o) for o in objectives},
            delta=_reference_deltas(record, objectives, ref) if reference is not None else None,
            on_frontier=record.experiment_uid in frontier,
        ))

    if objectives:
        first = objectives[0]
        sign = -1.0 if first.direction == ObjectiveDirection.MAXIMIZE else 1.0
        rows.sort(key=lambda r: (sign * r.objectives[first.key], r.experiment_uid))
    else:
        rows.sort(key=lambda r: r.experiment_uid)
    return rows


def _cell(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value).replace("|", "\\|")


def _render_markdown(rows: list[ScoreboardRow], objectives: list[ObjectiveSpec],
                     with_delta: bool, title: str) -> str:
    header = ["experiment", "source", "point", *[o.key for o in objectives]]
    if with_delta:
        header += [f"delta {o.key}" for o in objectives]
    header.append("frontier")

    lines = []
    if title:
        lines += [f"# {title}", ""]
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "---|" * len(header))
    for row in rows:
        cells = [row.experiment_uid, row.source or "", _point_key(row.point)]
        cells += [row.objectives[o.key] for o in objectives]
        if with_delta:
            cells += [(row.delta or {}).get(o.key, "") for o in objectives]
        cells.append("*" if row.on_frontier else "")
        lines.append("| " + " | ".join(_cell(c) for c in cells) + " |")
    return "\n".join(lines) + "\n"


def render_rows_json(rows: list[ScoreboardRow]) -> str:
    return canonical_dumps([row.model_dump(mode="json") for row in rows])


def render_report(records: list[ExperimentRecord], objectives: list[ObjectiveSpec], fmt: str = "md",
                  reference: Optional[ResultBundle] = None, title: str = "") -> str:
    """生成记分板; md 为 Markdown 表格, json 为行的规范化 JSON"""
    if fmt not in ("md", "markdown", "json"):
        raise UsageError(f"不支持的报告格式: {fmt}")
    ref_records = merge_bundles([reference]) if reference is not None else None
    rows = scoreboard_rows(records, objectives, ref_records)
    if fmt == "json":
        return render_rows_json(rows)
    return _render_markdown(rows, objectives, reference is not None, title)


# ============ 克隆 ============

def clone_solution(repos: list[Repository], name: str, new_name: str,
                   target_os: Optional[str] = None) -> SolutionManifest:
    """复制清单并可改写 target_os, 新的解决方案没有任务日志"""
    _, manifest, _ = find_solution(repos, name)
    update: dict[str, Any] = {"name": new_name}
    if target_os is not None:
        update["target_os"] = target_os
    clone = parse_manifest({**manifest.model_dump(mode="json"), **update})
    try:
        repos[0].add_entry("solution", clone.name, _manifest_meta(clone))
    except OSError as e:
        raise IoFailure(f"克隆解决方案失败: {e}")
    logger.info(f"克隆解决方案: {name} -> {new_name}")
    return clone
