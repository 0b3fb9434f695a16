"""
命令路由 - 统一的命令行接口

每个命令返回一个可 JSON 序列化的 dict, dispatch 把它合并进响应信封:
{"return": 0, ...}; 出错时 {"return": code, "error": message}
"""
import argparse
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

from pydantic import ValidationError

from autotune import explore, load_experiments, make_strategy, pareto_filter
from config import Settings, load_config
from envdetect import detect_software, find_env, list_envs, load_plugin, register_env, render_env_script
from errors import CKError, NotFound, UsageError
from metapkg import build_resolution_plan, execute_plan, find_package, install_with_deps, list_packages
from models import DesignSpace, EntryMeta, ObjectiveSpec, ParameterDecl
from pipeline import (
    aggregate_stats, apply_point, assemble_pipeline, extract_characteristics, load_program, run_pipeline,
)
from registry import Repository, find_in_repos, init_repo, open_repos, parse_ref, search_by_tags
from solution import (
    clone_solution, init_solution, load_bundle, load_manifest, merge_bundles, merged_bundle,
    objective_summary, render_report, run_benchmark, save_bundle,
)
from utils import new_uid, read_json

logger = logging.getLogger(__name__)


# ============ 路由表 ============

def arg(*flags: str, **kwargs: Any) -> tuple[tuple[str, ...], dict[str, Any]]:
    return flags, kwargs


@dataclass
class Command:
    verbs: tuple[str, ...]
    handler: Callable[["CommandContext", argparse.Namespace], dict[str, Any]]
    help: str = ""
    arguments: list[tuple[tuple[str, ...], dict[str, Any]]] = field(default_factory=list)


class CommandRouter:
    """命令注册表, 用法与 APIRouter 类似"""

    def __init__(self):
        self.commands: dict[tuple[str, ...], Command] = {}

    def command(self, *verbs: str, help: str = "", arguments: Optional[list] = None):
        def decorator(func):
            self.commands[verbs] = Command(verbs, func, help, list(arguments or []))
            return func
        return decorator


router = CommandRouter()


class _HelpRequested(Exception):
    def __init__(self, text: str):
        super().__init__(text)
        self.text = text


class _Parser(argparse.ArgumentParser):
    """不退出进程的解析器: 用法错误转成 UsageError"""

    def error(self, message: str):
        raise UsageError(f"{message}\n{self.format_usage()}")

    def print_help(self, file=None):
        pass

    def exit(self, status: int = 0, message: Optional[str] = None):
        raise _HelpRequested(self.format_help())


def _common_options() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS, help="不输出日志")
    common.add_argument("--debug", action="store_true", default=argparse.SUPPRESS, help="调试日志")
    common.add_argument("--json-in", default=argparse.SUPPRESS, help="JSON 输入文件, 覆盖命令行参数")
    common.add_argument("-c", "--config", default=argparse.SUPPRESS, help="配置文件路径 (默认: ck.yaml)")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = _Parser(prog="ck", description="可移植的组件化实验框架", parents=[common])
    sub = parser.add_subparsers(dest="verb", parser_class=_Parser)

    groups: dict[str, argparse._SubParsersAction] = {}
    for verbs, cmd in router.commands.items():
        if len(verbs) == 1:
            target = sub.add_parser(verbs[0], help=cmd.help, parents=[common])
        else:
            if verbs[0] not in groups:
                group = sub.add_parser(verbs[0], help=f"{verbs[0]} 子命令", parents=[common])
                groups[verbs[0]] = group.add_subparsers(dest="subverb", parser_class=_Parser)
            target = groups[verbs[0]].add_parser(verbs[1], help=cmd.help, parents=[common])
        for flags, kwargs in cmd.arguments:
            target.add_argument(*flags, **kwargs)
        target.set_defaults(_command=cmd)
    return parser


# ============ 上下文 ============

class CommandContext:
    """一次命令执行的上下文: 配置与按需打开的仓库"""

    def __init__(self, settings: Settings):
        self.settings = settings
        self._repos: Optional[list[Repository]] = None

    def repos(self, create: bool = True) -> list[Repository]:
        if self._repos is None:
            self._repos = open_repos(self.settings.repo_paths(), self.settings.registry.lock_timeout_s,
                                     create_first=create)
        if not self._repos:
            raise NotFound("没有可用的组件仓库, 请设置 CK_REPOS 或执行 ck repo init")
        return self._repos

    def workdir(self, requested: Optional[str], name: str) -> Path:
        if requested:
            return Path(requested).expanduser().resolve()
        return self.repos()[0].root / "work" / f"{name}-{new_uid()[:8]}"


def _json_input(value: Any) -> Any:
    """命令行传入文件路径, JSON 输入可以直接内联对象"""
    if value is None or isinstance(value, (dict, list)):
        return value
    return read_json(value)


def _split_tags(value: Any) -> list[str]:
    if value is None:
        return []
    if isinstance(value, list):
        return [str(t) for t in value]
    return [t for t in str(value).split(",") if t.strip()]


def _objectives(value: Any) -> list[ObjectiveSpec]:
    if isinstance(value, list):
        return [ObjectiveSpec.model_validate(o) if isinstance(o, dict) else ObjectiveSpec.parse(o) for o in value]
    try:
        return ObjectiveSpec.parse_list(value)
    except ValueError as e:
        raise UsageError(str(e))


def _space(value: Any) -> DesignSpace:
    data = _json_input(value)
    if isinstance(data, dict):
        data = data.get("params", [])
    return DesignSpace(params=[ParameterDecl.model_validate(p) for p in data or []])


# ============ registry ============

@router.command("repo", "init", help="初始化组件仓库", arguments=[
    arg("path"), arg("--alias", required=True),
])
def repo_init(ctx: CommandContext, args: argparse.Namespace) -> dict[str, Any]:
    repo = init_repo(args.path, args.alias, ctx.settings.registry.lock_timeout_s)
    return {"repo": repo.descriptor.model_dump(mode="json")}


@router.command("add", help="添加组件", arguments=[
    arg("ref", help="kind:alias, 或只写 kind 生成匿名组件"),
    arg("--tags", default=None), arg("--meta", default=None), arg("--payload", default=None),
])
def add(ctx: CommandContext, args: argparse.Namespace) -> dict[str, Any]:
    kind, _, alias = args.ref.partition(":")
    meta = _json_input(args.meta) or {}
    if not isinstance(meta, dict):
        raise UsageError("--meta 必须是 JSON 对象")
    tags = _split_tags(args.tags) or [str(t) for t in meta.pop("tags", [])]
    meta.pop("tags", None)
    entry = EntryMeta(tags=tags, meta=meta)
    cid = ctx.repos()[0].add_entry(kind, alias or None, entry, payload_dir=args.payload)
    return {"id": cid.model_dump(mode="json")}


@router.command("find", help="按别名或 uid 查找组件", arguments=[arg("ref")])
def find(ctx: CommandContext, args: argparse.Namespace) -> dict[str, Any]:
    kind, key = parse_ref(args.ref)
    repo, cid, meta = find_in_repos(ctx.repos(create=False), kind, key)
    return {
        "id": cid.model_dump(mode="json"),
        "tags": meta.tags,
        "meta": meta.meta,
        "created_at": meta.created_at,
        "path": str(repo.entry_path(kind, cid.uid)),
    }


@router.command("rm", help="删除组件", arguments=[arg("ref")])
def rm(ctx: CommandContext, args: argparse.Namespace) -> dict[str, Any]:
    kind, key = parse_ref(args.ref)
    repo, cid, _ = find_in_repos(ctx.repos(create=False), kind, key)
    repo.remove_entry(kind, cid.uid)
    return {"removed": cid.model_dump(mode="json")}


@router.command("search", help="按标签搜索组件", arguments=[
    arg("--tags", required=True), arg("--kind", default=None),
])
def search(ctx: CommandContext, args: argparse.Namespace) -> dict[str, Any]:
    results = search_by_tags(ctx.repos(), args.kind, _split_tags(args.tags))
    return {"results": [c.model_dump(mode="json") for c in results]}


# ============ envdetect / metapkg ============

@router.command("detect", help="运行探测插件并登记环境", arguments=[
    arg("soft"), arg("--root", action="append", default=None, dest="roots"),
    arg("--timeout", type=float, default=None),
])
def detect(ctx: CommandContext, args: argparse.Namespace) -> dict[str, Any]:
    repos = ctx.repos()
    _, cid, meta = find_in_repos(repos, "soft", args.soft)
    plugin = load_plugin(meta)
    timeout = args.timeout if args.timeout is not None else ctx.settings.detect.run_timeout_s
    entries = detect_software(plugin, args.roots or [], timeout=timeout,
                              output_limit=ctx.settings.detect.output_limit_bytes)
    for entry in entries:
        entry.soft_uid = cid
        register_env(repos[0], entry)
    return {"envs": [e.model_dump(mode="json") for e in entries]}


@router.command("install", help="安装元包及其依赖", arguments=[
    arg("package"), arg("--version", default=None), arg("--force", action="store_true"),
])
def install(ctx: CommandContext, args: argparse.Namespace) -> dict[str, Any]:
    repos = ctx.repos()
    pkg = find_package(repos, args.package, args.version)
    entry = install_with_deps(pkg, repos, ctx.settings, force=args.force)
    return {"env": entry.model_dump(mode="json")}


@router.command("env", "list", help="列出已登记的环境", arguments=[arg("--tags", default=None)])
def env_list(ctx: CommandContext, args: argparse.Namespace) -> dict[str, Any]:
    envs = list_envs(ctx.repos(), _split_tags(args.tags))
    return {"envs": [e.model_dump(mode="json") for e in envs]}


@router.command("env", "script", help="生成环境变量脚本", arguments=[
    arg("uid"), arg("--dialect", default="posix-shell"),
])
def env_script(ctx: CommandContext, args: argparse.Namespace) -> dict[str, Any]:
    entry = find_env(ctx.repos(), args.uid)
    return {"script": render_env_script(entry, args.dialect)}


# ============ pipeline / autotune ============

@router.command("run", help="组装并运行程序流水线", arguments=[
    arg("program"), arg("--reps", type=int, default=None), arg("--point", default=None),
    arg("--workdir", default=None),
])
def run(ctx: CommandContext, args: argparse.Namespace) -> dict[str, Any]:
    repos = ctx.repos()
    program = load_program(repos, args.program)
    plan = build_resolution_plan(program.spec.deps, list_envs(repos), list_packages(repos))
    if plan.installs():
        plan = execute_plan(plan, repos[0], ctx.settings)
    workdir = ctx.workdir(args.workdir, program.cid.key)
    state = assemble_pipeline(program, plan, workdir, ctx.settings)
    state = apply_point(state, _json_input(args.point) or {})
    results = run_pipeline(state, args.reps)

    samples, errors = [], []
    for result in results:
        if result.exit_code != 0:
            errors.append(f"重复 {result.repetition}: {result.status}, 退出码 {result.exit_code}")
            continue
        try:
            samples.append(extract_characteristics(result, program.spec.extractor))
        except CKError as e:
            errors.append(f"重复 {result.repetition}: {e.message}")
    aggregated = aggregate_stats(samples) if samples else {}
    return {
        "workdir": str(workdir),
        "results": [r.model_dump(mode="json") for r in results],
        "characteristics": samples,
        "aggregated": {k: v.model_dump(mode="json") for k, v in aggregated.items()},
        "errors": errors,
    }


@router.command("autotune", help="探索设计空间", arguments=[
    arg("program"), arg("--space", required=True), arg("--strategy", default="grid"),
    arg("--seed", type=int, default=0), arg("--iterations", type=int, default=10),
    arg("--reps", type=int, default=1), arg("--parallel", type=int, default=None),
    arg("--workdir", default=None),
])
def autotune(ctx: CommandContext, args: argparse.Namespace) -> dict[str, Any]:
    repos = ctx.repos()
    program = load_program(repos, args.program)
    strategy = make_strategy(args.strategy, args.seed, args.iterations)
    records = explore(program, _space(args.space), strategy, args.reps, repos, ctx.settings,
                      ctx.workdir(args.workdir, program.cid.key), parallel=args.parallel)
    return {
        "records": [r.model_dump(mode="json") for r in records],
        "ok": sum(1 for r in records if r.ok),
        "failed": sum(1 for r in records if not r.ok),
    }


@router.command("pareto", help="计算实验记录的 Pareto 前沿", arguments=[
    arg("--objectives", required=True), arg("--experiments", default=None, help="按程序别名或 uid 过滤"),
])
def pareto(ctx: CommandContext, args: argparse.Namespace) -> dict[str, Any]:
    records = load_experiments(ctx.repos(), args.experiments)
    frontier = pareto_filter(records, _objectives(args.objectives))
    return {
        "frontier": [r.experiment_uid for r in frontier],
        "records": [r.model_dump(mode="json") for r in frontier],
    }


@router.command("report", help="生成记分板报告", arguments=[
    arg("--format", default="md", choices=["md", "markdown", "json"]),
    arg("--objectives", default="wall_time_s:min"), arg("--reference", default=None),
    arg("--bundle", action="append", default=None, dest="bundles"),
    arg("--experiments", default=None), arg("--title", default=""),
])
def report(ctx: CommandContext, args: argparse.Namespace) -> dict[str, Any]:
    if args.bundles:
        records = merge_bundles([load_bundle(p) for p in args.bundles])
    else:
        records = load_experiments(ctx.repos(), args.experiments)
    reference = load_bundle(args.reference) if args.reference else None
    text = render_report(records, _objectives(args.objectives), args.format, reference, args.title)
    return {"format": args.format, "report": text}


# ============ solution ============

@router.command("solution", "init", help="执行解决方案的准备任务", arguments=[arg("manifest")])
def solution_init(ctx: CommandContext, args: argparse.Namespace) -> dict[str, Any]:
    manifest = load_manifest(args.manifest)
    state = init_solution(manifest, ctx.repos(), ctx.settings)
    return {"state": state.model_dump(mode="json")}


@router.command("solution", "benchmark", help="执行解决方案的基准测试", arguments=[
    arg("name"), arg("--workdir", default=None),
])
def solution_benchmark(ctx: CommandContext, args: argparse.Namespace) -> dict[str, Any]:
    repos = ctx.repos()
    bundle = run_benchmark(args.name, repos, ctx.settings, args.workdir)
    _, _, meta = find_in_repos(repos, "solution", args.name)
    objectives = [ObjectiveSpec.model_validate(o) for o in meta.meta["benchmark"].get("objectives", [])]
    return {
        "bundle_uid": bundle.bundle_uid,
        "records": len(bundle.records),
        "ok": sum(1 for r in bundle.records if r.ok),
        "objectives": objective_summary(bundle.records, objectives),
    }


@router.command("solution", "clone", help="克隆解决方案并改写目标平台", arguments=[
    arg("source"), arg("--name", required=True), arg("--target-os", default=None),
])
def solution_clone(ctx: CommandContext, args: argparse.Namespace) -> dict[str, Any]:
    manifest = clone_solution(ctx.repos(), args.source, args.name, args.target_os)
    return {"solution": manifest.model_dump(mode="json")}


@router.command("bundle", "merge", help="合并结果包", arguments=[
    arg("files", nargs="+"), arg("--out", default=None),
])
def bundle_merge(ctx: CommandContext, args: argparse.Namespace) -> dict[str, Any]:
    records = merge_bundles([load_bundle(p) for p in args.files])
    payload: dict[str, Any] = {
        "count": len(records),
        "records": [r.model_dump(mode="json") for r in records],
    }
    if args.out:
        bundle = merged_bundle(records)
        save_bundle(bundle, args.out)
        payload["out"] = str(args.out)
        payload["bundle_uid"] = bundle.bundle_uid
    return payload


# ============ 分发 ============

def _apply_json_input(args: argparse.Namespace, data: Any):
    if data is None:
        return
    if not isinstance(data, dict):
        raise UsageError("JSON 输入必须是对象")
    for key, value in data.items():
        attr = key.replace("-", "_")
        if attr.startswith("_") or attr in ("verb", "subverb"):
            continue
        setattr(args, attr, value)


def dispatch(argv: list[str], stdin_json: Optional[dict[str, Any]] = None,
             settings: Optional[Settings] = None) -> dict[str, Any]:
    """执行一条命令并返回响应信封"""
    try:
        parser = build_parser()
        try:
            args = parser.parse_args(argv)
        except _HelpRequested as h:
            return {"return": 0, "usage": h.text}

        command: Optional[Command] = getattr(args, "_command", None)
        if command is None:
            raise UsageError(f"未知命令\n{parser.format_usage()}")

        if settings is None:
            settings = load_config(getattr(args, "config", None))
        _apply_json_input(args, stdin_json)
        if getattr(args, "json_in", None):
            _apply_json_input(args, read_json(args.json_in))

        payload = command.handler(CommandContext(settings), args)
        return {"return": 0, **payload}
    except CKError as e:
        logger.debug(f"命令失败: {e.message}")
        return e.to_envelope()
    except ValidationError as e:
        return UsageError(f"输入无效: {e}").to_envelope()
    except OSError as e:
        return {"return": 3, "error": f"I/O 错误: {e}"}
    except Exception as e:
        logger.exception(f"未预期的错误: {e}")
        return {"return": 1, "error": f"{type(e).__name__}: {e}"}
