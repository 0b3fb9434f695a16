"""
元包与依赖解析

resolve_dependency      依赖 -> 已有环境 (标签超集 + 版本区间, 最高版本优先)
build_resolution_plan   按声明顺序生成拓扑有序的 UseEnv/Install 计划
install_package         按步骤安装元包, 任一步失败则删除目标目录
"""
import logging
import os
import shutil
import tarfile
import zipfile
from pathlib import Path
from typing import Optional
from urllib.parse import urlparse
from urllib.request import url2pathname

import httpx
from pydantic import ValidationError

from config import Settings
from envdetect import collect_platform_info, list_envs, register_env
from errors import (
    AlreadyInstalled, ChecksumMismatch, DependencyCycle, IoFailure, NotFound, StepFailed,
    UnresolvedDependency,
)
from models import (
    DependencySpec, DownloadStep, EnvEntry, ExtractStep, PackageSpec, PlanAction, PlanActionKind,
    ResolutionPlan, ScriptStep, Version,
)
from registry import Repository
from runner import run_to_files
from utils import FileLock, new_uid, sha256_file, utc_now

logger = logging.getLogger(__name__)


# ============ 解析 ============

def resolve_dependency(dep: DependencySpec, envs: list[EnvEntry]) -> Optional[EnvEntry]:
    """
    选择满足依赖的环境

    最高版本优先, 其次 detected_at 最新, 再次 uid 字典序最小; 没有候选时返回 None
    """
    candidates = [e for e in envs if dep.accepts(e.tags, e.version)]
    if not candidates:
        return None
    # max 返回第一个最大值, 先按 uid 升序排列即可让最小 uid 胜出
    candidates.sort(key=lambda e: e.uid or "")
    return max(candidates, key=lambda e: (e.version, e.detected_at))


def select_package(dep: DependencySpec, packages: list[PackageSpec]) -> Optional[PackageSpec]:
    """与 resolve_dependency 相同的规则选择元包, 同版本时包名字典序最小者胜出"""
    candidates = [p for p in packages if dep.accepts(p.tags, p.version)]
    if not candidates:
        return None
    candidates.sort(key=lambda p: p.package_name)
    return max(candidates, key=lambda p: p.version)


class _Planner:
    """深度优先: 先规划元包自身的依赖再安装元包"""

    def __init__(self, envs: list[EnvEntry], packages: list[PackageSpec]):
        self.envs = envs
        self.packages = packages
        self.plan = ResolutionPlan()
        self.planned: dict[str, PlanAction] = {}
        self.installs: dict[str, PlanAction] = {}
        self.processing: list[str] = []

    def _snapshot(self):
        return (
            len(self.plan.actions),
            [(a, list(a.dep_names)) for a in self.plan.actions],
            dict(self.planned), dict(self.installs), dict(self.plan.binding),
            len(self.plan.skipped), len(self.plan.conflicts),
        )

    def _restore(self, snap):
        n_actions, names, planned, installs, binding, n_skipped, n_conflicts = snap
        del self.plan.actions[n_actions:]
        for action, dep_names in names:
            action.dep_names = dep_names
        self.planned, self.installs = planned, installs
        self.plan.binding = binding
        del self.plan.skipped[n_skipped:]
        del self.plan.conflicts[n_conflicts:]

    def _check_conflict(self, dep: DependencySpec, action: PlanAction):
        provider = action.env if action.env is not None else action.package
        if not dep.accepts(provider.tags, provider.version):
            message = f"{dep.name}: 已绑定 {provider.version}, 与新的约束冲突"
            self.plan.conflicts.append(message)
            logger.warning(f"依赖冲突 {message}")

    def visit(self, dep: DependencySpec):
        if dep.name in self.planned:
            self._check_conflict(dep, self.planned[dep.name])
            return
        if dep.name in self.plan.skipped:
            return

        if not dep.optional:
            self._plan(dep)
            return

        snap = self._snapshot()
        try:
            self._plan(dep)
        except UnresolvedDependency as e:
            self._restore(snap)
            self.plan.skipped.append(dep.name)
            logger.info(f"跳过可选依赖: {dep.name} ({e.message})")

    def _plan(self, dep: DependencySpec):
        env = resolve_dependency(dep, self.envs)
        if env is not None:
            action = PlanAction(action=PlanActionKind.USE_ENV, dep_names=[dep.name], env=env)
            self.plan.actions.append(action)
            self.plan.binding[dep.name] = env
            self.planned[dep.name] = action
            return

        package = select_package(dep, self.packages) if dep.allow_install else None
        if package is None:
            raise UnresolvedDependency(dep.name)

        if package.key in self.processing:
            start = self.processing.index(package.key)
            raise DependencyCycle(self.processing[start:] + [package.key])

        if package.key in self.installs:
            action = self.installs[package.key]
            action.dep_names.append(dep.name)
            self.planned[dep.name] = action
            return

        self.processing.append(package.key)
        try:
            for sub in package.deps:
                self.visit(sub)
        finally:
            self.processing.pop()

        action = PlanAction(action=PlanActionKind.INSTALL, dep_names=[dep.name], package=package)
        self.plan.actions.append(action)
        self.installs[package.key] = action
        self.planned[dep.name] = action


def build_resolution_plan(deps: list[DependencySpec], envs: list[EnvEntry],
                          packages: list[PackageSpec]) -> ResolutionPlan:
    """生成拓扑有序的解析计划; 每个依赖名只绑定一次, 冲突记录在 conflicts 中"""
    planner = _Planner(envs, packages)
    for dep in deps:
        planner.visit(dep)
    plan = planner.plan
    logger.debug(f"解析计划: {len(plan.actions)} 个动作, 其中 {len(plan.installs())} 个安装")
    return plan


# ============ 下载 ============

class Fetcher:
    """下载器: 支持本地路径, file:// 与 http(s)://"""

    def __init__(self, timeout: float = 60.0, chunk_size: int = 1 << 16):
        self.timeout = timeout
        self.chunk_size = chunk_size

    def fetch(self, url: str, dest: Path):
        parsed = urlparse(url)
        try:
            if parsed.scheme == "file":
                shutil.copyfile(url2pathname(parsed.path), dest)
            elif parsed.scheme in ("", ) or len(parsed.scheme) == 1:
                # 普通路径 (包括 Windows 盘符)
                shutil.copyfile(url, dest)
            elif parsed.scheme in ("http", "https"):
                with httpx.stream("GET", url, timeout=self.timeout, follow_redirects=True) as response:
                    response.raise_for_status()
                    with open(dest, "wb") as f:
                        for chunk in response.iter_bytes(self.chunk_size):
                            f.write(chunk)
            else:
                raise IoFailure(f"不支持的下载地址: {url}", url=url)
        except httpx.HTTPError as e:
            raise IoFailure(f"下载失败: {url}: {e}", url=url)
        except OSError as e:
            raise IoFailure(f"下载失败: {url}: {e}", url=url)


# ============ 安装 ============

def _inside(base: Path, relative: str, step_index: int) -> Path:
    path = (base / relative).resolve()
    if path != base and base not in path.parents:
        raise StepFailed(step_index, None, f"路径越界: {relative}")
    return path


def _check_member(dest: Path, name: str, step_index: int):
    """压缩包成员不能是绝对路径, 不能含 .., 不能指向 dest 之外"""
    parts = Path(name.replace("\\", "/")).parts
    if not name or name.startswith(("/", "\\")) or Path(name).is_absolute() or ".." in parts:
        raise StepFailed(step_index, None, f"压缩包成员越界: {name}")
    _inside(dest, name, step_index)


def _check_link(dest: Path, link: str, step_index: int):
    if Path(link).is_absolute() or link.startswith(("/", "\\")):
        raise StepFailed(step_index, None, f"链接指向压缩包之外: {link}")
    _inside(dest, os.path.normpath(link), step_index)


class PackageInstaller:
    """执行元包的安装步骤"""

    def __init__(self, fetcher: Optional[Fetcher] = None, step_timeout: float = 3600.0,
                 lock_timeout: float = 10.0):
        self.fetcher = fetcher or Fetcher()
        self.step_timeout = step_timeout
        self.lock_timeout = lock_timeout

    def _step_env(self, target: Path, bound_deps: dict[str, EnvEntry]) -> dict[str, str]:
        env = dict(os.environ)
        for entry in bound_deps.values():
            env.update(entry.env_vars)
        env["CK_INSTALL_DIR"] = str(target)
        return env

    def _download(self, index: int, step: DownloadStep, target: Path):
        dest = _inside(target, step.target_name, index)
        self.fetcher.fetch(step.url, dest)
        actual = sha256_file(dest)
        if actual != step.sha256:
            raise ChecksumMismatch(step.url, step.sha256, actual)
        logger.debug(f"下载完成并校验: {step.url}")

    def _extract(self, index: int, step: ExtractStep, target: Path):
        archive = _inside(target, step.archive, index)
        dest = _inside(target, step.dest, index)
        if not archive.is_file():
            raise StepFailed(index, None, f"压缩包不存在: {step.archive}")
        dest.mkdir(parents=True, exist_ok=True)
        try:
            if step.archive_format == "zip":
                with zipfile.ZipFile(archive) as zf:
                    for name in zf.namelist():
                        _check_member(dest, name, index)
                    zf.extractall(dest)
            else:
                with tarfile.open(archive, "r:gz") as tar:
                    members = tar.getmembers()
                    for member in members:
                        _check_member(dest, member.name, index)
                        if member.issym():
                            _check_link(dest, str(Path(member.name).parent / member.linkname), index)
                        elif member.islnk():
                            _check_link(dest, member.linkname, index)
                    if hasattr(tarfile, "data_filter"):
                        tar.extractall(dest, members, filter="data")
                    else:
                        tar.extractall(dest, members)
        except (tarfile.TarError, zipfile.BadZipFile, EOFError) as e:
            raise StepFailed(index, None, f"解压失败: {e}")

    def _script(self, index: int, step: ScriptStep, target: Path, env: dict[str, str], log_dir: Path):
        workdir = _inside(target, step.workdir, index)
        workdir.mkdir(parents=True, exist_ok=True)
        argv = [arg.replace("{install_dir}", str(target)) for arg in step.command]
        stdout = log_dir / f"{target.name}.step{index}.out"
        stderr = log_dir / f"{target.name}.step{index}.err"
        try:
            result = run_to_files(argv, self.step_timeout, workdir, env, stdout, stderr)
        except OSError as e:
            raise StepFailed(index, None, f"无法执行 {argv[0]}: {e}")
        if result.timed_out:
            raise StepFailed(index, None, f"超时 ({self.step_timeout}s)")
        if result.exit_code != 0:
            raise StepFailed(index, result.exit_code, f"日志: {stderr}")

    def install(self, pkg: PackageSpec, target_dir: str | Path, bound_deps: dict[str, EnvEntry],
                repo: Optional[Repository] = None, force: bool = False) -> EnvEntry:
        target = Path(target_dir).expanduser().resolve()
        target.parent.mkdir(parents=True, exist_ok=True)
        with FileLock(target.parent / f".{target.name}.lock", timeout=self.lock_timeout):
            if target.exists() and any(target.iterdir()):
                if not force:
                    raise AlreadyInstalled(f"目标目录非空: {target}", target_dir=str(target))
                shutil.rmtree(target)
            target.mkdir(parents=True, exist_ok=True)

            env = self._step_env(target, bound_deps)
            try:
                for index, step in enumerate(pkg.install_steps):
                    logger.info(f"安装 {pkg.key}: 步骤 {index} ({step.kind})")
                    if isinstance(step, DownloadStep):
                        self._download(index, step, target)
                    elif isinstance(step, ExtractStep):
                        self._extract(index, step, target)
                    else:
                        self._script(index, step, target, env, target.parent)
            except BaseException as e:
                shutil.rmtree(target, ignore_errors=True)
                logger.error(f"安装失败, 已清理 {target}: {e}")
                if isinstance(e, OSError):
                    raise IoFailure(f"安装失败: {pkg.key}: {e}")
                raise

        entry = EnvEntry(
            soft_name=pkg.package_name,
            tags=[*pkg.tags, "installed"],
            version=pkg.version,
            tool_path=str(target),
            install_dir=str(target),
            env_vars={k: v.replace("{install_dir}", str(target)) for k, v in pkg.provides_env.items()},
            platform=collect_platform_info(),
            detected_at=utc_now(),
        )
        if repo is not None:
            register_env(repo, entry)
        logger.info(f"安装完成: {pkg.key} -> {target}")
        return entry


def install_package(pkg: PackageSpec, target_dir: str | Path, bound_deps: dict[str, EnvEntry],
                    repo: Optional[Repository] = None, fetcher: Optional[Fetcher] = None,
                    force: bool = False) -> EnvEntry:
    return PackageInstaller(fetcher).install(pkg, target_dir, bound_deps, repo=repo, force=force)


def default_install_dir(repo: Repository, pkg: PackageSpec) -> Path:
    """<repo-root>/installed/<package_name>-<version>-<uid8>/"""
    return repo.root / "installed" / f"{pkg.package_name}-{pkg.version}-{new_uid()[:8]}"


# ============ 仓库接入 ============

def list_packages(repos: list[Repository]) -> list[PackageSpec]:
    packages = []
    for repo in repos:
        for cid, meta in repo.list_entries("package"):
            try:
                packages.append(PackageSpec(**meta.meta, tags=meta.tags))
            except (ValidationError, TypeError) as e:
                logger.warning(f"忽略无效元包 {cid}: {e}")
    return packages


def find_package(repos: list[Repository], name: str, version: Optional[str] = None) -> PackageSpec:
    """按别名或包名查找元包, 可指定版本; 多个版本时取最高者"""
    candidates = []
    for repo in repos:
        for cid, meta in repo.list_entries("package"):
            if cid.alias != name and meta.meta.get("package_name") != name:
                continue
            try:
                pkg = PackageSpec(**meta.meta, tags=meta.tags)
            except (ValidationError, TypeError) as e:
                logger.warning(f"忽略无效元包 {cid}: {e}")
                continue
            if version is None or pkg.version == Version(version):
                candidates.append(pkg)
    if not candidates:
        raise NotFound(f"未找到元包: {name}{' ' + version if version else ''}", package=name)
    return max(candidates, key=lambda p: p.version)


def execute_plan(plan: ResolutionPlan, repo: Repository, settings: Settings,
                 fetcher: Optional[Fetcher] = None) -> ResolutionPlan:
    """按顺序执行计划中的安装动作, 补全 binding"""
    installer = PackageInstaller(
        fetcher or Fetcher(settings.install.download_timeout_s, settings.install.chunk_size),
        step_timeout=settings.install.step_timeout_s,
        lock_timeout=settings.registry.lock_timeout_s,
    )
    for action in plan.actions:
        if action.action == PlanActionKind.USE_ENV:
            for name in action.dep_names:
                plan.binding[name] = action.env
            continue
        pkg = action.package
        bound = {d.name: plan.binding[d.name] for d in pkg.deps if d.name in plan.binding}
        entry = installer.install(pkg, default_install_dir(repo, pkg), bound, repo=repo)
        for name in action.dep_names:
            plan.binding[name] = entry
    return plan


def install_with_deps(pkg: PackageSpec, repos: list[Repository], settings: Settings,
                      fetcher: Optional[Fetcher] = None, force: bool = False) -> EnvEntry:
    """先规划并安装元包自身的依赖, 再安装元包"""
    repo = repos[0]
    envs = list_envs(repos)
    if not force:
        for env in envs:
            if env.soft_name == pkg.package_name and env.version == pkg.version and "installed" in env.tags:
                raise AlreadyInstalled(f"已安装: {pkg.key} ({env.install_dir})", env_uid=env.uid)
    plan = build_resolution_plan(pkg.deps, envs, list_packages(repos))
    plan = execute_plan(plan, repo, settings, fetcher)
    bound = {d.name: plan.binding[d.name] for d in pkg.deps if d.name in plan.binding}
    installer = PackageInstaller(
        fetcher or Fetcher(settings.install.download_timeout_s, settings.install.chunk_size),
        step_timeout=settings.install.step_timeout_s,
        lock_timeout=settings.registry.lock_timeout_s,
    )
    return installer.install(pkg, default_install_dir(repo, pkg), bound, repo=repo)
