"""
软件探测插件

在搜索根目录中查找可执行文件, 运行版本命令并解析版本号,
生成 EnvEntry 并登记为 env 类型组件
"""
import hashlib
import logging
import os
import platform
import re
import socket
from enum import Enum
from pathlib import Path
from typing import Optional

import psutil
from pydantic import ValidationError

from errors import NotFound, PluginInvalid, UnsupportedDialect
from models import ComponentId, EntryMeta, EnvEntry, PlatformInfo, SoftPlugin, Version
from registry import Repository
from runner import run_capture
from utils import utc_now

logger = logging.getLogger(__name__)

PATH_TOKEN = "$PATH"


class Ordering(str, Enum):
    LESS = "less"
    EQUAL = "equal"
    GREATER = "greater"


class ScriptDialect(str, Enum):
    POSIX_SHELL = "posix-shell"
    WINDOWS_BATCH = "windows-batch"


def compare_versions(a: Version, b: Version) -> Ordering:
    """版本全序比较"""
    c = a.compare(b)
    if c < 0:
        return Ordering.LESS
    if c > 0:
        return Ordering.GREATER
    return Ordering.EQUAL


def load_plugin(meta: EntryMeta) -> SoftPlugin:
    """从 soft 类型组件的元信息构造插件"""
    try:
        return SoftPlugin(**meta.meta, tags=meta.tags)
    except (ValidationError, TypeError) as e:
        raise PluginInvalid(f"探测插件无效: {e}")


# ============ 平台信息 ============

def _cpu_model() -> str:
    model = platform.processor()
    if model:
        return model
    try:
        with open("/proc/cpuinfo", "r", encoding="utf-8", errors="replace") as f:
            for line in f:
                if line.lower().startswith("model name"):
                    return line.split(":", 1)[1].strip()
    except OSError:
        pass
    return platform.machine() or "unknown"


def collect_platform_info() -> PlatformInfo:
    """收集平台指纹; 任何未知值都回退为 'unknown'/0"""
    try:
        memory_mb = psutil.virtual_memory().total // (1024 * 1024)
    except Exception:
        memory_mb = 0
    try:
        cpu_count = psutil.cpu_count(logical=True) or os.cpu_count() or 1
    except Exception:
        cpu_count = os.cpu_count() or 1
    try:
        hostname = socket.gethostname()
    except OSError:
        hostname = "unknown"
    return PlatformInfo(
        os_name=platform.system().lower() or "unknown",
        os_version=platform.release() or "unknown",
        cpu_model=_cpu_model(),
        cpu_count=max(1, cpu_count),
        memory_mb=max(0, int(memory_mb)),
        hostname_hash=hashlib.sha256(hostname.encode("utf-8")).hexdigest()[:16],
    )


# ============ 探测 ============

def _expand_roots(roots: list[str]) -> list[tuple[Path, bool]]:
    """返回 (目录, 是否额外搜索 bin/)"""
    expanded = []
    for root in roots:
        if root == PATH_TOKEN:
            for d in os.environ.get("PATH", "").split(os.pathsep):
                if d:
                    expanded.append((Path(d), False))
        else:
            expanded.append((Path(root).expanduser(), True))
    return expanded


def _candidate_names(name: str) -> list[str]:
    if os.name == "nt" and not name.lower().endswith(".exe"):
        return [name, name + ".exe"]
    return [name]


def _find_candidates(plugin: SoftPlugin, roots: list[str]) -> list[Path]:
    seen: set[str] = set()
    candidates = []
    for root, with_bin in _expand_roots(roots):
        dirs = [root, root / "bin"] if with_bin else [root]
        for binary in plugin.probe.binary_names:
            for d in dirs:
                for name in _candidate_names(binary):
                    path = d / name
                    if not path.is_file() or not os.access(path, os.X_OK):
                        continue
                    resolved = os.path.realpath(path)
                    if resolved in seen:
                        continue
                    seen.add(resolved)
                    candidates.append(Path(resolved))
    return candidates


def _render_template(template: str, values: dict[str, str]) -> str:
    return re.sub(r"\{(path|dir|version)\}", lambda m: values[m.group(1)], template)


def detect_software(plugin: SoftPlugin, extra_roots: Optional[list[str]] = None,
                    timeout: Optional[float] = None, output_limit: int = 64 * 1024) -> list[EnvEntry]:
    """
    探测插件描述的软件

    顺序为 (搜索根目录顺序, binary_names 顺序); extra_roots 排在插件自带的根目录之前。
    任何候选的失败都只会被跳过
    """
    try:
        plugin = SoftPlugin.model_validate(plugin.model_dump())
    except ValidationError as e:
        raise PluginInvalid(f"探测插件无效: {e}")

    roots = list(extra_roots or []) + list(plugin.probe.search_roots)
    run_timeout = timeout if timeout is not None else plugin.probe.run_timeout_s
    regex = re.compile(plugin.probe.version_regex)
    platform_info = collect_platform_info()

    entries = []
    for path in _find_candidates(plugin, roots):
        try:
            result = run_capture([str(path), *plugin.probe.version_args],
                                 timeout=run_timeout, limit=output_limit)
        except OSError as e:
            logger.warning(f"探测失败: {path}: {e}")
            continue
        if result.timed_out:
            logger.warning(f"探测超时: {path} ({run_timeout}s)")
            continue
        match = regex.search(result.output)
        if not match or not match.group(1):
            logger.debug(f"未能解析版本: {path}")
            continue

        version = Version(match.group(1))
        values = {"path": str(path), "dir": str(path.parent), "version": version.raw}
        entries.append(EnvEntry(
            soft_name=plugin.soft_name,
            tags=[*plugin.tags, "detected"],
            version=version,
            tool_path=str(path),
            env_vars={k: _render_template(t, values) for k, t in plugin.env_template.items()},
            platform=platform_info,
            detected_at=utc_now(),
        ))
        logger.info(f"探测到软件: {plugin.soft_name} {version} ({path})")

    if not entries:
        logger.info(f"未探测到软件: {plugin.soft_name}")
    return entries


# ============ 环境登记 ============

def _env_meta(entry: EnvEntry) -> EntryMeta:
    data = entry.model_dump(mode="json", exclude={"uid", "tags"})
    return EntryMeta(tags=entry.tags, meta=data)


def load_env(cid: ComponentId, meta: EntryMeta) -> EnvEntry:
    return EnvEntry(**meta.meta, tags=meta.tags, uid=cid.uid)


def list_envs(repos: list[Repository], tags: Optional[list[str]] = None) -> list[EnvEntry]:
    """按仓库顺序列出全部环境"""
    wanted = {t.lower() for t in tags or []}
    envs = []
    for repo in repos:
        for cid, meta in repo.list_entries("env"):
            if wanted <= set(meta.tags):
                envs.append(load_env(cid, meta))
    return envs


def register_env(repo: Repository, entry: EnvEntry) -> ComponentId:
    """登记环境; 相同 (tool_path, version) 重复探测时只刷新 detected_at"""
    with repo.kind_lock("env"):
        for cid, meta in repo.list_entries("env"):
            if meta.meta.get("tool_path") == entry.tool_path and meta.meta.get("version") == entry.version.raw:
                refreshed = meta.model_copy(update={
                    "meta": {**meta.meta, "detected_at": entry.detected_at.isoformat()},
                    "tags": sorted(set(meta.tags) | set(entry.tags)),
                })
                repo.update_entry("env", cid.uid, refreshed)
                entry.uid = cid.uid
                logger.info(f"刷新环境: {entry.soft_name} {entry.version} ({cid.uid})")
                return cid

        cid = repo.add_entry("env", None, _env_meta(entry))
    entry.uid = cid.uid
    return cid


def find_env(repos: list[Repository], uid: str) -> EnvEntry:
    for repo in repos:
        try:
            cid, meta = repo.find_entry("env", uid)
        except NotFound:
            continue
        return load_env(cid, meta)
    raise NotFound(f"未找到环境: {uid}", uid=uid)


# ============ 环境脚本 ============

def _escape_posix(value: str) -> str:
    return re.sub(r'(["\\$`])', r"\\\1", value)


def render_env_script(entry: EnvEntry, dialect: str | ScriptDialect) -> str:
    """生成按键排序的环境变量导出脚本"""
    try:
        dialect = ScriptDialect(dialect)
    except ValueError:
        raise UnsupportedDialect(f"不支持的脚本方言: {dialect}", dialect=str(dialect))

    lines = []
    for key in sorted(entry.env_vars):
        value = entry.env_vars[key]
        if dialect == ScriptDialect.POSIX_SHELL:
            lines.append(f'export {key}="{_escape_posix(value)}"\n')
        else:
            lines.append(f"set {key}={value}\n")
    return "".join(lines)
