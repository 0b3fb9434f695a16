"""
基于文件的组件仓库

布局:
    <root>/.ckr.json
    <root>/.ckr-index.json                      uid -> 目录名 索引 (过期时重建)
    <root>/<kind>/<alias-or-uid>/.meta/meta.json
    <root>/<kind>/<alias-or-uid>/.meta/info.json
"""
import logging
import os
import shutil
import tempfile
from pathlib import Path
from typing import Iterable, Optional

from errors import (
    AmbiguousKey, DuplicateAlias, InvalidAlias, IoFailure, NotFound, UnknownKind, UsageError,
)
from models import ALIAS_RE, HEX16_RE, KINDS, ComponentId, EntryMeta, RepoDescriptor
from utils import FileLock, new_uid, read_json, write_json_atomic

logger = logging.getLogger(__name__)

REPO_DESCRIPTOR = ".ckr.json"
INDEX_FILE = ".ckr-index.json"
INDEX_LOCK = ".ckr-index.lock"
META_DIR = ".meta"
SCHEMA_VERSION = 1


def parse_ref(text: str) -> tuple[str, str]:
    """解析 'kind:key'"""
    kind, sep, key = text.partition(":")
    if not sep or not kind or not key:
        raise UsageError(f"组件引用应为 kind:key 形式: {text!r}")
    return kind, key


class Repository:
    """组件仓库"""

    def __init__(self, descriptor: RepoDescriptor, lock_timeout: float = 10.0):
        self.descriptor = descriptor
        self.lock_timeout = lock_timeout

    @property
    def root(self) -> Path:
        return self.descriptor.root_path

    @property
    def alias(self) -> str:
        return self.descriptor.alias

    def __repr__(self) -> str:
        return f"Repository({self.alias!r}, {str(self.root)!r})"

    # ============ 内部工具 ============

    @staticmethod
    def _check_kind(kind: str):
        if kind not in KINDS:
            raise UnknownKind(f"未知组件类型: {kind}", kind=kind, known=list(KINDS))

    def _kind_dir(self, kind: str) -> Path:
        return self.root / kind

    def _index_lock(self) -> FileLock:
        return FileLock(self.root / INDEX_LOCK, timeout=self.lock_timeout)

    def kind_lock(self, kind: str) -> FileLock:
        """同一类型内 "先查后写" 的操作需要持有的锁, 与索引锁相互独立"""
        self._check_kind(kind)
        return FileLock(self.root / f".ckr-{kind}.lock", timeout=self.lock_timeout)

    def _load_index(self) -> dict[str, dict[str, str]]:
        path = self.root / INDEX_FILE
        if not path.exists():
            return {}
        try:
            return read_json(path).get("kinds", {})
        except IoFailure:
            logger.warning(f"索引损坏, 将重建: {path}")
            return {}

    def _write_index(self, index: dict[str, dict[str, str]]):
        write_json_atomic(self.root / INDEX_FILE, {"kinds": index})

    def _entry_dirs(self, kind: str) -> Iterable[Path]:
        kind_dir = self._kind_dir(kind)
        if not kind_dir.is_dir():
            return []
        return sorted(
            p for p in kind_dir.iterdir()
            if p.is_dir() and not p.name.startswith(".") and (p / META_DIR / "info.json").is_file()
        )

    def _scan_index(self) -> dict[str, dict[str, str]]:
        index: dict[str, dict[str, str]] = {}
        for kind in KINDS:
            entries: dict[str, str] = {}
            for path in self._entry_dirs(kind):
                uid = read_json(path / META_DIR / "info.json")["uid"]
                if uid in entries:
                    raise AmbiguousKey(f"仓库损坏: {kind} 中 uid {uid} 重复", kind=kind, uid=uid)
                entries[uid] = path.name
            if entries:
                index[kind] = entries
        return index

    def rebuild_index(self) -> dict[str, dict[str, str]]:
        """重新扫描目录树重建 uid 索引"""
        with self._index_lock():
            index = self._scan_index()
            self._write_index(index)
        logger.debug(f"索引已重建: {self.alias}")
        return index

    def _load_entry(self, kind: str, path: Path) -> tuple[ComponentId, EntryMeta]:
        info = read_json(path / META_DIR / "info.json")
        meta = read_json(path / META_DIR / "meta.json")
        tags = meta.pop("tags", [])
        cid = ComponentId(repo_alias=self.alias, kind=kind, uid=info["uid"], alias=info.get("alias"))
        entry = EntryMeta(
            tags=tags, meta=meta,
            created_at=info["created_at"], schema_version=info.get("schema_version", SCHEMA_VERSION),
        )
        return cid, entry

    def _resolve_path(self, kind: str, key: str) -> Path:
        self._check_kind(kind)
        if HEX16_RE.match(key):
            name = self._load_index().get(kind, {}).get(key)
            if name is not None:
                path = self._kind_dir(kind) / name
                info_path = path / META_DIR / "info.json"
                if info_path.is_file() and read_json(info_path).get("uid") == key:
                    return path
            # 索引过期
            name = self.rebuild_index().get(kind, {}).get(key)
            if name is None:
                raise NotFound(f"未找到组件: {kind}:{key}", kind=kind, key=key)
            return self._kind_dir(kind) / name

        if not ALIAS_RE.match(key):
            raise NotFound(f"未找到组件: {kind}:{key}", kind=kind, key=key)
        path = self._kind_dir(kind) / key
        info_path = path / META_DIR / "info.json"
        if not info_path.is_file() or read_json(info_path).get("alias") != key:
            raise NotFound(f"未找到组件: {kind}:{key}", kind=kind, key=key)
        return path

    # ============ 公共操作 ============

    def add_entry(self, kind: str, alias: Optional[str], meta: EntryMeta,
                  payload_dir: Optional[str | Path] = None, uid: Optional[str] = None) -> ComponentId:
        """添加组件; 整个条目目录先在临时目录中写好再 rename"""
        self._check_kind(kind)
        if alias is not None and (not ALIAS_RE.match(alias) or HEX16_RE.match(alias)):
            raise InvalidAlias(f"非法别名: {alias!r}", alias=alias)
        if uid is not None and not HEX16_RE.match(uid):
            raise UsageError(f"非法UID: {uid}")

        kind_dir = self._kind_dir(kind)
        try:
            kind_dir.mkdir(parents=True, exist_ok=True)
            staging = Path(tempfile.mkdtemp(prefix=".tmp-", dir=kind_dir))
        except OSError as e:
            raise IoFailure(f"创建条目目录失败: {kind_dir}: {e}")

        try:
            entry_dir = staging / "entry"
            if payload_dir is not None:
                shutil.copytree(payload_dir, entry_dir)
            else:
                entry_dir.mkdir()
            (entry_dir / META_DIR).mkdir(exist_ok=True)
            write_json_atomic(entry_dir / META_DIR / "meta.json", {**meta.meta, "tags": meta.tags})

            with self._index_lock():
                index = self._load_index()
                taken = index.setdefault(kind, {})
                if uid is None:
                    uid = new_uid(taken)
                elif uid in taken:
                    raise AmbiguousKey(f"UID 已存在: {kind}:{uid}", kind=kind, uid=uid)
                name = alias or uid
                final = kind_dir / name
                if final.exists():
                    if alias is not None:
                        raise DuplicateAlias(f"别名已存在: {kind}:{alias}", kind=kind, alias=alias)
                    raise AmbiguousKey(f"条目目录已存在: {final}")
                # info.json 最后写入, 作为条目完整的标志
                write_json_atomic(entry_dir / META_DIR / "info.json", {
                    "uid": uid,
                    "alias": alias,
                    "kind": kind,
                    "created_at": meta.created_at,
                    "schema_version": meta.schema_version,
                })
                os.rename(entry_dir, final)
                taken[uid] = name
                self._write_index(index)
        except OSError as e:
            raise IoFailure(f"写入条目失败: {kind}:{alias or uid}: {e}")
        finally:
            shutil.rmtree(staging, ignore_errors=True)

        cid = ComponentId(repo_alias=self.alias, kind=kind, uid=uid, alias=alias)
        logger.info(f"添加组件: {cid} ({uid})")
        return cid

    def find_entry(self, kind: str, key: str) -> tuple[ComponentId, EntryMeta]:
        """按别名或 uid 查找组件"""
        return self._load_entry(kind, self._resolve_path(kind, key))

    def entry_path(self, kind: str, key: str) -> Path:
        """组件目录 (payload 所在位置)"""
        return self._resolve_path(kind, key)

    def update_entry(self, kind: str, key: str, meta: EntryMeta) -> ComponentId:
        """更新组件的 meta 与标签, 持有条目锁"""
        path = self._resolve_path(kind, key)
        with FileLock(path / META_DIR / ".lock", timeout=self.lock_timeout):
            write_json_atomic(path / META_DIR / "meta.json", {**meta.meta, "tags": meta.tags})
        cid, _ = self._load_entry(kind, path)
        logger.debug(f"更新组件: {cid}")
        return cid

    def remove_entry(self, kind: str, key: str):
        """删除组件目录"""
        path = self._resolve_path(kind, key)
        cid, _ = self._load_entry(kind, path)
        with self._index_lock():
            trash = path.parent / f".rm-{cid.uid}"
            try:
                os.rename(path, trash)
                shutil.rmtree(trash)
            except OSError as e:
                raise IoFailure(f"删除条目失败: {path}: {e}")
            index = self._load_index()
            index.get(kind, {}).pop(cid.uid, None)
            self._write_index(index)
        logger.info(f"删除组件: {cid}")

    def list_entries(self, kind: str) -> list[tuple[ComponentId, EntryMeta]]:
        """列出某类型的全部组件, 按 uid 排序"""
        self._check_kind(kind)
        entries = [self._load_entry(kind, path) for path in self._entry_dirs(kind)]
        return sorted(entries, key=lambda e: e[0].uid)

    def entry_tags(self, kind: str) -> list[tuple[ComponentId, set[str]]]:
        result = []
        for path in self._entry_dirs(kind):
            info = read_json(path / META_DIR / "info.json")
            tags = read_json(path / META_DIR / "meta.json").get("tags", [])
            result.append((ComponentId(repo_alias=self.alias, kind=kind, uid=info["uid"],
                                       alias=info.get("alias")), set(tags)))
        return result


# ============ 仓库的创建与打开 ============

def init_repo(path: str | Path, alias: str, lock_timeout: float = 10.0) -> Repository:
    """初始化仓库; 已存在且别名一致时直接打开"""
    if not ALIAS_RE.match(alias):
        raise InvalidAlias(f"非法仓库别名: {alias!r}", alias=alias)
    root = Path(path).expanduser().resolve()
    descriptor_path = root / REPO_DESCRIPTOR
    if descriptor_path.exists():
        repo = open_repo(root, lock_timeout)
        if repo.alias != alias:
            raise DuplicateAlias(f"仓库已存在且别名为 {repo.alias}: {root}", alias=repo.alias)
        return repo
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoFailure(f"创建仓库目录失败: {root}: {e}")
    uid = new_uid()
    write_json_atomic(descriptor_path, {"uid": uid, "alias": alias, "schema_version": SCHEMA_VERSION})
    logger.info(f"初始化仓库: {alias} ({root})")
    return Repository(RepoDescriptor(root_path=root, alias=alias, uid=uid), lock_timeout)


def open_repo(path: str | Path, lock_timeout: float = 10.0) -> Repository:
    root = Path(path).expanduser().resolve()
    descriptor_path = root / REPO_DESCRIPTOR
    if not descriptor_path.is_file():
        raise NotFound(f"不是组件仓库: {root}", path=str(root))
    data = read_json(descriptor_path)
    return Repository(RepoDescriptor(root_path=root, alias=data["alias"], uid=data["uid"]), lock_timeout)


def open_repos(paths: list[Path], lock_timeout: float = 10.0, create_first: bool = False) -> list[Repository]:
    """按搜索顺序打开仓库, 不存在的仓库被跳过; create_first 时自动创建写入目标"""
    repos = []
    for i, path in enumerate(paths):
        try:
            repos.append(open_repo(path, lock_timeout))
        except NotFound:
            if i == 0 and create_first:
                alias = Path(path).name if ALIAS_RE.match(Path(path).name) else "local"
                repos.append(init_repo(path, alias, lock_timeout))
            else:
                logger.warning(f"跳过不存在的仓库: {path}")
    return repos


def find_in_repos(repos: list[Repository], kind: str, key: str) -> tuple[Repository, ComponentId, EntryMeta]:
    """按仓库顺序查找, 返回第一个匹配"""
    for repo in repos:
        try:
            cid, meta = repo.find_entry(kind, key)
            return repo, cid, meta
        except NotFound:
            continue
    raise NotFound(f"未找到组件: {kind}:{key}", kind=kind, key=key)


def search_by_tags(repos: list[Repository], kind: Optional[str], tags: Iterable[str]) -> list[ComponentId]:
    """返回标签集合为查询超集的全部组件, 按 (repo_alias, kind, uid) 排序"""
    query = {t.lower() for t in tags}
    if not query:
        raise UsageError("tags 不能为空")
    kinds = [kind] if kind else list(KINDS)
    results = []
    for repo in repos:
        for k in kinds:
            Repository._check_kind(k)
            results.extend(cid for cid, entry_tags in repo.entry_tags(k) if query <= entry_tags)
    return sorted(results, key=lambda c: (c.repo_alias, c.kind, c.uid))
