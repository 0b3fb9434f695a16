"""
通用工具: 规范化 JSON, 原子写入, UID, 锁文件, JSON Pointer
"""
import copy
import hashlib
import json
import logging
import os
import re
import secrets
import tempfile
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable

import psutil

from errors import IoFailure, LockTimeout

logger = logging.getLogger(__name__)

UID_RE = re.compile(r"^[0-9a-f]{16}$")


def canonical_dumps(obj: Any) -> str:
    """规范化序列化: UTF-8, 键排序, 2空格缩进, 末尾换行"""
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def read_json(path: str | Path) -> Any:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise IoFailure(f"JSON 解析失败: {path}: {e}", path=str(path))
    except OSError as e:
        raise IoFailure(f"读取失败: {path}: {e}", path=str(path))


def write_text_atomic(path: str | Path, text: str):
    """先写临时文件再 rename"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except OSError as e:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise IoFailure(f"写入失败: {path}: {e}", path=str(path))


def write_json_atomic(path: str | Path, obj: Any):
    write_text_atomic(path, canonical_dumps(obj))


def new_uid(taken: Iterable[str] = ()) -> str:
    """16位小写十六进制UID, 碰撞时重新生成"""
    taken = set(taken)
    while True:
        uid = secrets.token_hex(8)
        if uid not in taken:
            return uid


def utc_now() -> datetime:
    return datetime.now(timezone.utc)


def utc_now_iso() -> str:
    return utc_now().isoformat()


def sha256_file(path: str | Path, chunk_size: int = 1 << 16) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(chunk_size), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class FileLock:
    """基于 O_CREAT|O_EXCL 的锁文件, 跨进程有效"""

    def __init__(self, path: str | Path, timeout: float = 10.0, poll_interval: float = 0.02):
        self.path = Path(path)
        self.timeout = timeout
        self.poll_interval = poll_interval
        self._fd: int | None = None

    def acquire(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        for attempt in range(2):
            deadline = time.monotonic() + self.timeout
            while True:
                try:
                    self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
                    os.write(self._fd, str(os.getpid()).encode())
                    return
                except FileExistsError:
                    if time.monotonic() >= deadline:
                        break
                    time.sleep(self.poll_interval)
                except OSError as e:
                    raise IoFailure(f"创建锁文件失败: {self.path}: {e}", path=str(self.path))
            if attempt == 0 and self._break_stale():
                continue
            raise LockTimeout(f"获取锁超时: {self.path}", path=str(self.path))

    def _holder(self) -> int | None:
        try:
            text = self.path.read_text(encoding="ascii").strip()
        except (OSError, UnicodeDecodeError):
            return None
        return int(text) if text.isdigit() else None

    def _break_stale(self) -> bool:
        """持有者进程已退出, 或锁文件没有 pid 且超过超时时间, 视为残留锁"""
        pid = self._holder()
        if pid is not None:
            stale = not psutil.pid_exists(pid)
        else:
            try:
                stale = time.time() - self.path.stat().st_mtime > self.timeout
            except FileNotFoundError:
                return True
        if not stale:
            return False
        logger.warning(f"清除残留锁: {self.path} (pid={pid})")
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass
        except OSError as e:
            raise IoFailure(f"清除残留锁失败: {self.path}: {e}", path=str(self.path))
        return True

    def release(self):
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
            try:
                os.unlink(self.path)
            except FileNotFoundError:
                pass

    def __enter__(self) -> "FileLock":
        self.acquire()
        return self

    def __exit__(self, *exc):
        self.release()


# ============ JSON Pointer (RFC 6901) ============

def split_pointer(pointer: str) -> list[str]:
    if pointer == "":
        return []
    if not pointer.startswith("/"):
        raise ValueError(f"非法 JSON Pointer: {pointer!r}")
    return [p.replace("~1", "/").replace("~0", "~") for p in pointer[1:].split("/")]


def pointer_get(doc: Any, pointer: str) -> Any:
    node = doc
    for part in split_pointer(pointer):
        if isinstance(node, dict):
            node = node[part]
        elif isinstance(node, list):
            node = node[int(part)]
        else:
            raise KeyError(pointer)
    return node


def pointer_set(doc: Any, pointer: str, value: Any) -> Any:
    """返回新文档, 中间缺失的对象会被创建"""
    doc = copy.deepcopy(doc)
    parts = split_pointer(pointer)
    if not parts:
        return copy.deepcopy(value)
    node = doc
    for part in parts[:-1]:
        if isinstance(node, list):
            node = node[int(part)]
            continue
        node = node.setdefault(part, {})
    if isinstance(node, list):
        node[int(parts[-1])] = copy.deepcopy(value)
    else:
        node[parts[-1]] = copy.deepcopy(value)
    return doc
