"""
子进程执行: 超时, 进程组终止, 输出截断
"""
import logging
import os
import signal
import subprocess
import threading
import time
from pathlib import Path
from typing import Optional

from pydantic import BaseModel

logger = logging.getLogger(__name__)

_POSIX = os.name == "posix"


class ProcessResult(BaseModel):
    """子进程结果"""
    exit_code: Optional[int] = None
    timed_out: bool = False
    wall_time_s: float = 0.0
    output: str = ""


def _popen_kwargs() -> dict:
    # 独立进程组, 超时时可以连同孙进程一起终止
    if _POSIX:
        return {"start_new_session": True}
    return {"creationflags": getattr(subprocess, "CREATE_NEW_PROCESS_GROUP", 0)}


def _kill_tree(proc: subprocess.Popen):
    try:
        if _POSIX:
            os.killpg(proc.pid, signal.SIGKILL)
        else:
            proc.kill()
    except (ProcessLookupError, PermissionError, OSError):
        pass


def _drain(stream, limit: int, kept: bytearray, chunk_size: int = 64 * 1024):
    # 一直读到 EOF, 超过 limit 的部分直接丢弃, 子进程不会因管道写满而阻塞
    try:
        while True:
            chunk = stream.read1(chunk_size)
            if not chunk:
                break
            room = limit - len(kept)
            if room > 0:
                kept.extend(chunk[:room])
    except (OSError, ValueError):
        pass
    finally:
        stream.close()


def run_capture(argv: list[str], timeout: float, cwd: Optional[str | Path] = None,
                env: Optional[dict[str, str]] = None, limit: int = 64 * 1024) -> ProcessResult:
    """运行并捕获合并后的 stdout+stderr, 内存中最多保留前 limit 字节"""
    start = time.perf_counter()
    proc = subprocess.Popen(
        argv, cwd=cwd, env=env,
        stdin=subprocess.DEVNULL, stdout=subprocess.PIPE, stderr=subprocess.STDOUT,
        **_popen_kwargs(),
    )
    kept = bytearray()
    reader = threading.Thread(target=_drain, args=(proc.stdout, limit, kept), daemon=True)
    reader.start()
    timed_out = False
    try:
        proc.wait(timeout=timeout)
    except subprocess.TimeoutExpired:
        timed_out = True
        _kill_tree(proc)
        proc.wait()
    wall = time.perf_counter() - start
    reader.join(timeout=1.0)
    return ProcessResult(
        exit_code=None if timed_out else proc.returncode,
        timed_out=timed_out,
        wall_time_s=wall,
        output=bytes(kept[:limit]).decode("utf-8", errors="replace"),
    )


def run_to_files(argv: list[str], timeout: float, cwd: str | Path, env: Optional[dict[str, str]],
                 stdout_path: str | Path, stderr_path: str | Path) -> ProcessResult:
    """运行并把 stdout/stderr 写入文件, 计时使用单调时钟"""
    with open(stdout_path, "wb") as out, open(stderr_path, "wb") as err:
        start = time.perf_counter()
        proc = subprocess.Popen(
            argv, cwd=cwd, env=env,
            stdin=subprocess.DEVNULL, stdout=out, stderr=err,
            **_popen_kwargs(),
        )
        timed_out = False
        try:
            proc.wait(timeout=timeout)
        except subprocess.TimeoutExpired:
            timed_out = True
            _kill_tree(proc)
            proc.wait()
        wall = time.perf_counter() - start
    if timed_out:
        logger.warning(f"进程超时 ({timeout}s) 已终止: {argv[0]}")
    return ProcessResult(
        exit_code=None if timed_out else proc.returncode,
        timed_out=timed_out,
        wall_time_s=wall,
    )
