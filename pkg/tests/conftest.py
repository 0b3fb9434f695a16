"""
共享的测试夹具: 临时仓库, 绑定到仓库的配置, 桩程序
"""
import os
import stat
import sys
import textwrap
from pathlib import Path

import pytest

from config import Settings
from models import EntryMeta
from registry import init_repo

POSIX_ONLY = pytest.mark.skipif(os.name != "posix", reason="需要 POSIX shell 桩程序")

STUB_PROGRAM = textwrap.dedent("""
    import json
    import sys
    import time

    args = sys.argv[1:]
    threads = int(args[args.index("--threads") + 1])
    mode = args[args.index("--mode") + 1] if "--mode" in args else "ok"
    if mode == "crash":
        sys.exit(7)
    if mode == "sleep":
        time.sleep(30)
    if mode == "nan":
        with open("ck-result.json", "w") as f:
            f.write('{"x": "NaN"}')
        sys.exit(0)
    if mode == "huge":
        with open("ck-result.json", "w") as f:
            f.write('{"x": 1' + "0" * 400 + "}")
        sys.exit(0)
    with open("ck-result.json", "w") as f:
        json.dump({"time_s": 1 + 0.1 * threads, "accuracy": 0.9}, f)
    print(f"latency: {12.5 * threads} ms")
""")


@pytest.fixture
def repo(tmp_path):
    return init_repo(tmp_path / "repo", "local")


@pytest.fixture
def settings(repo, monkeypatch):
    for key in list(os.environ):
        if key.startswith("CK_"):
            monkeypatch.delenv(key)
    monkeypatch.setenv("CK_REPOS", str(repo.root))
    return Settings()


def program_meta(**overrides) -> dict:
    meta = {
        "program_name": "stub",
        "run": {
            "argv": [sys.executable, "{src_dir}/prog.py", "--threads", "{threads}", "--mode", "{mode}"],
            "repeat_default": 1,
            "params": {"mode": "ok"},
        },
        "extractor": {"mode": "result-file"},
        "exposed": {
            "/run/params/threads": {"domain": {"type": "categorical", "values": [1, 2, 4]}},
        },
        "units": {"time_s": "s"},
    }
    meta.update(overrides)
    return meta


@pytest.fixture
def make_program(repo, tmp_path):
    """在仓库中登记一个以 Python 脚本为载荷的程序"""
    def factory(alias: str = "stub", source: str = STUB_PROGRAM, **overrides):
        payload = tmp_path / f"payload-{alias}"
        payload.mkdir()
        (payload / "prog.py").write_text(source, encoding="utf-8")
        meta = program_meta(**overrides)
        repo.add_entry("program", alias, EntryMeta(tags=["program", "stub"], meta=meta), payload_dir=payload)
        return alias
    return factory


def write_executable(path: Path, body: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("#!/bin/sh\n" + body, encoding="utf-8")
    path.chmod(path.stat().st_mode | stat.S_IXUSR | stat.S_IXGRP | stat.S_IXOTH)
    return path
