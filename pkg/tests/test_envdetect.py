import json
import random
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import pytest

from envdetect import (
    Ordering, collect_platform_info, compare_versions, detect_software, find_env, list_envs, load_plugin,
    register_env, render_env_script,
)
from errors import NotFound, PluginInvalid, UnsupportedDialect
from models import EntryMeta, EnvEntry, SoftPlugin, Version

from conftest import POSIX_ONLY, write_executable


def make_plugin(roots, **probe) -> SoftPlugin:
    return SoftPlugin(
        soft_name="fake compiler",
        tags=["compiler", "fake"],
        probe={
            "binary_names": ["fakecc"],
            "search_roots": roots,
            "version_args": ["--version"],
            "version_regex": r"fakecc version ([0-9.]+)",
            **probe,
        },
        env_template={"CK_CC": "{path}", "CK_CC_DIR": "{dir}", "CK_CC_VERSION": "{version}"},
    )


@pytest.mark.parametrize("a,b,expected", [
    ("1.10", "1.9", Ordering.GREATER),
    ("1.2", "1.2.0", Ordering.EQUAL),
    ("1.2.0-rc1", "1.2.0", Ordering.GREATER),
    ("2_1", "2.1", Ordering.EQUAL),
    ("1.a", "1.b", Ordering.LESS),
    ("1.2", "1.a", Ordering.LESS),
])
def test_compare_versions(a, b, expected):
    assert compare_versions(Version(a), Version(b)) == expected


def test_version_order_is_total():
    rng = random.Random(7)
    tokens = ["0", "1", "2", "10", "a", "b", "rc1"]
    versions = [Version(".".join(rng.choices(tokens, k=rng.randint(1, 4)))) for _ in range(60)]
    for a in versions:
        for b in versions:
            assert a.compare(b) == -b.compare(a)
            if a == b:
                assert hash(a) == hash(b)
    ordered = sorted(versions)
    assert all(x <= y for x, y in zip(ordered, ordered[1:]))


def test_platform_info_is_complete():
    info = collect_platform_info()
    assert info.os_name
    assert info.cpu_count >= 1
    assert info.memory_mb >= 0
    assert len(info.hostname_hash) == 16


def test_plugin_requires_one_group():
    with pytest.raises(ValueError):
        make_plugin([], version_regex=r"(\d+)\.(\d+)")


def test_load_plugin_rejects_bad_meta():
    with pytest.raises(PluginInvalid):
        load_plugin(EntryMeta(meta={"soft_name": "x", "probe": {"binary_names": []}}))


@POSIX_ONLY
def test_detect_two_installs(tmp_path):
    write_executable(tmp_path / "a" / "bin" / "fakecc", 'echo "fakecc version 1.2.3"\n')
    write_executable(tmp_path / "b" / "bin" / "fakecc", 'echo "fakecc version 2.0"\n')
    plugin = make_plugin([str(tmp_path / "a"), str(tmp_path / "b")])

    entries = detect_software(plugin)
    assert [str(e.version) for e in entries] == ["1.2.3", "2.0"]
    first = entries[0]
    assert first.tool_path.endswith("a/bin/fakecc")
    assert first.env_vars["CK_CC"] == first.tool_path
    assert first.env_vars["CK_CC_VERSION"] == "1.2.3"
    assert first.env_vars["CK_CC_DIR"].endswith("a/bin")
    assert "detected" in first.tags and "compiler" in first.tags


@POSIX_ONLY
def test_detect_extra_roots_come_first(tmp_path):
    write_executable(tmp_path / "a" / "fakecc", 'echo "fakecc version 1.0"\n')
    write_executable(tmp_path / "b" / "fakecc", 'echo "fakecc version 3.0"\n')
    plugin = make_plugin([str(tmp_path / "a")])
    entries = detect_software(plugin, extra_roots=[str(tmp_path / "b")])
    assert [str(e.version) for e in entries] == ["3.0", "1.0"]


@POSIX_ONLY
def test_detect_skips_bad_candidates(tmp_path):
    write_executable(tmp_path / "nover" / "fakecc", 'echo "no version here"\n')
    write_executable(tmp_path / "slow" / "fakecc", "sleep 10\n")
    write_executable(tmp_path / "good" / "fakecc", 'echo "fakecc version 4.5"\n')
    (tmp_path / "noexec").mkdir()
    (tmp_path / "noexec" / "fakecc").write_text("not executable", encoding="utf-8")
    roots = [str(tmp_path / d) for d in ("nover", "slow", "noexec", "good")]

    entries = detect_software(make_plugin(roots), timeout=0.5)
    assert [str(e.version) for e in entries] == ["4.5"]


@POSIX_ONLY
def test_detect_dedups_symlinks(tmp_path):
    target = write_executable(tmp_path / "real" / "fakecc", 'echo "fakecc version 1.0"\n')
    (tmp_path / "link").mkdir()
    (tmp_path / "link" / "fakecc").symlink_to(target)
    entries = detect_software(make_plugin([str(tmp_path / "real"), str(tmp_path / "link")]))
    assert len(entries) == 1


@POSIX_ONLY
def test_detect_searches_path(tmp_path, monkeypatch):
    write_executable(tmp_path / "onpath" / "fakecc", 'echo "fakecc version 9.1"\n')
    monkeypatch.setenv("PATH", str(tmp_path / "onpath"))
    entries = detect_software(make_plugin(["$PATH"]))
    assert [str(e.version) for e in entries] == ["9.1"]


@POSIX_ONLY
def test_hanging_candidate_is_cut_at_timeout(tmp_path):
    write_executable(tmp_path / "hang" / "fakecc", "sleep 30\n")
    start = time.monotonic()
    assert detect_software(make_plugin([str(tmp_path / "hang")]), timeout=1.0) == []
    assert time.monotonic() - start < 2.0


def test_detect_nothing(tmp_path):
    assert detect_software(make_plugin([str(tmp_path / "empty")])) == []


def _env(tool_path="/opt/x/bin/x", version="1.0", tags=("tool",)) -> EnvEntry:
    return EnvEntry(soft_name="x", tags=list(tags), version=Version(version), tool_path=tool_path,
                    env_vars={"CK_X": tool_path})


def test_register_and_find(repo):
    entry = _env()
    cid = register_env(repo, entry)
    assert entry.uid == cid.uid
    found = find_env([repo], cid.uid)
    assert found.soft_name == "x"
    assert found.version == Version("1.0")
    assert found.env_vars == {"CK_X": "/opt/x/bin/x"}
    with pytest.raises(NotFound):
        find_env([repo], "0" * 16)


def test_register_refreshes_existing(repo):
    first = register_env(repo, _env())
    again = _env(tags=["tool", "detected"])
    second = register_env(repo, again)
    assert first.uid == second.uid
    envs = list_envs([repo])
    assert len(envs) == 1
    assert envs[0].tags == ["detected", "tool"]
    register_env(repo, _env(version="2.0"))
    assert len(list_envs([repo])) == 2


def test_concurrent_registration_keeps_one_entry(repo):
    with ThreadPoolExecutor(max_workers=8) as pool:
        uids = {cid.uid for cid in pool.map(lambda _: register_env(repo, _env()), range(8))}
    assert len(uids) == 1
    assert len(list_envs([repo])) == 1
    assert not (repo.root / ".ckr-env.lock").exists()


def test_list_envs_filters_by_tags(repo):
    register_env(repo, _env(tool_path="/a"))
    register_env(repo, EnvEntry(soft_name="y", tags=["other"], version=Version("1"), tool_path="/b"))
    assert [e.tool_path for e in list_envs([repo], ["tool"])] == ["/a"]
    assert len(list_envs([repo])) == 2


def test_render_posix_script():
    entry = EnvEntry(soft_name="x", version=Version("1"), tool_path="/x",
                     env_vars={"B_VAR": 'say "hi" $HOME', "A_VAR": "/opt/a b"})
    script = render_env_script(entry, "posix-shell")
    assert script == 'export A_VAR="/opt/a b"\nexport B_VAR="say \\"hi\\" \\$HOME"\n'


def test_render_batch_script():
    entry = EnvEntry(soft_name="x", version=Version("1"), tool_path="/x", env_vars={"Z": "1", "A": "2"})
    assert render_env_script(entry, "windows-batch") == "set A=2\nset Z=1\n"


def test_render_unknown_dialect():
    entry = EnvEntry(soft_name="x", version=Version("1"), tool_path="/x")
    with pytest.raises(UnsupportedDialect):
        render_env_script(entry, "fish")


@POSIX_ONLY
def test_posix_script_values_survive_sh(tmp_path):
    values = {
        "CK_QUOTE": 'say "hi"',
        "CK_DOLLAR": "$HOME/${USER}",
        "CK_TICK": "`id` $(id)",
        "CK_SLASH": "a\\b\\\\c\\",
        "CK_MIX": '"$`\\ end',
    }
    entry = EnvEntry(soft_name="x", version=Version("1"), tool_path="/x", env_vars=values)
    script = tmp_path / "env.sh"
    script.write_text(render_env_script(entry, "posix-shell"), encoding="utf-8")
    dump = "import json, os, sys; print(json.dumps({k: os.environ[k] for k in sys.argv[1:]}))"

    out = subprocess.run(["sh", "-c", '. "$0" && exec "$@"', str(script), sys.executable, "-c", dump, *values],
                         capture_output=True, text=True, check=True).stdout
    assert json.loads(out) == values
