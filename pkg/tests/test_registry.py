import json
import os
import random
import subprocess
import sys

import pytest

from errors import AmbiguousKey, DuplicateAlias, InvalidAlias, LockTimeout, NotFound, UnknownKind, UsageError
from models import ComponentId, EntryMeta
from registry import (
    INDEX_FILE, INDEX_LOCK, META_DIR, REPO_DESCRIPTOR, find_in_repos, init_repo, open_repo, open_repos, parse_ref,
    search_by_tags,
)
from utils import UID_RE, canonical_dumps, new_uid, read_json


def test_init_repo_writes_descriptor(tmp_path):
    repo = init_repo(tmp_path / "r", "demo")
    data = read_json(tmp_path / "r" / REPO_DESCRIPTOR)
    assert set(data) == {"uid", "alias", "schema_version"}
    assert data["alias"] == "demo"
    assert UID_RE.match(data["uid"])
    assert open_repo(tmp_path / "r").descriptor == repo.descriptor


def test_add_entry_layout(repo):
    cid = repo.add_entry("soft", "compiler-cc", EntryMeta(tags=["Compiler"], meta={"x": 1}))
    assert UID_RE.match(cid.uid)
    entry_dir = repo.root / "soft" / "compiler-cc"
    info = read_json(entry_dir / META_DIR / "info.json")
    assert set(info) == {"uid", "alias", "kind", "created_at", "schema_version"}
    assert info["uid"] == cid.uid
    meta = read_json(entry_dir / META_DIR / "meta.json")
    assert meta == {"x": 1, "tags": ["compiler"]}
    assert not [p for p in (repo.root / "soft").iterdir() if p.name.startswith(".tmp-")]


def test_anonymous_entry_is_named_by_uid(repo):
    cid = repo.add_entry("dataset-stub", None, EntryMeta())
    assert (repo.root / "dataset-stub" / cid.uid).is_dir()
    assert cid.alias is None
    assert str(cid) == f"dataset-stub:{cid.uid}"


def test_duplicate_alias(repo):
    repo.add_entry("soft", "x", EntryMeta())
    with pytest.raises(DuplicateAlias):
        repo.add_entry("soft", "x", EntryMeta())
    # 不同类型可以重名
    repo.add_entry("package", "x", EntryMeta())


@pytest.mark.parametrize("alias", ["1abc", "has space", "", "-x", "abcdef0123456789"])
def test_invalid_alias(repo, alias):
    with pytest.raises(InvalidAlias):
        repo.add_entry("soft", alias, EntryMeta())


def test_unknown_kind(repo):
    with pytest.raises(UnknownKind):
        repo.add_entry("widget", "a", EntryMeta())
    with pytest.raises(UnknownKind):
        repo.find_entry("widget", "a")


def test_find_by_alias_and_uid_agree(repo):
    cid = repo.add_entry("program", "demo", EntryMeta(tags=["a"], meta={"k": [1, 2]}))
    by_alias = repo.find_entry("program", "demo")
    by_uid = repo.find_entry("program", cid.uid)
    assert by_alias[0] == by_uid[0] == cid
    assert canonical_dumps(by_alias[1].meta) == canonical_dumps({"k": [1, 2]})


def test_find_missing(repo):
    with pytest.raises(NotFound):
        repo.find_entry("soft", "no-such")
    with pytest.raises(NotFound):
        repo.find_entry("soft", new_uid())


def test_stale_index_is_rebuilt(repo):
    cid = repo.add_entry("soft", "a", EntryMeta())
    (repo.root / INDEX_FILE).unlink()
    assert repo.find_entry("soft", cid.uid)[0] == cid
    assert cid.uid in read_json(repo.root / INDEX_FILE)["kinds"]["soft"]


def test_duplicate_uid_rejected(repo):
    uid = new_uid()
    repo.add_entry("experiment", None, EntryMeta(), uid=uid)
    with pytest.raises(AmbiguousKey):
        repo.add_entry("experiment", None, EntryMeta(), uid=uid)


def test_payload_is_copied(repo, tmp_path):
    payload = tmp_path / "payload"
    (payload / "sub").mkdir(parents=True)
    (payload / "sub" / "file.txt").write_text("hello", encoding="utf-8")
    repo.add_entry("program", "p", EntryMeta(), payload_dir=payload)
    assert (repo.entry_path("program", "p") / "sub" / "file.txt").read_text(encoding="utf-8") == "hello"


def test_update_entry(repo):
    cid = repo.add_entry("env", None, EntryMeta(tags=["a"], meta={"v": 1}))
    repo.update_entry("env", cid.uid, EntryMeta(tags=["a", "b"], meta={"v": 2}))
    _, meta = repo.find_entry("env", cid.uid)
    assert meta.tags == ["a", "b"]
    assert meta.meta == {"v": 2}
    assert not (repo.entry_path("env", cid.uid) / META_DIR / ".lock").exists()


def test_remove_entry(repo):
    keep = repo.add_entry("soft", "keep", EntryMeta(tags=["t"]))
    gone = repo.add_entry("soft", "gone", EntryMeta(tags=["t"]))
    repo.remove_entry("soft", "gone")
    with pytest.raises(NotFound):
        repo.find_entry("soft", "gone")
    with pytest.raises(NotFound):
        repo.find_entry("soft", gone.uid)
    with pytest.raises(NotFound):
        repo.remove_entry("soft", "gone")
    assert repo.find_entry("soft", "keep")[0] == keep


def test_meta_tags_key_is_reserved():
    with pytest.raises(ValueError):
        EntryMeta(meta={"tags": ["x"]})


def test_tags_are_normalized():
    assert EntryMeta(tags=["B", "a", "b"]).tags == ["a", "b"]
    with pytest.raises(ValueError):
        EntryMeta(tags=["has space"])
    with pytest.raises(ValueError):
        EntryMeta(tags=[""])


def test_parse_ref():
    assert parse_ref("soft:cc") == ("soft", "cc")
    with pytest.raises(UsageError):
        parse_ref("soft")


def test_search_requires_tags(repo):
    with pytest.raises(UsageError):
        search_by_tags([repo], None, [])


def test_search_superset(repo):
    repo.add_entry("soft", "abc", EntryMeta(tags=["a", "b", "c"]))
    assert [c.alias for c in search_by_tags([repo], None, ["a", "b"])] == ["abc"]
    assert search_by_tags([repo], None, ["a", "z"]) == []
    assert search_by_tags([repo], "package", ["a"]) == []


def test_search_orders_across_repos(tmp_path):
    first = init_repo(tmp_path / "b", "bbb")
    second = init_repo(tmp_path / "a", "aaa")
    first.add_entry("soft", "x", EntryMeta(tags=["t"]))
    second.add_entry("program", "y", EntryMeta(tags=["t"]))
    second.add_entry("soft", "z", EntryMeta(tags=["t"]))
    results = search_by_tags([first, second], None, ["t"])
    keys = [(c.repo_alias, c.kind, c.uid) for c in results]
    assert keys == sorted(keys)
    assert results[0].repo_alias == "aaa"


def test_find_in_repos_uses_search_order(tmp_path):
    first = init_repo(tmp_path / "one", "one")
    second = init_repo(tmp_path / "two", "two")
    second.add_entry("soft", "shared", EntryMeta(meta={"from": "two"}))
    first.add_entry("soft", "shared", EntryMeta(meta={"from": "one"}))
    repo, _, meta = find_in_repos([first, second], "soft", "shared")
    assert repo is first and meta.meta == {"from": "one"}
    second.add_entry("soft", "only-two", EntryMeta())
    assert find_in_repos([first, second], "soft", "only-two")[0] is second


def test_open_repos_creates_write_target(tmp_path):
    repos = open_repos([tmp_path / "local", tmp_path / "missing"], create_first=True)
    assert len(repos) == 1
    assert (tmp_path / "local" / REPO_DESCRIPTOR).is_file()


def test_round_trip_many_entries(repo):
    rng = random.Random(1234)
    added: dict[str, tuple[ComponentId, dict]] = {}
    for i in range(1000):
        alias = f"e{i}" if rng.random() < 0.5 else None
        meta = {"n": i, "payload": [rng.randint(0, 9) for _ in range(3)], "name": f"item-{i}"}
        cid = repo.add_entry("dataset-stub", alias, EntryMeta(tags=[f"t{i % 7}"], meta=meta))
        added[cid.uid] = (cid, meta)

    assert len(added) == 1000
    reopened = open_repo(repo.root)
    for uid, (cid, meta) in added.items():
        found, entry = reopened.find_entry("dataset-stub", uid)
        assert found == cid
        assert canonical_dumps(entry.meta) == canonical_dumps(meta)
        if cid.alias:
            assert reopened.find_entry("dataset-stub", cid.alias)[0] == cid

    listed = reopened.list_entries("dataset-stub")
    assert [c.uid for c, _ in listed] == sorted(added)


def test_search_matches_linear_scan(repo):
    rng = random.Random(99)
    vocabulary = ["a", "b", "c", "d", "e", "f"]
    kinds = ["soft", "package", "program"]
    entries = []
    for _ in range(200):
        tags = set(rng.sample(vocabulary, rng.randint(1, 4)))
        kind = rng.choice(kinds)
        cid = repo.add_entry(kind, None, EntryMeta(tags=sorted(tags)))
        entries.append((cid, tags))

    for _ in range(200):
        query = set(rng.sample(vocabulary, rng.randint(1, 3)))
        kind = rng.choice(kinds + [None])
        expected = sorted(
            (c for c, tags in entries if query <= tags and (kind is None or c.kind == kind)),
            key=lambda c: (c.repo_alias, c.kind, c.uid),
        )
        assert search_by_tags([repo], kind, query) == expected


def test_uid_generation_has_no_collisions():
    taken: set[str] = set()
    for _ in range(10_000):
        uid = new_uid(taken)
        assert uid not in taken
        assert UID_RE.match(uid)
        taken.add(uid)


def test_meta_json_is_canonical(repo):
    repo.add_entry("soft", "canon", EntryMeta(tags=["x"], meta={"b": 1, "a": {"d": 2, "c": 3}}))
    text = (repo.root / "soft" / "canon" / META_DIR / "meta.json").read_text(encoding="utf-8")
    assert text == canonical_dumps(json.loads(text))
    assert text.endswith("\n")


# ============ 锁 ============

def _exited_pid() -> int:
    proc = subprocess.Popen([sys.executable, "-c", "pass"])
    proc.wait()
    return proc.pid


def test_lock_left_by_exited_writer_is_cleared(tmp_path):
    repo = init_repo(tmp_path / "r", "locked", lock_timeout=0.2)
    (repo.root / INDEX_LOCK).write_text(str(_exited_pid()))
    cid = repo.add_entry("soft", "after-crash", EntryMeta())
    assert repo.find_entry("soft", "after-crash")[0] == cid
    assert not (repo.root / INDEX_LOCK).exists()


def test_empty_lock_older_than_timeout_is_cleared(tmp_path):
    repo = init_repo(tmp_path / "r", "locked", lock_timeout=0.2)
    lock = repo.root / INDEX_LOCK
    lock.write_text("")
    os.utime(lock, (0, 0))
    repo.add_entry("soft", "x", EntryMeta())
    assert not lock.exists()


def test_lock_held_by_live_process_times_out(tmp_path):
    repo = init_repo(tmp_path / "r", "locked", lock_timeout=0.2)
    (repo.root / INDEX_LOCK).write_text(str(os.getpid()))
    with pytest.raises(LockTimeout):
        repo.add_entry("soft", "x", EntryMeta())
    assert (repo.root / INDEX_LOCK).exists()
