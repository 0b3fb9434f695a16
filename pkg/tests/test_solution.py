import json
import random
import sys

import pytest

from autotune import pareto_filter
from envdetect import list_envs
from errors import FormatVersionMismatch, InitIncomplete, NotFound, SchemaViolation, TargetOsMismatch, TaskFailed
from models import (
    CharacteristicStats, ComponentId, EntryMeta, ExperimentRecord, ObjectiveSpec, ResultBundle, ScoreboardRow,
)
from solution import (
    BUNDLE_FILE, STATE_FILE, clone_solution, find_solution, host_os, init_solution, load_bundle, load_state,
    merge_bundles, parse_manifest, render_report, render_rows_json, run_benchmark, save_bundle, scoreboard_rows,
)

from conftest import POSIX_ONLY, write_executable

PROGRAM_ID = ComponentId(repo_alias="local", kind="program", uid="0" * 16, alias="p")


def script(code: str, **kw) -> dict:
    return {"action": "custom-script", "target": [sys.executable, "-c", code], **kw}


def counting_script(name: str, fail: bool = False) -> dict:
    # 每次执行在解决方案目录下追加一行, 用于统计执行次数
    code = f"open('{name}.count', 'a').write('x')"
    if fail:
        code += "; import sys; sys.exit(4)"
    return script(code)


def manifest(tasks, name="demo", **kw):
    data = {
        "format_version": 1,
        "name": name,
        "target_os": "any",
        "tasks": tasks,
        "benchmark": {"program": "stub", "repetitions": 1, "objectives": [{"key": "time_s"}]},
    }
    data.update(kw)
    return parse_manifest(data)


def solution_dir(repo, name="demo"):
    return repo.entry_path("solution", name)


def count(repo, name, solution="demo"):
    path = solution_dir(repo, solution) / f"{name}.count"
    return len(path.read_text()) if path.exists() else 0


# ============ 清单 ============

def test_parse_manifest_rejects_bad_input():
    with pytest.raises(SchemaViolation):
        parse_manifest({"name": "x", "tasks": [], "benchmark": {"program": "p"}})
    with pytest.raises(SchemaViolation):
        parse_manifest({"name": "x", "tasks": [{"action": "custom-script", "target": []}],
                        "benchmark": {"program": "p"}})
    with pytest.raises(SchemaViolation):
        parse_manifest({"format_version": 2, "name": "x", "tasks": [counting_script("a")],
                        "benchmark": {"program": "p"}})


def test_target_os_mismatch(repo, settings):
    other = "windows" if host_os() != "windows" else "linux"
    with pytest.raises(TargetOsMismatch):
        init_solution(manifest([counting_script("a")], target_os=other), [repo], settings)


# ============ init ============

def test_init_runs_tasks_in_order(repo, settings):
    state = init_solution(manifest([counting_script("a"), counting_script("b")]), [repo], settings)
    assert state.status == "ok"
    assert [(t.index, t.status) for t in state.tasks] == [(0, "ok"), (1, "ok")]
    assert count(repo, "a") == 1 and count(repo, "b") == 1
    on_disk = load_state(solution_dir(repo), "demo")
    assert on_disk.status == "ok"
    assert len(on_disk.tasks) == 2
    assert all((solution_dir(repo) / "logs" / f"task.{i}.log").exists() for i in range(2))


def test_init_resumes_after_failure(repo, settings):
    with pytest.raises(TaskFailed) as info:
        init_solution(manifest([counting_script("a"), counting_script("b", fail=True)]), [repo], settings)
    assert info.value.task_index == 1
    journal = json.loads((solution_dir(repo) / STATE_FILE).read_text())
    assert journal["status"] == "failed"
    assert [t["status"] for t in journal["tasks"]] == ["ok", "failed"]

    state = init_solution(manifest([counting_script("a"), counting_script("b")]), [repo], settings)
    assert state.status == "ok"
    # 第一个任务没有重新执行, 失败的任务修改后重新执行
    assert count(repo, "a") == 1
    assert count(repo, "b") == 2


def test_rerun_of_completed_solution_executes_nothing(repo, settings):
    m = manifest([counting_script("a"), counting_script("b")])
    init_solution(m, [repo], settings)
    init_solution(m, [repo], settings)
    assert count(repo, "a") == 1 and count(repo, "b") == 1


def test_edited_task_is_rerun(repo, settings):
    init_solution(manifest([counting_script("a"), counting_script("b")]), [repo], settings)
    edited = counting_script("b")
    edited["params"] = {"timeout_s": 30}
    init_solution(manifest([counting_script("a"), edited]), [repo], settings)
    assert count(repo, "a") == 1
    assert count(repo, "b") == 2


def test_skippable_failure(repo, settings):
    failing = counting_script("b", fail=True)
    failing["skippable"] = True
    state = init_solution(manifest([failing, counting_script("c")]), [repo], settings)
    assert state.status == "ok"
    assert [t.status for t in state.tasks] == ["skipped", "ok"]


def test_unsupported_os_task(repo, settings):
    task = counting_script("a")
    task["params"] = {"supported_os": ["plan9"]}
    task["skippable"] = True
    state = init_solution(manifest([task]), [repo], settings)
    assert state.tasks[0].status == "skipped"
    assert count(repo, "a") == 0


def test_detect_task_with_no_results_fails(repo, settings, tmp_path):
    repo.add_entry("soft", "ghost", EntryMeta(tags=["ghost"], meta={
        "soft_name": "ghost",
        "probe": {"binary_names": ["ghost-tool"], "search_roots": [str(tmp_path / "none")],
                  "version_regex": r"ghost ([0-9.]+)"},
    }))
    with pytest.raises(TaskFailed):
        init_solution(manifest([{"action": "detect-software", "target": "ghost"}]), [repo], settings)


def test_create_isolated_env(repo, settings):
    state = init_solution(manifest([{"action": "create-isolated-env"}]), [repo], settings)
    assert state.status == "ok"
    envs = list_envs([repo], ["venv"])
    assert len(envs) == 1
    assert envs[0].install_dir == str(solution_dir(repo) / "venv")
    assert (solution_dir(repo) / "venv" / "pyvenv.cfg").is_file()


def test_compile_program_task(repo, settings, make_program):
    make_program(build={"argv": [sys.executable, "-c", "open('built.txt', 'w').write('ok')"]})
    state = init_solution(manifest([{"action": "compile-program", "target": "stub"}]), [repo], settings)
    assert state.status == "ok"
    built = list((solution_dir(repo) / "build").glob("*/src/built.txt"))
    assert len(built) == 1


# ============ 基准测试 ============

def test_benchmark_requires_init(repo, settings, make_program):
    make_program()
    init_solution(manifest([counting_script("a")]), [repo], settings)
    # 清单改动后需要重新 init
    repo.update_entry("solution", "demo", EntryMeta(
        tags=["solution"], meta=manifest([counting_script("a"), counting_script("b")]).model_dump(mode="json")))
    with pytest.raises(InitIncomplete):
        run_benchmark("demo", [repo], settings)


def test_benchmark_writes_bundle(repo, settings, make_program):
    make_program()
    space = [{"pointer": "/run/params/threads", "domain": {"type": "categorical", "values": [1, 2]}}]
    m = manifest([counting_script("a")], benchmark={
        "program": "stub", "repetitions": 2, "space": space,
        "objectives": [{"key": "time_s", "direction": "minimize"}],
    })
    init_solution(m, [repo], settings)
    bundle = run_benchmark("demo", [repo], settings)

    assert bundle.solution_name == "demo"
    assert [r.point for r in bundle.records] == [{"/run/params/threads": 1}, {"/run/params/threads": 2}]
    assert all(r.ok for r in bundle.records)
    stored = load_bundle(solution_dir(repo) / BUNDLE_FILE)
    assert stored.bundle_uid == bundle.bundle_uid
    assert [r.experiment_uid for r in stored.records] == [r.experiment_uid for r in bundle.records]


def test_benchmark_without_space_runs_defaults(repo, settings, make_program):
    make_program()
    init_solution(manifest([counting_script("a")]), [repo], settings)
    bundle = run_benchmark("demo", [repo], settings)
    assert [r.point for r in bundle.records] == [{}]


def test_clone_solution(repo, settings):
    init_solution(manifest([counting_script("a")]), [repo], settings)
    clone = clone_solution([repo], "demo", "demo-win", target_os="windows")
    assert clone.name == "demo-win"
    assert clone.target_os == "windows"
    _, found, path = find_solution([repo], "demo-win")
    assert found.tasks == clone.tasks
    assert not (path / STATE_FILE).exists()
    with pytest.raises(NotFound):
        find_solution([repo], "missing")


# ============ 合并与报告 ============

def rec(uid: int, t: float, point=None, status="ok", source=None) -> ExperimentRecord:
    return ExperimentRecord(
        experiment_uid=f"{uid:016x}", program=PROGRAM_ID, point=point or {}, status=status, source=source,
        aggregated={} if status != "ok" else {"t": CharacteristicStats(min=t, max=t, mean=t, n=1)},
    )


def bundle(uid: str, records, version=1) -> ResultBundle:
    return ResultBundle(format_version=version, bundle_uid=uid * 16, solution_name="s", records=records)


def test_merge_bundles_dedups_and_tags_source():
    merged = merge_bundles([bundle("a", [rec(1, 1.0), rec(2, 2.0)]), bundle("b", [rec(2, 9.0), rec(3, 3.0)])])
    assert [r.experiment_uid for r in merged] == [f"{i:016x}" for i in (1, 2, 3)]
    assert merged[1].aggregated["t"].min == 2.0
    assert [r.source for r in merged] == ["a" * 16, "a" * 16, "b" * 16]


def test_merge_keeps_existing_source():
    merged = merge_bundles([bundle("c", [rec(1, 1.0, source="d" * 16)])])
    assert merged[0].source == "d" * 16


def test_merge_rejects_mixed_versions():
    with pytest.raises(FormatVersionMismatch):
        merge_bundles([bundle("a", []), bundle("b", [], version=2)])


def test_bundle_file_round_trip(tmp_path):
    original = bundle("e", [rec(1, 1.0, point={"/run/params/n": 2})])
    save_bundle(original, tmp_path / "b.json")
    assert load_bundle(tmp_path / "b.json") == original


def test_markdown_report():
    records = [rec(2, 2.0, {"a": 2}), rec(1, 1.0, {"a": 1}), rec(3, 0.1, status="failed")]
    report = render_report(records, [ObjectiveSpec.parse("t:min")], title="Demo")
    assert report == (
        "# Demo\n"
        "\n"
        "| experiment | source | point | t | frontier |\n"
        "|---|---|---|---|---|\n"
        '| 0000000000000001 |  | {"a":1} | 1 | * |\n'
        '| 0000000000000002 |  | {"a":2} | 2 |  |\n'
    )


def test_report_sort_by_first_objective():
    objectives = [ObjectiveSpec.parse("t:max")]
    rows = scoreboard_rows([rec(1, 1.0), rec(2, 3.0), rec(3, 3.0)], objectives)
    assert [r.experiment_uid for r in rows] == [f"{i:016x}" for i in (2, 3, 1)]
    assert [r.on_frontier for r in rows] == [True, True, False]


def test_report_reference_deltas():
    reference = bundle("f", [rec(10, 1.5, {"a": 1}), rec(11, 1.2, {"a": 3})])
    records = [rec(1, 1.0, {"a": 1}), rec(2, 2.0, {"a": 2})]
    rows = scoreboard_rows(records, [ObjectiveSpec.parse("t:min")], merge_bundles([reference]))
    # 同一设计点对比同点记录, 否则对比参考集的最优值
    assert rows[0].delta == {"t": pytest.approx(-0.5)}
    assert rows[1].delta == {"t": pytest.approx(0.8)}

    report = render_report(records, [ObjectiveSpec.parse("t:min")], reference=reference)
    assert report.splitlines()[0] == "| experiment | source | point | t | delta t | frontier |"


def test_json_report_is_canonical():
    text = render_report([rec(1, 1.0)], [ObjectiveSpec.parse("t:min")], fmt="json")
    rows = json.loads(text)
    assert rows[0]["experiment_uid"] == f"{1:016x}"
    assert rows[0]["on_frontier"] is True
    assert text == json.dumps(rows, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def test_merge_matches_union_oracle():
    rng = random.Random(31)
    for _ in range(50):
        bundles = [
            bundle(name, [rec(uid, float(uid + 10 * i)) for uid in rng.sample(range(30), rng.randint(0, 12))])
            for i, name in enumerate("abc")
        ]
        first: dict[str, tuple[ExperimentRecord, str]] = {}
        for b in bundles:
            for r in b.records:
                first.setdefault(r.experiment_uid, (r, b.bundle_uid))

        merged = merge_bundles(bundles)
        assert [r.experiment_uid for r in merged] == list(first)
        for r in merged:
            original, source = first[r.experiment_uid]
            assert r.source == source
            assert r.aggregated == original.aggregated


def _rec2(uid: int, t: float, q: float, status="ok") -> ExperimentRecord:
    stats = {k: CharacteristicStats(min=v, max=v, mean=v, n=1) for k, v in (("t", t), ("q", q))}
    return ExperimentRecord(experiment_uid=f"{uid:016x}", program=PROGRAM_ID, status=status,
                            aggregated=stats if status == "ok" else {})


def test_report_frontier_flags_match_pareto_filter():
    rng = random.Random(8)
    objectives = [ObjectiveSpec.parse("t:min"), ObjectiveSpec.parse("q:max")]
    records = [_rec2(i, float(rng.randint(0, 20)), float(rng.randint(0, 20)),
                     status="failed" if rng.random() < 0.1 else "ok") for i in range(200)]
    frontier = {r.experiment_uid for r in pareto_filter(records, objectives)}

    rows = scoreboard_rows(records, objectives)
    assert len(rows) == sum(r.ok for r in records)
    assert {r.experiment_uid for r in rows if r.on_frontier} == frontier
    ts = [r.objectives["t"] for r in rows]
    assert ts == sorted(ts)


def test_empty_report():
    objectives = [ObjectiveSpec.parse("t:min")]
    assert render_report([], objectives) == "| experiment | source | point | t | frontier |\n|---|---|---|---|---|\n"
    assert json.loads(render_report([], objectives, fmt="json")) == []
    assert render_report([rec(1, 0.0, status="failed")], objectives, fmt="json") == "[]\n"


def test_json_report_round_trip():
    rng = random.Random(12)
    records = [_rec2(i, rng.uniform(0, 5), rng.uniform(0, 5)) for i in range(40)]
    for r in records:
        r.point = {"/run/params/n": rng.randint(1, 8), "/run/params/name": rng.choice(["a", "b|c", "é"])}
    reference = bundle("r", records[:10])
    objectives = [ObjectiveSpec.parse("t:min"), ObjectiveSpec.parse("q:max")]

    text = render_report(records, objectives, fmt="json", reference=reference)
    rows = [ScoreboardRow.model_validate(row) for row in json.loads(text)]
    assert render_rows_json(rows) == text
    assert rows == scoreboard_rows(records, objectives, merge_bundles([reference]))


# ============ 完整流程 ============

def _guarded_code(faults, counts, k: int, name: str) -> str:
    # faults/<k> 存在时失败, 否则在 counts/<name> 追加一次执行记录
    return (
        "import os, sys\n"
        f"if os.path.exists({str(faults / str(k))!r}):\n"
        "    sys.exit(3)\n"
        f"open({str(counts / name)!r}, 'a').write('x')\n"
    )


def _five_task_solution(repo, make_program, tmp_path):
    faults, counts = tmp_path / "faults", tmp_path / "counts"
    faults.mkdir()
    counts.mkdir()

    for k, name, tags in ((1, "dataset", ["dataset", "stub"]), (3, "framework", ["framework"])):
        repo.add_entry("package", name, EntryMeta(tags=tags, meta={
            "package_name": name, "version": "1.0",
            "install_steps": [{"kind": "script", "command": [sys.executable, "-c",
                                                             _guarded_code(faults, counts, k, name)]}],
            "provides_env": {f"CK_{name.upper()}": "{install_dir}"},
        }))

    write_executable(tmp_path / "cc" / "fakecc", (
        f"[ -e '{faults / '2'}' ] && exit 1\n"
        f"printf x >> '{counts / 'detect'}'\n"
        'echo "fakecc version 1.0"\n'
    ))
    repo.add_entry("soft", "fakecc", EntryMeta(tags=["compiler"], meta={
        "soft_name": "fakecc",
        "probe": {"binary_names": ["fakecc"], "search_roots": [str(tmp_path / "cc")],
                  "version_args": ["--version"], "version_regex": r"fakecc version ([0-9.]+)"},
        "env_template": {"CK_CC": "{path}"},
    }))

    make_program(
        deps=[{"name": "framework", "tags": ["framework"]}],
        build={"argv": [sys.executable, "-c", _guarded_code(faults, counts, 4, "build")]},
    )
    return manifest([
        {"action": "create-isolated-env", "params": {"path": str(tmp_path / "blocked" / "venv")}, "skippable": True},
        {"action": "install-package", "target": "dataset"},
        {"action": "detect-software", "target": "fakecc"},
        {"action": "install-package", "target": "framework"},
        {"action": "compile-program", "target": "stub"},
    ]), faults, counts


def _inject(faults, tmp_path, k: int):
    if k == 0:
        # 父路径是普通文件, 虚拟环境无法创建
        (tmp_path / "blocked").write_text("")
    else:
        (faults / str(k)).write_text("")


def _counts(counts) -> dict[str, int]:
    return {name: len((counts / name).read_text()) if (counts / name).exists() else 0
            for name in ("dataset", "detect", "framework", "build")}


@POSIX_ONLY
@pytest.mark.parametrize("k", range(5))
def test_five_task_solution_resumes_after_failure(repo, settings, make_program, tmp_path, k):
    m, faults, counts = _five_task_solution(repo, make_program, tmp_path)
    _inject(faults, tmp_path, k)
    order = ["dataset", "detect", "framework", "build"]

    if k == 0:
        state = init_solution(m, [repo], settings)
        assert [t.status for t in state.tasks] == ["skipped", "ok", "ok", "ok", "ok"]
    else:
        with pytest.raises(TaskFailed) as info:
            init_solution(m, [repo], settings)
        assert info.value.task_index == k
        state = load_state(solution_dir(repo), "demo")
        assert state.status == "failed"
        assert [t.status for t in state.tasks] == ["ok"] * k + ["failed"]
        # 失败任务之后的任务从未执行
        assert _counts(counts) == {name: int(i + 1 < k) for i, name in enumerate(order)}

    before = load_state(solution_dir(repo), "demo").tasks
    for fault in faults.iterdir():
        fault.unlink()
    resumed = init_solution(m, [repo], settings)
    assert resumed.status == "ok"
    assert len(resumed.tasks) == 5
    assert all(t.status != "failed" for t in resumed.tasks)
    # 之前成功或跳过的任务原样保留, 没有重新执行
    done = [t for t in before if t.status != "failed"]
    assert resumed.tasks[:len(done)] == done
    assert _counts(counts) == dict.fromkeys(order, 1)

    installed = {e.soft_name for e in list_envs([repo], ["installed"]) if "venv" not in e.tags}
    assert installed == {"dataset", "framework"}
    assert len(list_envs([repo], ["detected"])) == 1
