"""
自动调优: 设计空间探索, 实验记录与 Pareto 前沿
"""
import asyncio
import itertools
import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Iterator, Optional

import numpy as np
from pydantic import ValidationError

from config import Settings
from envdetect import collect_platform_info, list_envs
from errors import CKError, MissingObjectiveKey, SpaceTooLarge, UnknownParameter, UsageError
from metapkg import build_resolution_plan, execute_plan, list_packages
from models import (
    DesignSpace, EntryMeta, ExperimentRecord, ObjectiveDirection, ObjectiveSpec, PipelineState,
    RecordStatus, ResolutionPlan, RunStatus,
)
from pipeline import (
    ProgramEntry, aggregate_stats, apply_point, assemble_pipeline, build_program,
    extract_characteristics, fork_state, run_pipeline,
)
from registry import Repository
from utils import canonical_dumps, new_uid, sha256_text

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1


# ============ 伪随机数 ============

class SplitMix64:
    """splitmix64, 跨平台逐位可复现"""

    def __init__(self, seed: int):
        if not 0 <= seed <= MASK64:
            raise UsageError(f"seed 必须是 64 位无符号整数: {seed}")
        self.state = seed

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """[0, n) 上的均匀整数, 拒绝采样去除取模偏差"""
        if n < 1:
            raise ValueError(f"n 必须 >= 1: {n}")
        threshold = (1 << 64) % n
        while True:
            x = self.next_u64()
            if x >= threshold:
                return x % n


# ============ 设计空间 ============

def enumerate_grid(space: DesignSpace, cap: int = 10**6) -> Iterator[dict[str, Any]]:
    """完整笛卡尔积, 按声明顺序字典序, 最后一个参数变化最快"""
    cardinality = space.cardinality
    if cardinality > cap:
        raise SpaceTooLarge(cardinality, cap)
    pointers = [p.pointer for p in space.params]
    return (dict(zip(pointers, combo)) for combo in itertools.product(*(p.values() for p in space.params)))


def sample_random(space: DesignSpace, seed: int, n: int) -> list[dict[str, Any]]:
    """n 个设计点, 每个参数按声明顺序独立均匀抽取"""
    if n < 1:
        raise UsageError(f"n 必须 >= 1: {n}")
    rng = SplitMix64(seed)
    points = []
    for _ in range(n):
        points.append({p.pointer: p.domain.value_at(rng.below(p.domain.size())) for p in space.params})
    return points


class ExplorationStrategy(ABC):
    """探索策略基类"""

    name: str = ""

    @abstractmethod
    def points(self, space: DesignSpace, cap: int) -> list[dict[str, Any]]:
        """生成待评估的设计点"""
        pass


class GridStrategy(ExplorationStrategy):
    name = "grid"

    def points(self, space: DesignSpace, cap: int) -> list[dict[str, Any]]:
        return list(enumerate_grid(space, cap))


class RandomStrategy(ExplorationStrategy):
    name = "random"

    def __init__(self, seed: int = 0, iterations: int = 10):
        self.seed = seed
        self.iterations = iterations

    def points(self, space: DesignSpace, cap: int) -> list[dict[str, Any]]:
        return sample_random(space, self.seed, self.iterations)


STRATEGIES: dict[str, type[ExplorationStrategy]] = {
    "grid": GridStrategy,
    "random": RandomStrategy,
}


def make_strategy(name: str, seed: int = 0, iterations: int = 10) -> ExplorationStrategy:
    if name not in STRATEGIES:
        raise UsageError(f"未知探索策略: {name}, 可选 {sorted(STRATEGIES)}")
    if name == "random":
        return RandomStrategy(seed, iterations)
    return STRATEGIES[name]()


# ============ 探索 ============

def env_fingerprint(plan: ResolutionPlan) -> str:
    """绑定环境 (soft_name, version) 对的规范化摘要"""
    pairs = sorted({(e.soft_name, str(e.version)) for e in plan.binding.values()})
    return sha256_text(canonical_dumps([list(p) for p in pairs]))


class Explorer:
    """对一个程序逐点执行流水线并登记实验记录"""

    def __init__(self, program: ProgramEntry, repos: list[Repository], settings: Settings,
                 workdir: str | Path, repetitions: int = 1, expected_keys: Optional[list[str]] = None,
                 plan: Optional[ResolutionPlan] = None):
        if repetitions < 1:
            raise UsageError(f"repetitions 必须 >= 1: {repetitions}")
        self.program = program
        self.repos = repos
        self.settings = settings
        self.workdir = Path(workdir).expanduser().resolve()
        self.repetitions = repetitions
        self.expected_keys = list(expected_keys or [])
        self.plan = plan
        self.base: Optional[PipelineState] = None
        self.platform = collect_platform_info()
        self.fingerprint = ""

    def prepare(self):
        """解析依赖并完成基线构建; 这里的失败会中止整个探索"""
        if self.plan is None:
            plan = build_resolution_plan(self.program.spec.deps, list_envs(self.repos), list_packages(self.repos))
            if plan.installs():
                plan = execute_plan(plan, self.repos[0], self.settings)
            self.plan = plan
        self.fingerprint = env_fingerprint(self.plan)
        base = assemble_pipeline(self.program, self.plan, self.workdir / "base", self.settings)
        self.base = build_program(base)

    def _evaluate(self, index: int, point: dict[str, Any]) -> ExperimentRecord:
        record = ExperimentRecord(
            experiment_uid=new_uid(),
            program=self.program.cid,
            point=point,
            platform=self.platform,
            env_fingerprint=self.fingerprint,
            status=RecordStatus.FAILED,
            workdir=str(self.workdir / f"point.{index}"),
        )
        try:
            state = fork_state(apply_point(self.base, point), record.workdir)
            results = run_pipeline(state, self.repetitions)
        except (CKError, OSError) as e:
            record.errors.append(str(e))
            return record

        extractor = self.program.spec.extractor
        samples = []
        for result in results:
            if result.status != RunStatus.OK:
                record.errors.append(f"重复 {result.repetition}: {result.status}, 退出码 {result.exit_code}")
                continue
            try:
                samples.append(extract_characteristics(result, extractor))
            except CKError as e:
                record.errors.append(f"重复 {result.repetition}: {e.message}")
            except (ArithmeticError, ValueError, OSError) as e:
                record.errors.append(f"重复 {result.repetition}: 特征提取失败: {e}")

        record.repetitions = samples
        if not samples:
            return record
        try:
            record.aggregated = aggregate_stats(samples)
        except CKError as e:
            record.errors.append(e.message)
            return record
        except ArithmeticError as e:
            record.errors.append(f"聚合失败: {e}")
            return record

        missing = [k for k in self.expected_keys if k not in record.aggregated]
        if missing:
            record.errors.append(f"缺少期望的特征: {missing}")
            return record
        record.status = RecordStatus.OK
        return record

    def _persist(self, record: ExperimentRecord):
        meta = EntryMeta(
            tags=["experiment", self.program.cid.key],
            meta=record.model_dump(mode="json"),
        )
        self.repos[0].add_entry("experiment", None, meta, uid=record.experiment_uid)

    def evaluate(self, index: int, point: dict[str, Any]) -> ExperimentRecord:
        record = self._evaluate(index, point)
        self._persist(record)
        if record.ok:
            logger.info(f"设计点 {index} 完成: {record.experiment_uid}")
        else:
            logger.warning(f"设计点 {index} 失败: {record.errors}")
        return record

    async def _evaluate_all(self, points: list[dict[str, Any]], parallel: int) -> list[ExperimentRecord]:
        semaphore = asyncio.Semaphore(parallel)

        async def one(index: int, point: dict[str, Any]) -> ExperimentRecord:
            async with semaphore:
                return await asyncio.to_thread(self.evaluate, index, point)

        return list(await asyncio.gather(*(one(i, p) for i, p in enumerate(points))))

    def run(self, points: list[dict[str, Any]], parallel: int = 1) -> list[ExperimentRecord]:
        if self.base is None:
            self.prepare()
        if parallel <= 1:
            return [self.evaluate(i, p) for i, p in enumerate(points)]
        return asyncio.run(self._evaluate_all(points, parallel))


def check_space(program: ProgramEntry, space: DesignSpace):
    unknown = [p.pointer for p in space.params if p.pointer not in program.spec.exposed]
    if unknown:
        raise UnknownParameter(f"设计空间包含程序未暴露的参数: {unknown}", pointers=unknown)


def explore(program: ProgramEntry, space: DesignSpace, strategy: ExplorationStrategy, repetitions: int,
            repos: list[Repository], settings: Settings, workdir: str | Path,
            parallel: Optional[int] = None, expected_keys: Optional[list[str]] = None,
            plan: Optional[ResolutionPlan] = None) -> list[ExperimentRecord]:
    """
    探索设计空间, 每个点生成一条实验记录并登记为 experiment 组件

    只有准备阶段的错误 (依赖解析, 基线构建) 会中止探索
    """
    check_space(program, space)
    points = strategy.points(space, settings.autotune.space_cap)
    explorer = Explorer(program, repos, settings, workdir, repetitions, expected_keys, plan)
    explorer.prepare()
    parallel = parallel if parallel is not None else settings.autotune.parallel
    logger.info(f"开始探索 {program.spec.program_name}: {len(points)} 个设计点 ({strategy.name}, 并行 {parallel})")
    records = explorer.run(points, parallel)
    ok = sum(1 for r in records if r.ok)
    logger.info(f"探索完成: {ok}/{len(records)} 成功")
    return records


def load_experiments(repos: list[Repository], program: Optional[str] = None) -> list[ExperimentRecord]:
    """按仓库顺序读取实验记录; program 可以是程序别名或 uid"""
    records = []
    for repo in repos:
        for cid, meta in repo.list_entries("experiment"):
            try:
                record = ExperimentRecord.model_validate(meta.meta)
            except ValidationError as e:
                logger.warning(f"忽略无效实验记录 {cid}: {e}")
                continue
            if program is not None and program not in (record.program.alias, record.program.uid):
                continue
            records.append(record)
    return records


# ============ Pareto ============

def objective_value(record: ExperimentRecord, objective: ObjectiveSpec) -> float:
    stats = record.aggregated.get(objective.key)
    if stats is None:
        raise MissingObjectiveKey(
            f"实验 {record.experiment_uid} 缺少目标特征 {objective.key}",
            experiment=record.experiment_uid, key=objective.key,
        )
    return getattr(stats, objective.aggregate_field)


def _costs(records: list[ExperimentRecord], objectives: list[ObjectiveSpec]) -> np.ndarray:
    # 统一转成越小越好
    rows = []
    for record in records:
        row = []
        for obj in objectives:
            value = objective_value(record, obj)
            row.append(-value if obj.direction == ObjectiveDirection.MAXIMIZE else value)
        rows.append(row)
    return np.asarray(rows, dtype=np.float64).reshape(len(records), len(objectives))


def dominates(a: ExperimentRecord, b: ExperimentRecord, objectives: list[ObjectiveSpec]) -> bool:
    """a 在所有目标上不差于 b 且至少一个目标严格更好"""
    costs = _costs([a, b], objectives)
    return bool(np.all(costs[0] <= costs[1]) and np.any(costs[0] < costs[1]))


def pareto_filter(records: list[ExperimentRecord], objectives: list[ObjectiveSpec]) -> list[ExperimentRecord]:
    """非支配记录, 保持输入顺序; 目标值相同的记录全部保留"""
    ok = [r for r in records if r.ok]
    if len(ok) != len(records):
        logger.warning(f"Pareto 过滤忽略 {len(records) - len(ok)} 条失败记录")
    if not ok:
        return []

    costs = _costs(ok, objectives)
    keep = np.ones(len(ok), dtype=bool)
    for i in range(len(ok)):
        no_worse = np.all(costs <= costs[i], axis=1)
        better = np.any(costs < costs[i], axis=1)
        keep[i] = not np.any(no_worse & better)
    return [r for r, k in zip(ok, keep) if k]


def frontier_uids(records: list[ExperimentRecord], objectives: list[ObjectiveSpec]) -> set[str]:
    return {r.experiment_uid for r in pareto_filter(records, objectives)}
