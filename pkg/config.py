"""
ckflow 配置管理
"""
import os
import yaml
from pathlib import Path
from typing import Optional
from pydantic import BaseModel, Field
from pydantic_settings import BaseSettings


class RegistryConfig(BaseModel):
    """组件仓库配置"""
    default_repo: str = Field(default="~/CK-repos/local", description="未设置 CK_REPOS 时使用的仓库")
    lock_timeout_s: float = Field(default=10.0, description="获取锁文件的超时时间(秒)")


class DetectConfig(BaseModel):
    """软件探测配置"""
    run_timeout_s: float = Field(default=10.0, description="单个候选程序的版本探测超时(秒)")
    output_limit_bytes: int = Field(default=64 * 1024, description="探测输出保留的最大字节数")


class InstallConfig(BaseModel):
    """元包安装配置"""
    download_timeout_s: float = Field(default=60.0, description="下载超时时间(秒)")
    chunk_size: int = Field(default=1 << 16, description="下载分块大小")
    step_timeout_s: float = Field(default=3600.0, description="脚本步骤超时时间(秒)")


class PipelineConfig(BaseModel):
    """流水线配置"""
    default_timeout_s: float = Field(default=600.0, description="未声明超时时的单次运行超时(秒)")
    build_timeout_s: float = Field(default=3600.0, description="构建超时时间(秒)")


class AutotuneConfig(BaseModel):
    """自动调优配置"""
    space_cap: int = Field(default=10**6, description="网格枚举允许的最大设计点数")
    parallel: int = Field(default=1, description="并行运行的流水线数量")


class LoggingConfig(BaseModel):
    """日志配置"""
    level: str = Field(default="INFO", description="日志级别")
    quiet: bool = Field(default=False, description="不向 stderr 输出日志")


class Settings(BaseSettings):
    """全局设置"""
    repos: str = Field(default="", description="仓库根目录列表, 以 os.pathsep 分隔")
    registry: RegistryConfig = Field(default_factory=RegistryConfig)
    detect: DetectConfig = Field(default_factory=DetectConfig)
    install: InstallConfig = Field(default_factory=InstallConfig)
    pipeline: PipelineConfig = Field(default_factory=PipelineConfig)
    autotune: AutotuneConfig = Field(default_factory=AutotuneConfig)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)

    class Config:
        env_prefix = "CK_"
        env_nested_delimiter = "__"

    @classmethod
    def settings_customise_sources(cls, settings_cls, init_settings, env_settings,
                                   dotenv_settings, file_secret_settings):
        # CK_* 环境变量优先于 ck.yaml
        return env_settings, init_settings, dotenv_settings, file_secret_settings

    def repo_paths(self) -> list[Path]:
        """按搜索顺序返回仓库路径, 第一个为写入目标"""
        paths = [Path(p).expanduser() for p in self.repos.split(os.pathsep) if p.strip()]
        if not paths:
            paths = [Path(self.registry.default_repo).expanduser()]
        return paths

    @classmethod
    def from_yaml(cls, path: str | Path) -> "Settings":
        """从YAML文件加载配置"""
        path = Path(path)
        if not path.exists():
            return cls()

        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}

        return cls(**data)


def load_config(config_path: Optional[str] = None) -> Settings:
    """加载配置"""
    if config_path:
        return Settings.from_yaml(config_path)

    # 尝试默认配置文件
    default_paths = [
        Path("ck.yaml"),
        Path("ck.yml"),
        Path(__file__).parent / "ck.yaml",
    ]

    for path in default_paths:
        if path.exists():
            return Settings.from_yaml(path)

    return Settings()
