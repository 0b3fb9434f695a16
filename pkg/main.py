"""
ckflow - 命令行入口

stdout 只输出一个 JSON 响应信封, 日志写入 stderr; 进程退出码 = min(return, 255)
"""
import json
import logging
import sys
from typing import Any, Optional

from api.routes import dispatch
from config import load_config

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"


def setup_logging(argv: list[str], level: str = "INFO", quiet: bool = False):
    """配置日志; --quiet 关闭 stderr 上的日志, --debug 打开调试日志"""
    if "--debug" in argv:
        level = "DEBUG"
    if quiet or "--quiet" in argv:
        level = "CRITICAL"
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format=LOG_FORMAT,
        datefmt="%Y-%m-%d %H:%M:%S",
        stream=sys.stderr,
        force=True,
    )


def read_stdin_json() -> tuple[Optional[dict[str, Any]], Optional[str]]:
    """管道输入的 JSON 对象; 终端输入或空输入时返回 None"""
    if sys.stdin is None or sys.stdin.isatty():
        return None, None
    text = sys.stdin.read()
    if not text.strip():
        return None, None
    try:
        data = json.loads(text)
    except ValueError as e:
        return None, f"标准输入不是合法的 JSON: {e}"
    if not isinstance(data, dict):
        return None, "标准输入必须是 JSON 对象"
    return data, None


def main(argv: Optional[list[str]] = None) -> int:
    """命令行入口"""
    argv = list(sys.argv[1:] if argv is None else argv)

    config_path = None
    for i, token in enumerate(argv):
        if token in ("-c", "--config") and i + 1 < len(argv):
            config_path = argv[i + 1]
        elif token.startswith("--config="):
            config_path = token.split("=", 1)[1]

    try:
        settings = load_config(config_path)
    except Exception as e:
        envelope = {"return": 2, "error": f"配置无效: {e}"}
    else:
        setup_logging(argv, settings.logging.level, settings.logging.quiet)
        stdin_json, error = read_stdin_json()
        if error:
            envelope = {"return": 2, "error": error}
        else:
            envelope = dispatch(argv, stdin_json, settings)

    sys.stdout.write(json.dumps(envelope, ensure_ascii=False, sort_keys=True) + "\n")
    sys.stdout.flush()
    return min(int(envelope.get("return", 1)), 255)


if __name__ == "__main__":
    sys.exit(main())
