import sys
import time
import tracemalloc

from runner import run_capture

NOISY = "import sys\nchunk = b'x' * 65536\nfor _ in range({n}):\n    sys.stdout.buffer.write(chunk)\n"


def test_capture_keeps_prefix_only():
    result = run_capture([sys.executable, "-c", "print('toolx 1.2.3'); print('y' * 100)"], timeout=30, limit=11)
    assert result.exit_code == 0
    assert result.output == "toolx 1.2.3"


def test_capture_memory_is_bounded():
    # 子进程输出 64 MiB, 内存中只保留 limit 字节
    tracemalloc.start()
    try:
        result = run_capture([sys.executable, "-c", NOISY.format(n=1024)], timeout=60, limit=64 * 1024)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    assert result.exit_code == 0
    assert len(result.output) == 64 * 1024
    assert peak < 8 * 1024 * 1024


def test_timeout_with_noisy_child():
    start = time.monotonic()
    result = run_capture([sys.executable, "-c", "import sys\nwhile True:\n    sys.stdout.write('z' * 4096)\n"],
                         timeout=0.5, limit=1024)
    assert result.timed_out
    assert result.exit_code is None
    assert len(result.output) == 1024
    assert time.monotonic() - start < 5
