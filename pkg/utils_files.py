"""
文件写入工具模块
所有机器输出（检查点、清单、报告、原始概率图）统一原子写入：先写临时文件再 os.replace
"""
import json
import logging
import os
import tempfile
from typing import Any, Union

from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]


@retry(
    stop=stop_after_attempt(3),
    wait=wait_exponential(multiplier=0.1, min=0.1, max=1),
    retry=retry_if_exception_type(OSError),
    reraise=True,
)
def _replace(source: str, target: str) -> None:
    """替换目标文件，瞬时文件系统错误时重试"""
    os.replace(source, target)


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    """
    原子写入字节数据

    Args:
        path: 目标路径
        data: 要写入的字节
    """
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, temp_path = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
            handle.flush()
            os.fsync(handle.fileno())
        _replace(temp_path, path)
    except BaseException:
        if os.path.exists(temp_path):
            os.unlink(temp_path)
        raise
    logger.debug(f"Wrote {len(data)} bytes to {path}")


def atomic_write_text(path: PathLike, text: str) -> None:
    """原子写入UTF-8文本"""
    atomic_write_bytes(path, text.encode("utf-8"))


def dumps_json(payload: Any) -> str:
    """稳定的JSON序列化（键排序），相同输入得到相同字节"""
    return json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def atomic_write_json(path: PathLike, payload: Any) -> None:
    """原子写入JSON文件"""
    atomic_write_text(path, dumps_json(payload))


def append_json_line(path: PathLike, payload: Any) -> None:
    """追加一行JSON（JSON Lines），通过重写整个文件保持原子性"""
    path = os.fspath(path)
    existing = ""
    if os.path.exists(path):
        with open(path, "r", encoding="utf-8") as handle:
            existing = handle.read()
    line = json.dumps(payload, sort_keys=True, ensure_ascii=False)
    atomic_write_text(path, existing + line + "\n")


def read_json(path: PathLike) -> Any:
    with open(path, "r", encoding="utf-8") as handle:
        return json.load(handle)


def is_empty_dir(path: PathLike) -> bool:
    """目录不存在或为空"""
    return not os.path.isdir(path) or not os.listdir(path)
