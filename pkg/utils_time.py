"""
统一时间工具模块
所有时间处理统一使用UTC；日志文件名与运行耗时格式化
"""

import time
from datetime import datetime, timezone
from typing import Optional


def get_utc_now() -> datetime:
    """获取当前UTC时间"""
    return datetime.now(timezone.utc)


def format_datetime_utc(dt: Optional[datetime], format_str: str = '%Y-%m-%d %H:%M:%S UTC') -> str:
    """格式化datetime为UTC时间字符串"""
    if dt is None:
        return 'N/A'
    if dt.tzinfo is None:
        # Naive datetime，假设是UTC
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc).strftime(format_str)


def get_log_filename(prefix: str, extension: str = '.log') -> str:
    """生成日志文件名（使用UTC日期，格式：prefix_YYYYMMDD.extension）"""
    return f"{prefix}_{get_utc_now().strftime('%Y%m%d')}{extension}"


def format_duration(seconds: float) -> str:
    """格式化耗时，例如 0.42s / 3m 05.0s / 1h 02m 03s"""
    if seconds < 60:
        return f"{seconds:.2f}s"
    minutes, secs = divmod(seconds, 60)
    if minutes < 60:
        return f"{int(minutes)}m {secs:04.1f}s"
    hours, minutes = divmod(minutes, 60)
    return f"{int(hours)}h {int(minutes):02d}m {int(secs):02d}s"


class Stopwatch:
    """单调时钟计时器"""

    def __init__(self):
        self.started = time.perf_counter()

    def elapsed(self) -> float:
        return time.perf_counter() - self.started

    def lap(self) -> float:
        """返回自上次 lap 以来的秒数并重置"""
        now = time.perf_counter()
        value, self.started = now - self.started, now
        return value
