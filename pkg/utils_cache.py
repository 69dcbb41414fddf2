"""
特征缓存工具模块
按内容键（图像字节、分块步长与位置、模型摘要）缓存 FC2 特征，扫描步长时避免重复计算
"""
import hashlib
import json
import logging
from collections import OrderedDict
from typing import Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)


def array_digest(array: np.ndarray) -> str:
    """数组内容的MD5摘要（包含形状与类型）"""
    array = np.ascontiguousarray(array)
    digest = hashlib.md5(f"{array.shape}:{array.dtype.str}:".encode())
    digest.update(array.tobytes())
    return digest.hexdigest()


class FeatureCache:
    """特征缓存（LRU）"""

    def __init__(self, max_entries: int = 256, logger: Optional[logging.Logger] = None):
        """
        初始化特征缓存

        Args:
            max_entries (int): 最多保留的条目数
            logger: 可选日志器
        """
        self.max_entries = max_entries
        self.logger = logger or logging.getLogger(__name__)
        self._entries: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.hits = 0
        self.misses = 0

    @staticmethod
    def make_key(image_digest: str, model_digest: str, step: int,
                 positions: Sequence[Tuple[int, int]], standardize: bool = False) -> str:
        """
        生成缓存键；步长与全部分块位置都参与，不同步长永不共享

        Returns:
            str: 缓存键
        """
        params_str = json.dumps({
            "image": image_digest,
            "model": model_digest,
            "step": int(step),
            "positions": [[int(r), int(c)] for r, c in positions],
            "standardize": bool(standardize),
        }, sort_keys=True)
        return hashlib.md5(params_str.encode()).hexdigest()

    def get(self, key: str) -> Optional[np.ndarray]:
        features = self._entries.get(key)
        if features is None:
            self.misses += 1
            return None
        self._entries.move_to_end(key)
        self.hits += 1
        return features.copy()

    def put(self, key: str, features: np.ndarray) -> None:
        self._entries[key] = np.array(features, copy=True)
        self._entries.move_to_end(key)
        while len(self._entries) > self.max_entries:
            self._entries.popitem(last=False)

    def __len__(self) -> int:
        return len(self._entries)

    def stats(self) -> str:
        return f"📊 Feature cache: {len(self)} entries, {self.hits} hits, {self.misses} misses"
