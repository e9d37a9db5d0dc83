import logging
import os
import time
from typing import Any, Dict, List

import psutil

logger = logging.getLogger(__name__)


class ResourceMonitor:
    """Samples this process's memory and CPU use, e.g. once per training epoch"""

    def __init__(self):
        self.start_time = time.time()
        self.process = psutil.Process(os.getpid())
        self.samples: List[Dict[str, Any]] = []
        # first call primes psutil's CPU counters
        self.process.cpu_percent(interval=None)

    def collect(self) -> Dict[str, Any]:
        """Current process metrics; non-blocking"""
        memory = self.process.memory_info()
        return {
            'rss_mb': memory.rss / 1024 / 1024,
            'cpu_percent': self.process.cpu_percent(interval=None),
            'system_memory_percent': psutil.virtual_memory().percent,
            'elapsed_seconds': time.time() - self.start_time,
        }

    def sample(self, label: str = "") -> Dict[str, Any]:
        """Collect, remember and return one sample"""
        metrics = self.collect()
        metrics['label'] = label
        self.samples.append(metrics)
        return metrics

    def log_sample(self, label: str = "") -> Dict[str, Any]:
        metrics = self.sample(label)
        logger.debug(f"Resources [{label}]: rss={metrics['rss_mb']:.1f}MB cpu={metrics['cpu_percent']:.0f}%")
        return metrics

    def peak_rss_mb(self) -> float:
        return max((s['rss_mb'] for s in self.samples), default=0.0)

    def summary(self) -> Dict[str, Any]:
        return {
            'samples': len(self.samples),
            'peak_rss_mb': self.peak_rss_mb(),
            'elapsed_seconds': time.time() - self.start_time,
        }
