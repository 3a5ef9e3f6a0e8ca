"""Memory and pickle-file cache for generated datasets."""

import hashlib
import json
import logging
import os
import pickle
from datetime import datetime, timedelta
from typing import Any, Callable, Dict, Mapping, Optional

from . import __version__
from .synth import SynthConfig, SynthDataset

logger = logging.getLogger(__name__)

CACHE_FORMAT = "simcal-lab/dataset-cache-v1"


def dataset_key(split: str, synth: SynthConfig, **extra: Any) -> Dict[str, Any]:
    """Cache key of one generated split."""
    return {"split": split, "synth": synth.to_dict(), **extra}


def fingerprint(key_config: Mapping[str, Any], version: Optional[str] = None) -> str:
    """SHA-256 of the canonical JSON of a generating configuration.

    The cache format and package version are part of the hash, so files
    written by another release are never served.
    """
    payload = {"format": CACHE_FORMAT, "version": version or __version__, "key": key_config}
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class DatasetCache:
    """Caches datasets keyed by the fingerprint of what generated them."""

    def __init__(self, cache_dir: Optional[str] = None, cache_duration_hours: int = 24 * 7):
        self._memory_cache: Dict[str, SynthDataset] = {}
        self.cache_duration = timedelta(hours=cache_duration_hours)

        if cache_dir:
            self.cache_dir = cache_dir
        else:
            home = os.path.expanduser("~")
            self.cache_dir = os.path.join(home, ".simcal_lab", "cache")

        os.makedirs(self.cache_dir, exist_ok=True)

    def _get_cache_path(self, key: str) -> str:
        return os.path.join(self.cache_dir, f"dataset_{key}.pkl")

    def _load_from_cache(self, key: str) -> Optional[SynthDataset]:
        """Try to load a dataset from its cache file."""
        cache_path = self._get_cache_path(key)
        if not os.path.exists(cache_path):
            return None
        try:
            cache_time = datetime.fromtimestamp(os.path.getmtime(cache_path))
            if datetime.now() - cache_time >= self.cache_duration:
                logger.debug("cache file %s expired", cache_path)
                return None
            with open(cache_path, "rb") as f:
                cache_data = pickle.load(f)
            if cache_data.get("fingerprint") != key:
                return None
            return cache_data["dataset"]
        except Exception as e:
            logger.debug("ignoring unreadable cache file %s: %s", cache_path, e)
            return None

    def _save_to_cache(self, key: str, dataset: SynthDataset) -> None:
        cache_path = self._get_cache_path(key)
        try:
            with open(cache_path, "wb") as f:
                pickle.dump({"fingerprint": key, "dataset": dataset}, f)
        except Exception as e:
            logger.debug("could not write cache file %s: %s", cache_path, e)

    def get_or_create(
        self,
        key_config: Mapping[str, Any],
        factory: Callable[[], SynthDataset],
        force_refresh: bool = False,
    ) -> SynthDataset:
        """Return the cached dataset for ``key_config`` or build and store it."""
        key = fingerprint(key_config)
        if not force_refresh:
            if key in self._memory_cache:
                return self._memory_cache[key]
            dataset = self._load_from_cache(key)
            if dataset is not None:
                logger.info("dataset %s loaded from cache", key[:12])
                self._memory_cache[key] = dataset
                return dataset

        dataset = factory()
        self._memory_cache[key] = dataset
        self._save_to_cache(key, dataset)
        return dataset

    def clear_cache(self, key: Optional[str] = None) -> None:
        """Clear one fingerprint or every cached dataset."""
        if key:
            cache_path = self._get_cache_path(key)
            if os.path.exists(cache_path):
                os.remove(cache_path)
            self._memory_cache.pop(key, None)
        else:
            for file in os.listdir(self.cache_dir):
                if file.startswith("dataset_") and file.endswith(".pkl"):
                    os.remove(os.path.join(self.cache_dir, file))
            self._memory_cache.clear()
