"""
Seed splitting and block-parallel execution.

Paths are grouped in fixed blocks of BLOCK_PATHS. Block k of purpose `tag`
under master seed s draws from

    SeedSequence(entropy=s, spawn_key=(crc32(tag), k))

so every estimate depends on (seed, tag, path count) and never on how many
workers ran the blocks.
"""

import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Tuple, TypeVar

import numpy as np

BLOCK_PATHS = 4096
THREADS_ENV = "JUMPEX_THREADS"

T = TypeVar("T")


def tag_key(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def stream_seed(seed: int, tag: str, index: int) -> np.random.SeedSequence:
    """SeedSequence for stream `index` of purpose `tag`"""
    return np.random.SeedSequence(entropy=int(seed), spawn_key=(tag_key(tag), int(index)))


def block_generator(seed: int, tag: str, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(stream_seed(seed, tag, index)))


def path_blocks(n_paths: int, block_paths: int = BLOCK_PATHS) -> List[Tuple[int, int, int]]:
    """Split n_paths into (block index, start, stop) triples"""
    if n_paths < 1:
        raise ValueError(f"n_paths must be >= 1, got {n_paths}")
    return [(k, start, min(start + block_paths, n_paths))
            for k, start in enumerate(range(0, n_paths, block_paths))]


def worker_count(default: int = 1) -> int:
    """Worker threads from JUMPEX_THREADS (falls back to `default`)"""
    raw = os.getenv(THREADS_ENV)
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        return default


def run_blocks(fn: Callable[[np.random.Generator, int], T], seed: int, tag: str,
               n_paths: int, workers: Optional[int] = None,
               block_paths: int = BLOCK_PATHS) -> List[T]:
    """
    Run fn(rng, block_size) on every path block and return the results in block order.

    Args:
        fn: simulation or reduction for one block
        seed: master seed
        tag: purpose tag, keeps streams of different experiments apart
        n_paths: total path count
        workers: thread count, defaults to JUMPEX_THREADS

    Returns:
        List with one entry per block
    """
    blocks = path_blocks(n_paths, block_paths)
    workers = worker_count() if workers is None else max(1, int(workers))

    def _one(block: Tuple[int, int, int]) -> T:
        k, start, stop = block
        return fn(block_generator(seed, tag, k), stop - start)

    if workers == 1 or len(blocks) == 1:
        return [_one(b) for b in blocks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_one, blocks))
