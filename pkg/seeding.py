import os

import numpy as np
from cryptography.hazmat.primitives import hashes

# Salt folded into every stream so seeds of this project never collide with raw PCG64 seeds
STREAM_SALT = os.environ.get("ADVFEAT_STREAM_SALT", "advfeat-stream").encode()

UINT64_MASK = (1 << 64) - 1


def _digest(*chunks):
    digest = hashes.Hash(hashes.SHA256())
    for chunk in chunks:
        digest.update(chunk)
    return digest.finalize()


def derive_seed(root_seed, purpose):
    """
    Derive a stable 64-bit seed for one purpose from a root seed

    Args:
        root_seed (int): Experiment-level seed
        purpose (str): Tag naming the consumer, e.g. "data.gen" or "train.batches"

    Returns:
        int: Unsigned 64-bit seed
    """
    root = int(root_seed) & UINT64_MASK
    raw = _digest(STREAM_SALT, root.to_bytes(8, "little"), purpose.encode())
    return int.from_bytes(raw[:8], "little")


def make_rng(root_seed, purpose):
    """Independent generator for (root seed, purpose tag)"""
    return np.random.Generator(np.random.PCG64(derive_seed(root_seed, purpose)))


def spawn_seeds(root_seed, purpose, count):
    return [derive_seed(root_seed, f"{purpose}/{i}") for i in range(count)]


def fingerprint(*arrays, tag=""):
    """
    Content id of a group of arrays, used as the provenance id of persisted data

    Args:
        *arrays: numpy arrays; dtype and shape are part of the content
        tag (str): Extra discriminator

    Returns:
        int: Unsigned 64-bit id
    """
    chunks = [STREAM_SALT, tag.encode()]
    for arr in arrays:
        arr = np.ascontiguousarray(arr)
        chunks.append(f"{arr.dtype.str}{arr.shape}".encode())
        chunks.append(arr.tobytes())
    return int.from_bytes(_digest(*chunks)[:8], "little")
