"""Checkpoint and restore of a running fabric.

File layout: the 8-byte magic ``OCTOCKPT``, a little-endian u16 format
version, then a pickle of the :class:`Fabric` object.  Only load files you
wrote yourself: unpickling runs arbitrary code.
"""

from __future__ import annotations

import pickle
import struct

MAGIC = b"OCTOCKPT"
VERSION = 1
_HDR = struct.Struct("<8sH")


class CheckpointError(Exception):
    pass


def save_checkpoint(fabric, path) -> None:
    with open(path, "wb") as f:
        f.write(_HDR.pack(MAGIC, VERSION))
        pickle.dump(fabric, f, protocol=pickle.HIGHEST_PROTOCOL)


def load_checkpoint(path):
    with open(path, "rb") as f:
        head = f.read(_HDR.size)
        if len(head) < _HDR.size:
            raise CheckpointError(f"{path}: truncated header")
        magic, version = _HDR.unpack(head)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        return pickle.load(f)
