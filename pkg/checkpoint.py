"""
检查点管理器

GRAFTCKPT1 二进制容器（全部小端序）:

    magic  b"GRAFTCKPT1"
    u32    张量数量
    每个张量:
        u16 名称长度 + UTF-8 名称
        u8  维数 rank
        rank 个 u32 维度
        prod(dims) 个 float64 数值
"""
import os
import re
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from exceptions import CheckpointError
from logger import get_logger

logger = get_logger()

MAGIC = b"GRAFTCKPT1"
MAX_NAME_BYTES = 0xFFFF
MAX_RANK = 0xFF

_FILE_PATTERN = re.compile(r"^net(\d+)_epoch(\d+)\.ckpt$")


def encode_checkpoint(params: Mapping[str, np.ndarray]) -> bytes:
    """把有序的命名张量编码为 GRAFTCKPT1 字节串"""
    chunks = [MAGIC, struct.pack('<I', len(params))]
    for name, tensor in params.items():
        name_bytes = name.encode('utf-8')
        array = np.asarray(tensor, dtype=np.float64)
        if len(name_bytes) > MAX_NAME_BYTES:
            raise CheckpointError(f"张量名过长: {name[:32]}...")
        if array.ndim > MAX_RANK:
            raise CheckpointError(f"张量维数过多: {name}")
        chunks.append(struct.pack('<H', len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack('<B', array.ndim))
        chunks.append(struct.pack(f'<{array.ndim}I', *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype='<f8').tobytes())
    return b"".join(chunks)


def decode_checkpoint(data: bytes, source: Optional[str] = None) -> "OrderedDict[str, np.ndarray]":
    """解码 GRAFTCKPT1 字节串，保持张量顺序"""
    if not data.startswith(MAGIC):
        raise CheckpointError("不是 GRAFTCKPT1 检查点", path=source)
    offset = len(MAGIC)

    def take(fmt: str) -> Tuple:
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(data):
            raise CheckpointError("检查点被截断", path=source)
        values = struct.unpack_from(fmt, data, offset)
        offset += size
        return values

    (count,) = take('<I')
    params: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = take('<H')
        if offset + name_len > len(data):
            raise CheckpointError("检查点被截断", path=source)
        try:
            name = data[offset:offset + name_len].decode('utf-8')
        except UnicodeDecodeError:
            raise CheckpointError("张量名不是合法的 UTF-8", path=source)
        offset += name_len
        (rank,) = take('<B')
        dims = take(f'<{rank}I')
        size = int(np.prod(dims, dtype=np.int64))
        if offset + size * 8 > len(data):
            raise CheckpointError(f"张量 {name} 数据被截断", path=source)
        values = np.frombuffer(data, dtype='<f8', count=size, offset=offset)
        offset += size * 8
        if name in params:
            raise CheckpointError(f"重复的张量名: {name}", path=source)
        params[name] = values.astype(np.float64).reshape(dims)

    if offset != len(data):
        raise CheckpointError("检查点末尾存在多余数据", path=source)
    return params


def save_checkpoint(params: Mapping[str, np.ndarray], path: str) -> str:
    """写入检查点（先写临时文件再替换，避免留下半个文件）"""
    target = Path(path)
    tmp = target.with_name(target.name + ".tmp")
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, 'wb') as f:
            f.write(encode_checkpoint(params))
        os.replace(tmp, target)
    except OSError as e:
        raise CheckpointError(f"写入检查点失败: {e}", path=str(target))
    return str(target)


def load_checkpoint(path: str) -> "OrderedDict[str, np.ndarray]":
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"读取检查点失败: {e}", path=str(path))
    return decode_checkpoint(data, source=str(path))


class CheckpointStore:
    """按网络编号和 epoch 组织的检查点目录: net{k}_epoch{e:03d}.ckpt"""

    def __init__(self, directory: str):
        self.directory = Path(directory)
        try:
            self.directory.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise CheckpointError(f"无法创建检查点目录: {e}", path=str(directory))

    def path_for(self, network_id: int, epoch: int) -> str:
        return str(self.directory / f"net{network_id}_epoch{epoch:03d}.ckpt")

    def save(self, network_id: int, epoch: int, params: Mapping[str, np.ndarray]) -> str:
        path = save_checkpoint(params, self.path_for(network_id, epoch))
        logger.debug(f"已保存检查点: {path}")
        return path

    def load(self, network_id: int, epoch: int) -> "OrderedDict[str, np.ndarray]":
        return load_checkpoint(self.path_for(network_id, epoch))

    def list_checkpoints(self) -> Dict[int, List[int]]:
        """{network_id: [epoch, ...]}，均升序"""
        found: Dict[int, List[int]] = {}
        for entry in sorted(self.directory.iterdir()):
            match = _FILE_PATTERN.match(entry.name)
            if match:
                found.setdefault(int(match.group(1)), []).append(int(match.group(2)))
        return {k: sorted(v) for k, v in sorted(found.items())}

    def latest(self, network_id: int) -> Optional[str]:
        epochs = self.list_checkpoints().get(network_id)
        return self.path_for(network_id, epochs[-1]) if epochs else None
