"""
二进制检查点 (小端):

    "RCMC" | u32 版本 | u32 条目数
    每个条目: u16 名字长度 | UTF-8 名字 | u8 dtype (0=f32, 1=f64) | u8 维数 | u32 各维 | 原始数据
    u32 CRC32 (覆盖之前的全部字节)

文件本身自描述, 不依赖模型代码即可列出全部张量; 重建模型所需的结构信息写在旁边的 <path>.json.
优化器动量不入检查点.
"""
import json
import os
import struct
import zlib
from pathlib import Path
from typing import Dict, Union

import numpy as np

from ..layers.backbone import Backbone
from ..utils.errors import CheckpointError
from ..utils.logger import get_logger

logger = get_logger(__name__)

MAGIC = b'RCMC'
FORMAT_VERSION = 1
DTYPE_CODES = {np.dtype('<f4'): 0, np.dtype('<f8'): 1}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}

PathLike = Union[str, Path]


def metadata_path(path: PathLike) -> Path:
    return Path(f"{path}.json")


def encode_arrays(arrays: Dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack('<II', FORMAT_VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.newbyteorder('<')
        if dtype not in DTYPE_CODES:
            raise CheckpointError(f"{name}: 不支持的 dtype {arr.dtype}")
        encoded = name.encode('utf-8')
        chunks.append(struct.pack('<H', len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack('<BB', DTYPE_CODES[dtype], arr.ndim))
        chunks.append(struct.pack(f'<{arr.ndim}I', *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    payload = b''.join(chunks)
    return payload + struct.pack('<I', zlib.crc32(payload) & 0xFFFFFFFF)


def decode_arrays(blob: bytes) -> Dict[str, np.ndarray]:
    if len(blob) < len(MAGIC) + 12:
        raise CheckpointError("检查点被截断: 文件过短")
    payload, (crc,) = blob[:-4], struct.unpack('<I', blob[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CheckpointError("检查点 CRC 校验失败, 文件已损坏或被截断")
    if payload[:4] != MAGIC:
        raise CheckpointError(f"不是检查点文件 (magic={payload[:4]!r})")
    version, count = struct.unpack_from('<II', payload, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"检查点版本 {version} 与当前版本 {FORMAT_VERSION} 不符")

    arrays: Dict[str, np.ndarray] = {}
    offset = 12
    try:
        for _ in range(count):
            (length,) = struct.unpack_from('<H', payload, offset)
            offset += 2
            name = payload[offset:offset + length].decode('utf-8')
            offset += length
            code, ndim = struct.unpack_from('<BB', payload, offset)
            offset += 2
            if code not in CODE_DTYPES:
                raise CheckpointError(f"{name}: 未知的 dtype 代码 {code}")
            shape = struct.unpack_from(f'<{ndim}I', payload, offset)
            offset += 4 * ndim
            dtype = CODE_DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if offset + nbytes > len(payload):
                raise CheckpointError(f"{name}: 数据被截断")
            arrays[name] = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize,
                                         offset=offset).reshape(shape).copy()
            offset += nbytes
    except struct.error as exc:
        raise CheckpointError(f"检查点被截断: {exc}") from exc
    if offset != len(payload):
        raise CheckpointError(f"检查点末尾有 {len(payload) - offset} 字节多余数据")
    return arrays


def read_checkpoint(path: PathLike) -> Dict[str, np.ndarray]:
    """只读张量清单, 不需要模型结构"""
    return decode_arrays(Path(path).read_bytes())


def save_checkpoint(model: Backbone, path: PathLike) -> Path:
    """写出检查点与结构元数据; 先写临时文件再替换"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_arrays(model.state_arrays())
    tmp = path.with_name(path.name + '.tmp')
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    metadata_path(path).write_text(
        json.dumps(model.metadata(), indent=2, sort_keys=True, ensure_ascii=False) + '\n',
        encoding='utf-8')
    logger.info(f"检查点已保存: {path} ({len(blob)} 字节)")
    return path


def load_checkpoint(path: PathLike) -> Backbone:
    path = Path(path)
    arrays = read_checkpoint(path)
    meta_file = metadata_path(path)
    if not meta_file.exists():
        raise CheckpointError(f"缺少结构元数据: {meta_file}")
    model = Backbone.from_metadata(json.loads(meta_file.read_text(encoding='utf-8')))
    model.load_state(arrays)
    logger.debug(f"检查点已加载: {path}, {model}")
    return model
