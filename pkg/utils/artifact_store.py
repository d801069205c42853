import logging
import os
import struct
import tempfile
import zlib
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch
from dotenv import load_dotenv

logger = logging.getLogger(__name__)

load_dotenv()

# fsync artifacts before the rename (disable on slow network file systems)
ARTIFACT_FSYNC = os.getenv('MOLFED_ARTIFACT_FSYNC', 'True').lower() in ('true', '1', 't')

CHECKPOINT_HEADER = b'GGFCKPT v1\n'
CRC_SIZE = 4


class CorruptCheckpoint(ValueError):
    pass


def atomic_write(path, data):
    """
    Write ``data`` (str or bytes) to ``path`` through a temporary file in the
    same directory followed by a rename, so readers never see a partial file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode('utf-8')

    handle = tempfile.NamedTemporaryFile(dir=path.parent, prefix=f".{path.name}.", delete=False)
    try:
        with handle:
            handle.write(data)
            handle.flush()
            if ARTIFACT_FSYNC:
                os.fsync(handle.fileno())
        os.replace(handle.name, path)
    except BaseException:
        Path(handle.name).unlink(missing_ok=True)
        raise
    logger.debug(f"Wrote {len(data)} bytes to {path}")
    return path


def encode_checkpoint(tensors):
    payload = bytearray()
    for name, tensor in tensors.items():
        if '\t' in name or '\n' in name:
            raise ValueError(f"parameter name {name!r} contains a separator")
        values = tensor.detach().cpu().to(torch.float32).contiguous().numpy()
        fields = [name, str(values.ndim)] + [str(size) for size in values.shape]
        payload += ('\t'.join(fields) + '\t').encode('ascii')
        payload += values.astype('<f4').tobytes(order='C')
    return CHECKPOINT_HEADER + bytes(payload) + struct.pack('<I', zlib.crc32(payload))


def _read_field(payload, offset):
    end = payload.find(b'\t', offset)
    if end < 0:
        raise CorruptCheckpoint(f"unterminated record field at byte {offset}")
    return payload[offset:end].decode('ascii'), end + 1


def decode_checkpoint(data):
    if not data.startswith(CHECKPOINT_HEADER):
        raise CorruptCheckpoint("missing checkpoint header")
    if len(data) < len(CHECKPOINT_HEADER) + CRC_SIZE:
        raise CorruptCheckpoint("checkpoint is truncated")

    payload = data[len(CHECKPOINT_HEADER):-CRC_SIZE]
    (expected,) = struct.unpack('<I', data[-CRC_SIZE:])
    if zlib.crc32(payload) != expected:
        raise CorruptCheckpoint("CRC mismatch")

    tensors = OrderedDict()
    offset = 0
    try:
        while offset < len(payload):
            name, offset = _read_field(payload, offset)
            rank_text, offset = _read_field(payload, offset)
            shape = []
            for _ in range(int(rank_text)):
                size, offset = _read_field(payload, offset)
                shape.append(int(size))
            count = int(np.prod(shape, dtype=np.int64))
            end = offset + 4 * count
            if end > len(payload):
                raise CorruptCheckpoint(f"record '{name}' runs past the end of the payload")
            values = np.frombuffer(payload[offset:end], dtype='<f4').reshape(shape)
            tensors[name] = torch.from_numpy(values.astype(np.float32))
            offset = end
    except (UnicodeDecodeError, ValueError) as e:
        if isinstance(e, CorruptCheckpoint):
            raise
        raise CorruptCheckpoint(f"malformed record: {e}") from e
    return tensors


def write_checkpoint(path, tensors):
    path = atomic_write(path, encode_checkpoint(tensors))
    logger.debug(f"Checkpoint with {len(tensors)} tensors written to {path}")
    return path


def read_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        return decode_checkpoint(path.read_bytes())
    except CorruptCheckpoint as e:
        logger.error(f"Corrupt checkpoint {path}: {e}")
        raise
