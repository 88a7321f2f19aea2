import struct

import numpy as np
import torch

MAGIC = b"LLMD"
VERSION = 1

# dtype code -> (torch dtype, little-endian numpy dtype)
DTYPE_CODES = {
    0: (torch.float32, np.dtype("<f4")),
    1: (torch.float64, np.dtype("<f8")),
}
TORCH_TO_CODE = {torch_dtype: code for code, (torch_dtype, _) in DTYPE_CODES.items()}


def encode_checkpoint(tensors):
    """
    Serialize an ordered mapping name -> tensor into the LLMD binary format.

    Layout: magic "LLMD", u32 version, u32 tensor count, then per tensor
    u16 name length, UTF-8 name, u8 dtype code, u8 rank, u32 dims, raw values.
    All integers and values are little-endian.
    """
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, tensor in tensors.items():
        tensor = tensor.detach().cpu()
        if tensor.dtype not in TORCH_TO_CODE:
            raise ValueError(f"Tensor '{name}' has unsupported dtype {tensor.dtype}")
        code = TORCH_TO_CODE[tensor.dtype]
        encoded_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded_name)))
        chunks.append(encoded_name)
        chunks.append(struct.pack("<BB", code, tensor.dim()))
        chunks.append(struct.pack(f"<{tensor.dim()}I", *tensor.shape))
        values = tensor.contiguous().numpy().astype(DTYPE_CODES[code][1], copy=False)
        chunks.append(values.tobytes(order="C"))
    return b"".join(chunks)


def decode_checkpoint(payload):
    """Inverse of encode_checkpoint; returns a dict preserving the stored order."""
    if payload[:4] != MAGIC:
        raise ValueError("Not an LLMD checkpoint (bad magic bytes)")
    version, count = struct.unpack_from("<II", payload, 4)
    if version != VERSION:
        raise ValueError(f"Unsupported checkpoint version {version}")
    offset = 12
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", payload, offset)
        offset += 2
        name = payload[offset : offset + name_len].decode("utf-8")
        offset += name_len
        code, rank = struct.unpack_from("<BB", payload, offset)
        offset += 2
        if code not in DTYPE_CODES:
            raise ValueError(f"Tensor '{name}' has unknown dtype code {code}")
        shape = struct.unpack_from(f"<{rank}I", payload, offset)
        offset += 4 * rank
        torch_dtype, np_dtype = DTYPE_CODES[code]
        numel = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(payload, dtype=np_dtype, count=numel, offset=offset)
        offset += numel * np_dtype.itemsize
        tensors[name] = torch.from_numpy(values.reshape(shape).copy()).to(torch_dtype)
    if offset != len(payload):
        raise ValueError("Trailing bytes after the last checkpoint tensor")
    return tensors


def save_checkpoint(tensors, filepath):
    """
    Write tensors to a local LLMD checkpoint file.

    Args:
    - tensors: ordered mapping name -> tensor (f32 or f64).
    - filepath: destination path.
    """
    try:
        with open(filepath, "wb") as f:
            f.write(encode_checkpoint(tensors))
    except OSError as e:
        raise RuntimeError(f"Failed to save checkpoint to {filepath}: {e}")


def load_checkpoint(filepath):
    """Read an LLMD checkpoint file into an ordered dict name -> tensor."""
    try:
        with open(filepath, "rb") as f:
            payload = f.read()
    except OSError as e:
        raise RuntimeError(f"Failed to load checkpoint {filepath}: {e}")
    return decode_checkpoint(payload)


def with_prefix(tensors, prefix):
    return {f"{prefix}.{name}": tensor for name, tensor in tensors.items()}


def strip_prefix(tensors, prefix):
    """Select the entries under `prefix.` and drop the prefix."""
    start = len(prefix) + 1
    return {name[start:]: tensor for name, tensor in tensors.items() if name.startswith(prefix + ".")}


def print_checkpoint(filepath):
    """Print every tensor name, dtype and shape stored in a checkpoint."""
    tensors = load_checkpoint(filepath)
    for name, tensor in tensors.items():
        dtype = "f32" if tensor.dtype == torch.float32 else "f64"
        print(f"{name}\t{dtype}\t{tuple(tensor.shape)}")
    print(f"{len(tensors)} tensors")
